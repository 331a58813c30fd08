#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "chprune/dataset.hpp"
#include "chprune/distill.hpp"
#include "chprune/engine.hpp"
#include "chprune/genetic.hpp"
#include "chprune/pruner.hpp"
#include "chprune/sampler.hpp"
#include "json.hpp"

namespace chprune {

enum class Command { kTrain, kSensitivity, kPrune, kFinetune, kEval, kStats };

Command command_from_string(const std::string& name);
std::string to_string(Command c);

struct DataSplitConfig {
  std::string images;              // idx image file
  std::string labels;              // idx label file
  std::vector<std::string> files;  // cifar binary batches
  std::size_t limit = 0;
};

struct DataConfig {
  DataFormat format = DataFormat::kDigits;
  DataSplitConfig train;
  DataSplitConfig test;
  // Generated formats (digits, synthetic).
  std::uint64_t seed = 1;
  std::size_t train_size = 10000;
  std::size_t test_size = 2000;
  std::size_t image_size = 16;
  std::size_t classes = 2;    // synthetic only
  std::size_t channels = 1;   // synthetic only
  double noise = 0.25;        // synthetic only
  std::optional<Normalization> normalization;  // default: train split statistics
};

struct ModelConfig {
  std::string path;                       // model directory; empty builds `architecture`
  std::string architecture = "small-cnn";
  std::size_t num_classes = 10;
  Shape input_shape{1, 16, 16};
};

struct TrainConfig {
  std::size_t epochs = 10;
  OptimizerConfig optimizer;
  AugmentPolicy augment;
};

struct SensitivityConfig {
  std::vector<std::string> layers;  // empty: every prunable layer
  std::vector<double> rates{0.2, 0.4, 0.6, 0.8};
};

struct RunConfig {
  Command command = Command::kStats;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::size_t max_workers = 1;
  ModelConfig model;
  std::string teacher_path;  // finetune: attention-transfer teacher
  DataConfig data;
  TrainConfig train;
  SamplerConfig sampler;
  GAConfig ga;
  SensitivityConfig sensitivity;
  PruningPlan plan;
  std::string plan_path;  // overrides `plan` when set
  FinetuneConfig finetune;
  DistillConfig distill;

  // Relative paths resolve against this directory; not serialised.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& p) const;
  void validate() const;
};

// Parses and validates a config object; unknown keys and out-of-range
// values raise ConfigError. `seed` is required.
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig parse_config_file(const std::filesystem::path& path);

// Canonical form: every field present, defaults filled in.
nlohmann::json serialize(const RunConfig& cfg);

DatasetSource dataset_source(const DataConfig& cfg, const std::string& split,
                             const std::filesystem::path& base_dir);

}  // namespace chprune
