#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chprune/rng.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

struct Normalization {
  std::vector<double> mean;  // per channel, in [0,1] pixel units
  std::vector<double> std;
};

// Images (N x C x H x W, already normalised) with integer labels.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split = "train";
  Normalization normalization;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  // Gathers the given rows into a new batch tensor.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  // First n samples.
  Dataset head(std::size_t n) const;

  void validate() const;
};

// Per-channel mean/std of raw [0,1] images.
Normalization compute_normalization(const Tensor& raw);
void normalize_in_place(Tensor& images, const Normalization& norm);
void denormalize_in_place(Tensor& images, const Normalization& norm);

enum class DataFormat { kIdx, kCifarBinary, kSynthetic, kDigits };

DataFormat data_format_from_string(const std::string& name);
std::string to_string(DataFormat f);

// Class-prototype generator: each class owns a random pattern, samples add
// Gaussian noise. Labels cycle through the classes.
struct SyntheticSpec {
  std::uint64_t seed = 1;
  std::size_t size = 100;
  std::size_t classes = 2;
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  double noise = 0.25;
  std::uint64_t stream = 0;  // sample stream; splits use different streams
};

// Procedural handwritten-style digit glyphs (see digits.cpp).
struct DigitsSpec {
  std::uint64_t seed = 1;
  std::size_t size = 1000;
  std::size_t image_size = 16;
  std::uint64_t stream = 0;
};

struct DatasetSource {
  DataFormat format = DataFormat::kSynthetic;
  std::filesystem::path images;           // idx image file
  std::filesystem::path labels;           // idx label file
  std::vector<std::filesystem::path> files;  // cifar binary batches
  SyntheticSpec synthetic;
  DigitsSpec digits;
  std::size_t limit = 0;  // keep only the first `limit` samples when > 0
};

// Loads and normalises a dataset. Without `norm` the statistics of the loaded
// images themselves are used.
Dataset load_dataset(const DatasetSource& source, const std::string& split,
                     const Normalization* norm = nullptr);

// Raw 8-bit images in N x C x H x W order plus labels.
struct RawImages {
  std::size_t count = 0;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;
};

RawImages read_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx(const RawImages& raw, const std::filesystem::path& images,
               const std::filesystem::path& labels);
RawImages read_cifar_binary(const std::vector<std::filesystem::path>& files);
void write_cifar_binary(const RawImages& raw, const std::filesystem::path& file);

RawImages generate_digits(const DigitsSpec& spec);
RawImages generate_synthetic(const SyntheticSpec& spec);

struct AugmentPolicy {
  bool enabled = false;
  std::size_t pad = 0;      // zero padding for random crop, 0 disables
  double flip_prob = 0.0;   // horizontal flip probability

  void validate() const;
};

// Same shape as `batch`; identity when the policy is disabled.
Tensor augment(const Tensor& batch, const AugmentPolicy& policy, Rng& rng);

}  // namespace chprune
