#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "chprune/network.hpp"
#include "chprune/tensor.hpp"
#include "json.hpp"

namespace chprune {

inline constexpr int kFormatVersion = 1;

enum class BlobType { kFloat32, kFloat64 };

// A directory holding manifest.json plus one raw little-endian blob per
// tensor, row-major. Tensor entries live under manifest["tensors"].
struct TensorBundle {
  nlohmann::json manifest = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

void write_bundle(const std::filesystem::path& dir, const TensorBundle& bundle,
                  BlobType type = BlobType::kFloat32);
TensorBundle read_bundle(const std::filesystem::path& dir);

// Model container: layer list with hyperparameters in the manifest and one
// float32 blob per parameter named "<layer-id>.<role>.bin".
void save_model(const Network& net, const std::filesystem::path& dir);
Network load_model(const std::filesystem::path& dir);

nlohmann::json network_to_json(const Network& net);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace chprune
