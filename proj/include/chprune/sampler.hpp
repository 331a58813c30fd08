#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "chprune/dataset.hpp"
#include "chprune/network.hpp"
#include "chprune/rng.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

struct SampleOrigin {
  std::size_t image = 0;  // index into the dataset
  std::size_t y = 0;      // output row of the sampled position
  std::size_t x = 0;      // output column
};

// Input patches of one conv layer and the layer's pre-activation responses
// to them. Row i of `volumes` is the flattened (c, ky, kx) window that
// produced row i of `ref_outputs`.
struct VolumeSet {
  std::string layer_id;
  std::size_t channels = 0;
  std::size_t kernel = 0;
  Tensor volumes;      // N x (C*K*K)
  Tensor ref_outputs;  // N x F
  std::vector<SampleOrigin> origins;

  std::size_t size() const { return volumes.empty() ? 0 : volumes.dim(0); }
  std::size_t dim() const { return channels * kernel * kernel; }
  std::size_t filters() const { return ref_outputs.empty() ? 0 : ref_outputs.dim(1); }
};

struct SamplerConfig {
  double image_fraction = 0.01;
  std::size_t volumes_per_image = 10;
  std::size_t max_volumes = 100000;

  void validate() const;
};

// Number of images drawn for a dataset of `dataset_size` samples.
std::size_t sampled_image_count(std::size_t dataset_size, const SamplerConfig& cfg);

// Draws ceil(fraction * |data|) images, then `volumes_per_image` distinct
// output positions per image, uniformly. Activations come from an inference
// pass over the unaugmented data.
VolumeSet sample_volumes(const Network& net, const Dataset& data, const std::string& layer_id,
                         const SamplerConfig& cfg, Rng& rng);

// Window of `feature` (N x C x H x W) feeding output (oy, ox) of a conv with
// the given geometry, zero where it overlaps padding.
std::vector<double> extract_patch(const Tensor& feature, std::size_t n, std::size_t oy,
                                  std::size_t ox, std::size_t kernel, std::size_t stride,
                                  std::size_t padding);

void save_volume_set(const VolumeSet& vs, const std::filesystem::path& dir);
VolumeSet load_volume_set(const std::filesystem::path& dir);

}  // namespace chprune
