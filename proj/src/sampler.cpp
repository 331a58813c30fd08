#include "chprune/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "chprune/engine.hpp"
#include "chprune/errors.hpp"
#include "chprune/model_io.hpp"

namespace chprune {

void SamplerConfig::validate() const {
  if (!(image_fraction > 0.0 && image_fraction <= 1.0)) {
    throw ConfigError("image fraction must lie in (0, 1]");
  }
  if (volumes_per_image == 0 || max_volumes == 0) {
    throw ConfigError("sampler must request at least one volume");
  }
}

std::size_t sampled_image_count(std::size_t dataset_size, const SamplerConfig& cfg) {
  cfg.validate();
  // The small slack keeps products like 0.07 * 100 from rounding up to 8.
  const double want = std::ceil(cfg.image_fraction * static_cast<double>(dataset_size) - 1e-9);
  std::size_t images = std::clamp<std::size_t>(static_cast<std::size_t>(want), 1, dataset_size);
  const std::size_t cap = std::max<std::size_t>(1, cfg.max_volumes / cfg.volumes_per_image);
  return std::min(images, cap);
}

std::vector<double> extract_patch(const Tensor& feature, std::size_t n, std::size_t oy,
                                  std::size_t ox, std::size_t kernel, std::size_t stride,
                                  std::size_t padding) {
  const std::size_t C = feature.dim(1), H = feature.dim(2), W = feature.dim(3);
  std::vector<double> patch(C * kernel * kernel, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
        patch[(c * kernel + ky) * kernel + kx] =
            feature.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
      }
    }
  }
  return patch;
}

VolumeSet sample_volumes(const Network& net, const Dataset& data, const std::string& layer_id,
                         const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("cannot sample volumes from an empty dataset");
  const std::size_t li = net.index_of(layer_id);
  const LayerSpec& layer = net.layers[li];
  if (layer.kind != LayerKind::kConv2d) {
    throw PruneError("layer " + layer_id + " is not convolutional");
  }
  const std::vector<Shape> shapes = net.output_shapes();
  const std::size_t out_h = shapes[li][1], out_w = shapes[li][2];
  const std::size_t positions = out_h * out_w;
  if (cfg.volumes_per_image > positions) {
    throw ConfigError("layer " + layer_id + " has only " + std::to_string(positions) +
                      " output positions, cannot sample " + std::to_string(cfg.volumes_per_image) +
                      " per image");
  }

  const std::size_t n_images = sampled_image_count(data.size(), cfg);
  std::vector<std::size_t> images = rng.sample_without_replacement(data.size(), n_images);
  std::sort(images.begin(), images.end());

  const std::string input_id = li == 0 ? std::string(kInputId) : net.layers[li - 1].id;
  const std::size_t D = layer.in_channels * layer.kernel * layer.kernel;
  const std::size_t F = layer.out_channels;
  const std::size_t N = n_images * cfg.volumes_per_image;

  VolumeSet vs;
  vs.layer_id = layer_id;
  vs.channels = layer.in_channels;
  vs.kernel = layer.kernel;
  vs.volumes = Tensor({N, D});
  vs.ref_outputs = Tensor({N, F});
  vs.origins.resize(N);

  const Tensor& weight = layer.param(role::kWeight);
  const Tensor* bias = layer.bias ? &layer.param(role::kBias) : nullptr;
  constexpr std::size_t kChunk = 128;
  std::size_t row = 0;
  for (std::size_t start = 0; start < n_images; start += kChunk) {
    const std::size_t end = std::min(n_images, start + kChunk);
    std::span<const std::size_t> idx(images.data() + start, end - start);
    const ForwardResult fr = forward(net, data.gather(idx), {input_id, layer_id});
    const Tensor& feat = fr.trace.at(input_id);
    const Tensor& out = fr.trace.at(layer_id);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::vector<std::size_t> picks = rng.sample_without_replacement(positions, cfg.volumes_per_image);
      for (std::size_t pos : picks) {
        const std::size_t oy = pos / out_w, ox = pos % out_w;
        const std::vector<double> patch =
            extract_patch(feat, b, oy, ox, layer.kernel, layer.stride, layer.padding);
        std::copy(patch.begin(), patch.end(), vs.volumes.data() + row * D);
        for (std::size_t f = 0; f < F; ++f) {
          const double y = out.at(b, f, oy, ox);
          double direct = bias ? (*bias)[f] : 0.0;
          for (std::size_t d = 0; d < D; ++d) direct += weight[f * D + d] * patch[d];
          if (std::abs(direct - y) > 1e-5 * std::max(1.0, std::abs(y))) {
            throw NumericError("sampled volume disagrees with captured output of " + layer_id);
          }
          vs.ref_outputs[row * F + f] = y;
        }
        vs.origins[row] = {idx[b], oy, ox};
        ++row;
      }
    }
  }
  return vs;
}

void save_volume_set(const VolumeSet& vs, const std::filesystem::path& dir) {
  TensorBundle b;
  b.manifest["kind"] = "volume-set";
  b.manifest["layer_id"] = vs.layer_id;
  b.manifest["channels"] = vs.channels;
  b.manifest["kernel"] = vs.kernel;
  Tensor origins({vs.origins.size(), 3});
  for (std::size_t i = 0; i < vs.origins.size(); ++i) {
    origins[3 * i] = static_cast<double>(vs.origins[i].image);
    origins[3 * i + 1] = static_cast<double>(vs.origins[i].y);
    origins[3 * i + 2] = static_cast<double>(vs.origins[i].x);
  }
  b.tensors["volumes"] = vs.volumes;
  b.tensors["ref_outputs"] = vs.ref_outputs;
  b.tensors["origins"] = std::move(origins);
  write_bundle(dir, b, BlobType::kFloat64);
}

VolumeSet load_volume_set(const std::filesystem::path& dir) {
  TensorBundle b = read_bundle(dir);
  if (b.manifest.value("kind", "") != "volume-set") throw FormatError(dir.string() + ": not a volume set");
  VolumeSet vs;
  vs.layer_id = b.manifest.at("layer_id").get<std::string>();
  vs.channels = b.manifest.at("channels").get<std::size_t>();
  vs.kernel = b.manifest.at("kernel").get<std::size_t>();
  vs.volumes = std::move(b.tensors.at("volumes"));
  vs.ref_outputs = std::move(b.tensors.at("ref_outputs"));
  const Tensor& o = b.tensors.at("origins");
  for (std::size_t i = 0; i < o.dim(0); ++i) {
    vs.origins.push_back({static_cast<std::size_t>(o[3 * i]), static_cast<std::size_t>(o[3 * i + 1]),
                          static_cast<std::size_t>(o[3 * i + 2])});
  }
  if (vs.volumes.dim(1) != vs.dim()) throw FormatError(dir.string() + ": volume width mismatch");
  return vs;
}

}  // namespace chprune
