#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "chprune/rng.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

enum class LayerKind {
  kConv2d,
  kBatchNorm,
  kRelu,
  kMaxPool,
  kAvgPool,
  kGlobalAvgPool,
  kLinear,
  kFlatten,
  kResidualAdd,
};

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

// Parameter roles stored per layer.
namespace role {
inline constexpr const char* kWeight = "weight";
inline constexpr const char* kBias = "bias";
inline constexpr const char* kGamma = "gamma";
inline constexpr const char* kBeta = "beta";
inline constexpr const char* kRunningMean = "running_mean";
inline constexpr const char* kRunningVar = "running_var";
}  // namespace role

bool is_learnable_role(std::string_view r);

// One node of the sequential graph. Fields that do not apply to `kind` are
// ignored. Linear layers reuse in_channels/out_channels as feature counts; the
// residual add reads its shortcut from `skip_from` (a layer id, or "input")
// and optionally applies a bias-free 1x1 projection with `stride`.
struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::kRelu;

  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;

  double eps = 1e-5;
  double momentum = 0.1;

  std::string skip_from;
  bool projection = false;

  // Residual block this layer belongs to, empty for plain layers.
  std::string block;

  std::map<std::string, Tensor> params;

  const Tensor& param(const std::string& r) const;
  Tensor& param(const std::string& r);
  bool has_param(const std::string& r) const { return params.contains(r); }
};

inline constexpr std::string_view kInputId = "input";

struct Network {
  Shape input_shape;  // C x H x W of one sample
  std::vector<LayerSpec> layers;

  std::size_t index_of(std::string_view id) const;
  bool contains(std::string_view id) const;

  // Per-sample output shape of every layer; throws ShapeError on any
  // inconsistency along the graph.
  std::vector<Shape> output_shapes() const;
  std::vector<Shape> output_shapes_for(const Shape& input) const;
  // Per-sample input shape seen by layer i.
  Shape input_shape_of(std::size_t i) const;

  std::size_t num_classes() const;

  // Structural and parameter-shape validation.
  void validate() const;

  // Ids of every conv layer, in forward order.
  std::vector<std::string> conv_ids() const;
};

// Layer factories with zero-initialised parameters of the right shapes.
LayerSpec conv_layer(std::string id, std::size_t in, std::size_t out, std::size_t kernel,
                     std::size_t stride = 1, std::size_t padding = 0, bool bias = true);
LayerSpec batchnorm_layer(std::string id, std::size_t channels);
// Parameter-free kinds; kernel and stride apply to pooling only.
LayerSpec plain_layer(std::string id, LayerKind kind, std::size_t kernel = 1, std::size_t stride = 1);
LayerSpec linear_layer(std::string id, std::size_t in, std::size_t out, bool bias = true);
// Adds the output of `skip_from`; a 1x1 projection is created when the
// channel count or stride changes.
LayerSpec residual_layer(std::string id, std::string skip_from, std::size_t in, std::size_t out,
                         std::size_t stride = 1);

// He-normal conv/linear weights, zero biases, unit BN scale.
void init_parameters(Network& net, Rng& rng);

// VGG-16 with batch norm; the FC stack is replaced by global average pooling
// and a single linear classifier.
Network make_vgg16(std::size_t num_classes = 10, Shape input = {3, 32, 32});

// Four conv blocks: conv-bn-relu x2, pool, conv-bn-relu, pool, conv-bn-relu,
// global pooling, linear head.
Network make_small_cnn(std::size_t num_classes = 10, Shape input = {1, 16, 16},
                       std::vector<std::size_t> widths = {16, 32, 32, 32});

// Compact bottleneck ResNet: stem conv plus `blocks_per_stage` bottleneck
// blocks per stage, 1x1 projection shortcuts where shapes change.
Network make_bottleneck_resnet(std::size_t num_classes = 10, Shape input = {3, 16, 16},
                               std::vector<std::size_t> stage_widths = {8, 16},
                               std::size_t blocks_per_stage = 1, std::size_t expansion = 4);

Network make_architecture(std::string_view name, std::size_t num_classes, const Shape& input);

}  // namespace chprune
