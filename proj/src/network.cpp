#include "chprune/network.hpp"

#include <array>
#include <cmath>
#include <utility>

#include "chprune/errors.hpp"

namespace chprune {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 9> kKindNames{{
    {LayerKind::kConv2d, "conv2d"},
    {LayerKind::kBatchNorm, "batchnorm"},
    {LayerKind::kRelu, "relu"},
    {LayerKind::kMaxPool, "maxpool"},
    {LayerKind::kAvgPool, "avgpool"},
    {LayerKind::kGlobalAvgPool, "global-avg-pool"},
    {LayerKind::kLinear, "linear"},
    {LayerKind::kFlatten, "flatten"},
    {LayerKind::kResidualAdd, "residual-add"},
}};

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p,
                     const std::string& id) {
  if (in + 2 * p < k || s == 0) {
    throw ShapeError("layer " + id + ": window larger than padded input");
  }
  return (in + 2 * p - k) / s + 1;
}

void expect_shape(const LayerSpec& l, const std::string& r, const Shape& want) {
  if (!l.has_param(r)) {
    throw ShapeError("layer " + l.id + " is missing parameter '" + r + "'");
  }
  if (l.param(r).shape() != want) {
    throw ShapeError("layer " + l.id + " parameter '" + r + "' has shape " +
                     shape_to_string(l.param(r).shape()) + ", expected " +
                     shape_to_string(want));
  }
}

void allocate(LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::kConv2d:
      l.params[role::kWeight] = Tensor({l.out_channels, l.in_channels, l.kernel, l.kernel});
      if (l.bias) l.params[role::kBias] = Tensor({l.out_channels});
      break;
    case LayerKind::kLinear:
      l.params[role::kWeight] = Tensor({l.out_channels, l.in_channels});
      if (l.bias) l.params[role::kBias] = Tensor({l.out_channels});
      break;
    case LayerKind::kBatchNorm:
      l.params[role::kGamma] = Tensor({l.out_channels}, 1.0);
      l.params[role::kBeta] = Tensor({l.out_channels});
      l.params[role::kRunningMean] = Tensor({l.out_channels});
      l.params[role::kRunningVar] = Tensor({l.out_channels}, 1.0);
      break;
    case LayerKind::kResidualAdd:
      if (l.projection) l.params[role::kWeight] = Tensor({l.out_channels, l.in_channels, 1, 1});
      break;
    default:
      break;
  }
}

}  // namespace

LayerSpec conv_layer(std::string id, std::size_t in, std::size_t out, std::size_t k,
                     std::size_t stride, std::size_t pad, bool bias) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kConv2d;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = k;
  l.stride = stride;
  l.padding = pad;
  l.bias = bias;
  allocate(l);
  return l;
}

LayerSpec batchnorm_layer(std::string id, std::size_t c) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kBatchNorm;
  l.in_channels = c;
  l.out_channels = c;
  allocate(l);
  return l;
}

LayerSpec plain_layer(std::string id, LayerKind kind, std::size_t k, std::size_t s) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = kind;
  l.kernel = k;
  l.stride = s;
  return l;
}

LayerSpec linear_layer(std::string id, std::size_t in, std::size_t out, bool bias) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kLinear;
  l.in_channels = in;
  l.out_channels = out;
  l.bias = bias;
  allocate(l);
  return l;
}

LayerSpec residual_layer(std::string id, std::string skip_from, std::size_t in, std::size_t out,
                         std::size_t stride) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kResidualAdd;
  l.skip_from = std::move(skip_from);
  if (in != out || stride != 1) {
    l.projection = true;
    l.in_channels = in;
    l.out_channels = out;
    l.stride = stride;
    allocate(l);
  }
  return l;
}

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

bool is_learnable_role(std::string_view r) {
  return r == role::kWeight || r == role::kBias || r == role::kGamma || r == role::kBeta;
}

const Tensor& LayerSpec::param(const std::string& r) const {
  auto it = params.find(r);
  if (it == params.end()) throw ShapeError("layer " + id + " has no parameter '" + r + "'");
  return it->second;
}

Tensor& LayerSpec::param(const std::string& r) {
  auto it = params.find(r);
  if (it == params.end()) throw ShapeError("layer " + id + " has no parameter '" + r + "'");
  return it->second;
}

std::size_t Network::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].id == id) return i;
  }
  throw ShapeError("no layer with id '" + std::string(id) + "'");
}

bool Network::contains(std::string_view id) const {
  for (const auto& l : layers) {
    if (l.id == id) return true;
  }
  return false;
}

std::vector<Shape> Network::output_shapes() const { return output_shapes_for(input_shape); }

std::vector<Shape> Network::output_shapes_for(const Shape& input) const {
  if (input.size() != 3) {
    throw ShapeError("network input shape must be C x H x W, got " + shape_to_string(input));
  }
  std::vector<Shape> out;
  out.reserve(layers.size());
  Shape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    auto need_spatial = [&] {
      if (cur.size() != 3) throw ShapeError("layer " + l.id + " needs a C x H x W input");
    };
    switch (l.kind) {
      case LayerKind::kConv2d:
        need_spatial();
        if (cur[0] != l.in_channels) {
          throw ShapeError("layer " + l.id + " expects " + std::to_string(l.in_channels) +
                           " input channels, producer gives " + std::to_string(cur[0]));
        }
        cur = {l.out_channels, conv_out(cur[1], l.kernel, l.stride, l.padding, l.id),
               conv_out(cur[2], l.kernel, l.stride, l.padding, l.id)};
        break;
      case LayerKind::kBatchNorm:
        if (cur.empty() || cur[0] != l.out_channels) {
          throw ShapeError("layer " + l.id + " channel count mismatch");
        }
        break;
      case LayerKind::kRelu:
        break;
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool:
        need_spatial();
        cur = {cur[0], conv_out(cur[1], l.kernel, l.stride, 0, l.id),
               conv_out(cur[2], l.kernel, l.stride, 0, l.id)};
        break;
      case LayerKind::kGlobalAvgPool:
        need_spatial();
        cur = {cur[0]};
        break;
      case LayerKind::kFlatten:
        cur = {shape_numel(cur)};
        break;
      case LayerKind::kLinear:
        if (cur.size() != 1 || cur[0] != l.in_channels) {
          throw ShapeError("layer " + l.id + " expects " + std::to_string(l.in_channels) +
                           " features, got " + shape_to_string(cur));
        }
        cur = {l.out_channels};
        break;
      case LayerKind::kResidualAdd: {
        Shape skip;
        if (l.skip_from == kInputId) {
          skip = input;
        } else {
          std::size_t j = index_of(l.skip_from);
          if (j >= i) throw ShapeError("layer " + l.id + " shortcut must come from an earlier layer");
          skip = out[j];
        }
        if (l.projection) {
          if (skip.size() != 3 || skip[0] != l.in_channels || cur.size() != 3 ||
              cur[0] != l.out_channels) {
            throw ShapeError("layer " + l.id + " projection channel mismatch");
          }
          skip = {l.out_channels, conv_out(skip[1], 1, l.stride, 0, l.id),
                  conv_out(skip[2], 1, l.stride, 0, l.id)};
        }
        if (skip != cur) {
          throw ShapeError("layer " + l.id + " residual operands differ: " + shape_to_string(cur) +
                           " vs " + shape_to_string(skip));
        }
        break;
      }
    }
    out.push_back(cur);
  }
  return out;
}

Shape Network::input_shape_of(std::size_t i) const {
  if (i == 0) return input_shape;
  return output_shapes().at(i - 1);
}

std::size_t Network::num_classes() const {
  auto shapes = output_shapes();
  if (shapes.empty() || shapes.back().size() != 1) {
    throw ShapeError("network must end in a flat logits layer");
  }
  return shapes.back()[0];
}

void Network::validate() const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (std::size_t j = i + 1; j < layers.size(); ++j) {
      if (layers[i].id == layers[j].id) throw ShapeError("duplicate layer id " + layers[i].id);
    }
    if (layers[i].id == kInputId) throw ShapeError("layer id 'input' is reserved");
  }
  (void)num_classes();
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::kConv2d:
        expect_shape(l, role::kWeight, {l.out_channels, l.in_channels, l.kernel, l.kernel});
        if (l.bias) expect_shape(l, role::kBias, {l.out_channels});
        break;
      case LayerKind::kLinear:
        expect_shape(l, role::kWeight, {l.out_channels, l.in_channels});
        if (l.bias) expect_shape(l, role::kBias, {l.out_channels});
        break;
      case LayerKind::kBatchNorm:
        for (const char* r : {role::kGamma, role::kBeta, role::kRunningMean, role::kRunningVar}) {
          expect_shape(l, r, {l.out_channels});
        }
        break;
      case LayerKind::kResidualAdd:
        if (l.projection) expect_shape(l, role::kWeight, {l.out_channels, l.in_channels, 1, 1});
        break;
      default:
        break;
    }
  }
}

std::vector<std::string> Network::conv_ids() const {
  std::vector<std::string> ids;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::kConv2d) ids.push_back(l.id);
  }
  return ids;
}

void init_parameters(Network& net, Rng& rng) {
  for (auto& l : net.layers) {
    std::size_t fan_in = 0;
    if (l.kind == LayerKind::kConv2d) fan_in = l.in_channels * l.kernel * l.kernel;
    if (l.kind == LayerKind::kLinear) fan_in = l.in_channels;
    if (l.kind == LayerKind::kResidualAdd && l.projection) fan_in = l.in_channels;
    if (fan_in > 0) {
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& w : l.param(role::kWeight).values()) w = rng.normal(0.0, stddev);
      if (l.has_param(role::kBias)) l.param(role::kBias).fill(0.0);
    }
    if (l.kind == LayerKind::kBatchNorm) {
      l.param(role::kGamma).fill(1.0);
      l.param(role::kBeta).fill(0.0);
      l.param(role::kRunningMean).fill(0.0);
      l.param(role::kRunningVar).fill(1.0);
    }
  }
}

Network make_vgg16(std::size_t num_classes, Shape input) {
  static constexpr std::array<int, 18> kCfg{64, 64, -1, 128, 128, -1, 256, 256, 256,
                                            -1, 512, 512, 512, -1, 512, 512, 512, -1};
  Network net;
  net.input_shape = input;
  std::size_t c = input.at(0);
  int conv_idx = 0;
  int pool_idx = 0;
  for (int width : kCfg) {
    if (width < 0) {
      net.layers.push_back(plain_layer("pool" + std::to_string(++pool_idx), LayerKind::kMaxPool, 2, 2));
      continue;
    }
    const std::string n = std::to_string(++conv_idx);
    const auto w = static_cast<std::size_t>(width);
    net.layers.push_back(conv_layer("conv" + n, c, w, 3, 1, 1, true));
    net.layers.push_back(batchnorm_layer("bn" + n, w));
    net.layers.push_back(plain_layer("relu" + n, LayerKind::kRelu));
    c = w;
  }
  net.layers.push_back(plain_layer("gap", LayerKind::kGlobalAvgPool));
  net.layers.push_back(linear_layer("fc", c, num_classes));
  return net;
}

Network make_small_cnn(std::size_t num_classes, Shape input, std::vector<std::size_t> widths) {
  if (widths.size() != 4) throw ConfigError("small CNN needs exactly four widths");
  Network net;
  net.input_shape = input;
  std::size_t c = input.at(0);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string n = std::to_string(i + 1);
    net.layers.push_back(conv_layer("conv" + n, c, widths[i], 3, 1, 1, false));
    net.layers.push_back(batchnorm_layer("bn" + n, widths[i]));
    net.layers.push_back(plain_layer("relu" + n, LayerKind::kRelu));
    if (i == 1 || i == 2) {
      net.layers.push_back(plain_layer("pool" + n, LayerKind::kMaxPool, 2, 2));
    }
    c = widths[i];
  }
  net.layers.push_back(plain_layer("gap", LayerKind::kGlobalAvgPool));
  net.layers.push_back(linear_layer("fc", c, num_classes));
  return net;
}

Network make_bottleneck_resnet(std::size_t num_classes, Shape input,
                               std::vector<std::size_t> stage_widths,
                               std::size_t blocks_per_stage, std::size_t expansion) {
  Network net;
  net.input_shape = input;
  const std::size_t stem = stage_widths.at(0);
  net.layers.push_back(conv_layer("stem", input.at(0), stem, 3, 1, 1, false));
  net.layers.push_back(batchnorm_layer("stem_bn", stem));
  net.layers.push_back(plain_layer("stem_relu", LayerKind::kRelu));
  std::size_t c = stem;
  std::string block_input = "stem_relu";
  for (std::size_t s = 0; s < stage_widths.size(); ++s) {
    for (std::size_t b = 0; b < blocks_per_stage; ++b) {
      const std::string tag = "s" + std::to_string(s + 1) + "b" + std::to_string(b + 1);
      const std::size_t mid = stage_widths[s];
      const std::size_t out = mid * expansion;
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      auto push = [&](LayerSpec l) {
        l.block = tag;
        net.layers.push_back(std::move(l));
      };
      push(conv_layer(tag + "_conv1", c, mid, 1, 1, 0, false));
      push(batchnorm_layer(tag + "_bn1", mid));
      push(plain_layer(tag + "_relu1", LayerKind::kRelu));
      push(conv_layer(tag + "_conv2", mid, mid, 3, stride, 1, false));
      push(batchnorm_layer(tag + "_bn2", mid));
      push(plain_layer(tag + "_relu2", LayerKind::kRelu));
      push(conv_layer(tag + "_conv3", mid, out, 1, 1, 0, false));
      push(batchnorm_layer(tag + "_bn3", out));
      push(residual_layer(tag + "_add", block_input, c, out, stride));
      push(plain_layer(tag + "_relu3", LayerKind::kRelu));
      block_input = tag + "_relu3";
      c = out;
    }
  }
  net.layers.push_back(plain_layer("gap", LayerKind::kGlobalAvgPool));
  net.layers.push_back(linear_layer("fc", c, num_classes));
  return net;
}

Network make_architecture(std::string_view name, std::size_t num_classes, const Shape& input) {
  if (name == "vgg16") return make_vgg16(num_classes, input.empty() ? Shape{3, 32, 32} : input);
  if (name == "small-cnn") {
    return make_small_cnn(num_classes, input.empty() ? Shape{1, 16, 16} : input);
  }
  if (name == "bottleneck-resnet") {
    return make_bottleneck_resnet(num_classes, input.empty() ? Shape{3, 16, 16} : input);
  }
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

}  // namespace chprune
