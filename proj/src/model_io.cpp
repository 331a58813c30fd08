#include "chprune/model_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "chprune/errors.hpp"

namespace chprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

void write_blob(const fs::path& path, const Tensor& t, BlobType type) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  if (type == BlobType::kFloat32) {
    std::vector<float> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = to_little(static_cast<float>(t[i]));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  } else {
    std::vector<double> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = to_little(t[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(double)));
  }
}

Tensor read_blob(const fs::path& path, const Shape& shape, BlobType type) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const std::size_t n = shape_numel(shape);
  const std::size_t width = type == BlobType::kFloat32 ? sizeof(float) : sizeof(double);
  if (bytes.size() != n * width) {
    throw FormatError(path.string() + ": expected " + std::to_string(n * width) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  Tensor t(shape);
  for (std::size_t i = 0; i < n; ++i) {
    if (type == BlobType::kFloat32) {
      float f;
      std::memcpy(&f, bytes.data() + i * width, width);
      t[i] = static_cast<double>(to_little(f));
    } else {
      double d;
      std::memcpy(&d, bytes.data() + i * width, width);
      t[i] = to_little(d);
    }
  }
  return t;
}

std::string dtype_name(BlobType t) { return t == BlobType::kFloat32 ? "float32" : "float64"; }

BlobType dtype_from(const json& manifest) {
  const std::string d = manifest.value("dtype", "float32");
  if (d == "float32") return BlobType::kFloat32;
  if (d == "float64") return BlobType::kFloat64;
  throw FormatError("unsupported dtype '" + d + "'");
}

json read_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.json";
  try {
    return json::parse(read_text_file(p));
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void check_version(const json& manifest, const fs::path& dir) {
  if (manifest.value("format_version", 0) != kFormatVersion) {
    throw FormatError(dir.string() + ": unsupported format_version");
  }
}

}  // namespace

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bundle(const fs::path& dir, const TensorBundle& bundle, BlobType type) {
  fs::create_directories(dir);
  json manifest = bundle.manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["dtype"] = dtype_name(type);
  json entries = json::object();
  for (const auto& [name, t] : bundle.tensors) {
    const std::string file = name + ".bin";
    write_blob(dir / file, t, type);
    entries[name] = {{"file", file}, {"shape", t.shape()}};
  }
  manifest["tensors"] = std::move(entries);
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

TensorBundle read_bundle(const fs::path& dir) {
  TensorBundle b;
  b.manifest = read_manifest(dir);
  check_version(b.manifest, dir);
  const BlobType type = dtype_from(b.manifest);
  for (const auto& [name, entry] : b.manifest.at("tensors").items()) {
    b.tensors[name] = read_blob(dir / entry.at("file").get<std::string>(),
                                entry.at("shape").get<Shape>(), type);
  }
  return b;
}

json network_to_json(const Network& net) {
  json layers = json::array();
  for (const auto& l : net.layers) {
    json j = {{"id", l.id}, {"kind", std::string(to_string(l.kind))}};
    switch (l.kind) {
      case LayerKind::kConv2d:
        j["in_channels"] = l.in_channels;
        j["out_channels"] = l.out_channels;
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        j["padding"] = l.padding;
        j["bias"] = l.bias;
        break;
      case LayerKind::kLinear:
        j["in_features"] = l.in_channels;
        j["out_features"] = l.out_channels;
        j["bias"] = l.bias;
        break;
      case LayerKind::kBatchNorm:
        j["channels"] = l.out_channels;
        j["eps"] = l.eps;
        j["momentum"] = l.momentum;
        break;
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool:
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        break;
      case LayerKind::kResidualAdd:
        j["skip_from"] = l.skip_from;
        j["projection"] = l.projection;
        if (l.projection) {
          j["in_channels"] = l.in_channels;
          j["out_channels"] = l.out_channels;
          j["stride"] = l.stride;
        }
        break;
      default:
        break;
    }
    if (!l.block.empty()) j["block"] = l.block;
    layers.push_back(std::move(j));
  }
  return {{"input_shape", net.input_shape}, {"layers", std::move(layers)}};
}

void save_model(const Network& net, const fs::path& dir) {
  net.validate();
  fs::create_directories(dir);
  json manifest = network_to_json(net);
  manifest["format"] = "chprune-model";
  manifest["format_version"] = kFormatVersion;
  manifest["dtype"] = "float32";
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    json params = json::object();
    for (const auto& [r, t] : l.params) {
      const std::string file = l.id + "." + r + ".bin";
      write_blob(dir / file, t, BlobType::kFloat32);
      params[r] = {{"file", file}, {"shape", t.shape()}};
    }
    if (!params.empty()) manifest["layers"][i]["params"] = std::move(params);
  }
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Network load_model(const fs::path& dir) {
  const json m = read_manifest(dir);
  check_version(m, dir);
  if (m.value("format", "") != "chprune-model") throw FormatError(dir.string() + ": not a model container");
  const BlobType type = dtype_from(m);
  Network net;
  try {
    net.input_shape = m.at("input_shape").get<Shape>();
    for (const auto& j : m.at("layers")) {
      LayerSpec l;
      l.id = j.at("id").get<std::string>();
      l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
      switch (l.kind) {
        case LayerKind::kConv2d:
          l.in_channels = j.at("in_channels");
          l.out_channels = j.at("out_channels");
          l.kernel = j.at("kernel");
          l.stride = j.at("stride");
          l.padding = j.at("padding");
          l.bias = j.at("bias");
          break;
        case LayerKind::kLinear:
          l.in_channels = j.at("in_features");
          l.out_channels = j.at("out_features");
          l.bias = j.at("bias");
          break;
        case LayerKind::kBatchNorm:
          l.in_channels = l.out_channels = j.at("channels");
          l.eps = j.at("eps");
          l.momentum = j.at("momentum");
          break;
        case LayerKind::kMaxPool:
        case LayerKind::kAvgPool:
          l.kernel = j.at("kernel");
          l.stride = j.at("stride");
          break;
        case LayerKind::kResidualAdd:
          l.skip_from = j.at("skip_from");
          l.projection = j.at("projection");
          if (l.projection) {
            l.in_channels = j.at("in_channels");
            l.out_channels = j.at("out_channels");
            l.stride = j.at("stride");
          }
          break;
        default:
          break;
      }
      l.block = j.value("block", "");
      if (j.contains("params")) {
        for (const auto& [r, entry] : j.at("params").items()) {
          l.params[r] = read_blob(dir / entry.at("file").get<std::string>(),
                                  entry.at("shape").get<Shape>(), type);
        }
      }
      net.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  net.validate();
  return net;
}

}  // namespace chprune
