#include "chprune/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "chprune/errors.hpp"

namespace chprune {

namespace {

constexpr std::uint32_t kIdxUbyte3 = 0x00000803;
constexpr std::uint32_t kIdxUbyte4 = 0x00000804;
constexpr std::uint32_t kIdxUbyte1 = 0x00000801;
constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw FormatError(path.string() + ": truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

Tensor to_unit_tensor(const RawImages& raw) {
  Tensor t({raw.count, raw.channels, raw.height, raw.width});
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) t[i] = raw.pixels[i] / 255.0;
  return t;
}

RawImages truncate(RawImages raw, std::size_t limit) {
  if (limit == 0 || limit >= raw.count) return raw;
  raw.count = limit;
  raw.pixels.resize(limit * raw.channels * raw.height * raw.width);
  raw.labels.resize(limit);
  return raw;
}

}  // namespace

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t row = images.size() / images.dim(0);
  Shape s = images.shape();
  s[0] = indices.size();
  Tensor out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(images.data() + indices[i] * row, row, out.data() + i * row);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.images = gather(indices);
  d.labels = gather_labels(indices);
  d.num_classes = num_classes;
  d.split = split;
  d.normalization = normalization;
  return d;
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return subset(idx);
}

void Dataset::validate() const {
  if (labels.empty()) throw ShapeError("dataset is empty");
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw ShapeError("dataset images " + shape_to_string(images.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw FormatError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
  }
  require_finite(images, "dataset images");
}

Normalization compute_normalization(const Tensor& raw) {
  const std::size_t N = raw.dim(0), C = raw.dim(1), S = raw.dim(2) * raw.dim(3);
  Normalization norm;
  norm.mean.assign(C, 0.0);
  norm.std.assign(C, 0.0);
  const double count = static_cast<double>(N * S);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* p = raw.data() + (n * C + c) * S;
      for (std::size_t q = 0; q < S; ++q) s += p[q];
    }
    const double mean = s / count;
    double ss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* p = raw.data() + (n * C + c) * S;
      for (std::size_t q = 0; q < S; ++q) ss += (p[q] - mean) * (p[q] - mean);
    }
    norm.mean[c] = mean;
    norm.std[c] = std::max(std::sqrt(ss / count), 1e-6);
  }
  return norm;
}

void normalize_in_place(Tensor& images, const Normalization& norm) {
  const std::size_t C = images.dim(1), S = images.dim(2) * images.dim(3);
  if (norm.mean.size() != C || norm.std.size() != C) {
    throw ShapeError("normalization has wrong channel count");
  }
  for (std::size_t n = 0; n < images.dim(0); ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      double* p = images.data() + (n * C + c) * S;
      for (std::size_t q = 0; q < S; ++q) p[q] = (p[q] - norm.mean[c]) / norm.std[c];
    }
  }
}

void denormalize_in_place(Tensor& images, const Normalization& norm) {
  const std::size_t C = images.dim(1), S = images.dim(2) * images.dim(3);
  if (norm.mean.size() != C || norm.std.size() != C) {
    throw ShapeError("normalization has wrong channel count");
  }
  for (std::size_t n = 0; n < images.dim(0); ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      double* p = images.data() + (n * C + c) * S;
      for (std::size_t q = 0; q < S; ++q) p[q] = p[q] * norm.std[c] + norm.mean[c];
    }
  }
}

DataFormat data_format_from_string(const std::string& name) {
  if (name == "idx") return DataFormat::kIdx;
  if (name == "cifar-binary") return DataFormat::kCifarBinary;
  if (name == "synthetic") return DataFormat::kSynthetic;
  if (name == "digits") return DataFormat::kDigits;
  throw ConfigError("unknown dataset format '" + name + "'");
}

std::string to_string(DataFormat f) {
  switch (f) {
    case DataFormat::kIdx:
      return "idx";
    case DataFormat::kCifarBinary:
      return "cifar-binary";
    case DataFormat::kSynthetic:
      return "synthetic";
    case DataFormat::kDigits:
      return "digits";
  }
  return "unknown";
}

RawImages read_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  RawImages raw;
  const std::uint32_t magic = read_be32(ib, 0, images);
  std::size_t header = 0;
  if (magic == kIdxUbyte3) {
    raw.count = read_be32(ib, 4, images);
    raw.height = read_be32(ib, 8, images);
    raw.width = read_be32(ib, 12, images);
    header = 16;
  } else if (magic == kIdxUbyte4) {
    raw.count = read_be32(ib, 4, images);
    raw.channels = read_be32(ib, 8, images);
    raw.height = read_be32(ib, 12, images);
    raw.width = read_be32(ib, 16, images);
    header = 20;
  } else {
    throw FormatError(images.string() + ": bad IDX image magic");
  }
  const std::size_t payload = raw.count * raw.channels * raw.height * raw.width;
  if (ib.size() != header + payload) {
    throw FormatError(images.string() + ": payload length " + std::to_string(ib.size() - header) +
                      " does not match header (" + std::to_string(payload) + ")");
  }
  if (read_be32(lb, 0, labels) != kIdxUbyte1) {
    throw FormatError(labels.string() + ": bad IDX label magic");
  }
  const std::size_t nlabels = read_be32(lb, 4, labels);
  if (nlabels != raw.count) {
    throw FormatError(labels.string() + ": label count does not match image count");
  }
  if (lb.size() != 8 + nlabels) throw FormatError(labels.string() + ": truncated label payload");
  raw.pixels.assign(ib.begin() + static_cast<std::ptrdiff_t>(header), ib.end());
  raw.labels.assign(lb.begin() + 8, lb.end());
  return raw;
}

void write_idx(const RawImages& raw, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  std::ofstream oi(images, std::ios::binary);
  if (!oi) throw FormatError("cannot write " + images.string());
  if (raw.channels == 1) {
    write_be32(oi, kIdxUbyte3);
    write_be32(oi, static_cast<std::uint32_t>(raw.count));
  } else {
    write_be32(oi, kIdxUbyte4);
    write_be32(oi, static_cast<std::uint32_t>(raw.count));
    write_be32(oi, static_cast<std::uint32_t>(raw.channels));
  }
  write_be32(oi, static_cast<std::uint32_t>(raw.height));
  write_be32(oi, static_cast<std::uint32_t>(raw.width));
  oi.write(reinterpret_cast<const char*>(raw.pixels.data()),
           static_cast<std::streamsize>(raw.pixels.size()));
  std::ofstream ol(labels, std::ios::binary);
  if (!ol) throw FormatError("cannot write " + labels.string());
  write_be32(ol, kIdxUbyte1);
  write_be32(ol, static_cast<std::uint32_t>(raw.count));
  ol.write(reinterpret_cast<const char*>(raw.labels.data()),
           static_cast<std::streamsize>(raw.labels.size()));
}

RawImages read_cifar_binary(const std::vector<std::filesystem::path>& files) {
  if (files.empty()) throw ConfigError("no CIFAR batch files given");
  RawImages raw;
  raw.channels = 3;
  raw.height = 32;
  raw.width = 32;
  for (const auto& f : files) {
    const auto bytes = read_file(f);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
      throw FormatError(f.string() + ": size " + std::to_string(bytes.size()) +
                        " is not a multiple of the 3073-byte CIFAR record");
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    for (std::size_t r = 0; r < n; ++r) {
      const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
      if (rec[0] > 9) throw FormatError(f.string() + ": label byte out of range");
      raw.labels.push_back(rec[0]);
      raw.pixels.insert(raw.pixels.end(), rec + 1, rec + kCifarRecord);
    }
    raw.count += n;
  }
  return raw;
}

void write_cifar_binary(const RawImages& raw, const std::filesystem::path& file) {
  if (raw.channels != 3 || raw.height != 32 || raw.width != 32) {
    throw ShapeError("CIFAR records must be 3x32x32");
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) throw FormatError("cannot write " + file.string());
  const std::size_t per = 3 * 32 * 32;
  for (std::size_t i = 0; i < raw.count; ++i) {
    out.put(static_cast<char>(raw.labels[i]));
    out.write(reinterpret_cast<const char*>(raw.pixels.data() + i * per),
              static_cast<std::streamsize>(per));
  }
}

RawImages generate_synthetic(const SyntheticSpec& spec) {
  if (spec.size == 0 || spec.classes == 0 || spec.classes > 256) {
    throw ConfigError("synthetic dataset needs size > 0 and 1..256 classes");
  }
  Rng proto_rng(spec.seed);
  const std::size_t per = spec.channels * spec.height * spec.width;
  std::vector<std::vector<double>> prototypes(spec.classes, std::vector<double>(per));
  for (auto& p : prototypes) {
    for (double& v : p) v = proto_rng.uniform();
  }
  Rng sample_rng(spec.seed * 0x2545F4914F6CDD1DULL + 1 + spec.stream * 0x9E3779B97F4A7C15ULL);
  RawImages raw;
  raw.count = spec.size;
  raw.channels = spec.channels;
  raw.height = spec.height;
  raw.width = spec.width;
  raw.pixels.resize(spec.size * per);
  raw.labels.resize(spec.size);
  for (std::size_t i = 0; i < spec.size; ++i) {
    const std::size_t label = i % spec.classes;
    raw.labels[i] = static_cast<std::uint8_t>(label);
    for (std::size_t q = 0; q < per; ++q) {
      const double v = std::clamp(prototypes[label][q] + sample_rng.normal(0.0, spec.noise), 0.0, 1.0);
      raw.pixels[i * per + q] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return raw;
}

Dataset load_dataset(const DatasetSource& source, const std::string& split,
                     const Normalization* norm) {
  if (split != "train" && split != "test") throw ConfigError("split must be train or test");
  RawImages raw;
  std::size_t classes = 10;
  switch (source.format) {
    case DataFormat::kIdx:
      raw = read_idx(source.images, source.labels);
      break;
    case DataFormat::kCifarBinary:
      raw = read_cifar_binary(source.files);
      break;
    case DataFormat::kSynthetic: {
      SyntheticSpec spec = source.synthetic;
      spec.stream = split == "test" ? 1 : 0;
      raw = generate_synthetic(spec);
      classes = spec.classes;
      break;
    }
    case DataFormat::kDigits: {
      DigitsSpec spec = source.digits;
      spec.stream = split == "test" ? 1 : 0;
      raw = generate_digits(spec);
      break;
    }
  }
  raw = truncate(std::move(raw), source.limit);
  if (raw.count == 0) throw FormatError("dataset contains no samples");
  Dataset d;
  d.split = split;
  d.num_classes = classes;
  d.images = to_unit_tensor(raw);
  d.labels.assign(raw.labels.begin(), raw.labels.end());
  d.normalization = norm ? *norm : compute_normalization(d.images);
  normalize_in_place(d.images, d.normalization);
  d.validate();
  return d;
}

void AugmentPolicy::validate() const {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) {
    throw ConfigError("flip probability must lie in [0, 1]");
  }
}

Tensor augment(const Tensor& batch, const AugmentPolicy& policy, Rng& rng) {
  policy.validate();
  if (!policy.enabled) return batch;
  const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  Tensor out(batch.shape());
  const auto pad = static_cast<std::ptrdiff_t>(policy.pad);
  for (std::size_t n = 0; n < N; ++n) {
    std::ptrdiff_t dy = 0, dx = 0;
    if (policy.pad > 0) {
      dy = static_cast<std::ptrdiff_t>(rng.below(2 * policy.pad + 1)) - pad;
      dx = static_cast<std::ptrdiff_t>(rng.below(2 * policy.pad + 1)) - pad;
    }
    const bool flip = policy.flip_prob > 0.0 && rng.bernoulli(policy.flip_prob);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t xs = flip ? W - 1 - x : x;
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xs) + dx;
          double v = 0.0;
          if (sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(H) &&
              sx < static_cast<std::ptrdiff_t>(W)) {
            v = batch.at(n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
          }
          out.at(n, c, y, x) = v;
        }
      }
    }
  }
  return out;
}

}  // namespace chprune
