#include "chprune/fitness.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "chprune/errors.hpp"
#include "chprune/model_io.hpp"

namespace chprune {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

std::size_t filter_count(const Tensor& weight, std::size_t d, const char* what) {
  if (weight.rank() < 2 || weight.dim(0) == 0 || weight.size() != weight.dim(0) * d) {
    throw ShapeError(std::string(what) + ": weight " + shape_to_string(weight.shape()) +
                     " does not match input width " + std::to_string(d));
  }
  return weight.dim(0);
}

void check_mask(const Chromosome& mask, std::size_t channels, const char* what) {
  if (mask.size() != channels) {
    throw ShapeError(std::string(what) + ": mask length " + std::to_string(mask.size()) +
                     " != channel count " + std::to_string(channels));
  }
}

}  // namespace

HessianCache compute_hessian(const VolumeSet& vs) {
  const std::size_t N = vs.size();
  const std::size_t D = vs.dim();
  if (N == 0) throw ShapeError("cannot build a Hessian from zero volumes");
  if (vs.volumes.rank() != 2 || vs.volumes.dim(1) != D) {
    throw ShapeError("volumes " + shape_to_string(vs.volumes.shape()) + " do not match layer " +
                     vs.layer_id + " width " + std::to_string(D));
  }
  ConstMap X(vs.volumes.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  RowMat H = RowMat::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
  H.selfadjointView<Eigen::Upper>().rankUpdate(X.transpose(), 1.0 / static_cast<double>(N));

  HessianCache h;
  h.layer_id = vs.layer_id;
  h.channels = vs.channels;
  h.kernel = vs.kernel;
  h.samples = N;
  h.matrix = Tensor({D, D});
  for (std::size_t i = 0; i < D; ++i) {
    for (std::size_t j = i; j < D; ++j) {
      const double v = H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      h.matrix[i * D + j] = v;
      h.matrix[j * D + i] = v;
    }
  }
  return h;
}

double taylor_error(const HessianCache& h, const Tensor& weight, const Chromosome& mask) {
  const std::size_t D = h.dim();
  if (h.matrix.size() != D * D) throw ShapeError("Hessian matrix does not match its declared layer");
  const std::size_t F = filter_count(weight, D, "taylor_error");
  check_mask(mask, h.channels, "taylor_error");

  const std::size_t kk = h.kernel * h.kernel;
  std::vector<std::size_t> pos;
  for (std::size_t c : mask.pruned()) {
    for (std::size_t k = 0; k < kk; ++k) pos.push_back(c * kk + k);
  }
  double total = 0.0;
  for (std::size_t f = 0; f < F; ++f) {
    const double* w = weight.data() + f * D;
    double q = 0.0;
    for (std::size_t a : pos) {
      double row = 0.0;
      for (std::size_t b : pos) row += h.matrix[a * D + b] * w[b];
      q += w[a] * row;
    }
    total += 0.5 * q;
  }
  return total;
}

double direct_error(const VolumeSet& vs, const Tensor& weight, const Tensor* bias,
                    const Chromosome& mask) {
  const std::size_t N = vs.size();
  const std::size_t D = vs.dim();
  if (N == 0) throw ShapeError("direct_error needs at least one volume");
  const std::size_t F = filter_count(weight, D, "direct_error");
  check_mask(mask, vs.channels, "direct_error");
  if (vs.ref_outputs.rank() != 2 || vs.ref_outputs.dim(0) != N || vs.ref_outputs.dim(1) != F) {
    throw ShapeError("reference outputs do not match the weight's filter count");
  }
  if (bias && bias->size() != F) throw ShapeError("bias length does not match filter count");

  const std::size_t kk = vs.kernel * vs.kernel;
  RowMat Wm = ConstMap(weight.data(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(D));
  for (std::size_t c : mask.pruned()) {
    Wm.middleCols(static_cast<Eigen::Index>(c * kk), static_cast<Eigen::Index>(kk)).setZero();
  }
  ConstMap X(vs.volumes.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  ConstMap Y(vs.ref_outputs.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(F));
  RowMat pruned_out = X * Wm.transpose();
  if (bias) {
    for (std::size_t f = 0; f < F; ++f) pruned_out.col(static_cast<Eigen::Index>(f)).array() += (*bias)[f];
  }
  return (pruned_out - Y).squaredNorm() / static_cast<double>(N);
}

std::vector<double> population_fitness(std::span<const double> errors) {
  if (errors.empty()) throw ConfigError("population_fitness needs at least one error value");
  for (double e : errors) {
    if (!std::isfinite(e)) throw NumericError("non-finite layer error in population");
  }
  const auto [lo, hi] = std::minmax_element(errors.begin(), errors.end());
  const double emin = *lo, emax = *hi;
  std::vector<double> fit(errors.size(), 1.0);
  if (emax == emin) return fit;
  const double floor = 0.01 * (emax - emin);
  for (std::size_t i = 0; i < errors.size(); ++i) fit[i] = (emax - errors[i]) + floor;
  return fit;
}

TaylorEvaluator::TaylorEvaluator(const HessianCache& h, const Tensor& weight)
    : channels_(h.channels) {
  const std::size_t D = h.dim();
  if (h.matrix.size() != D * D) throw ShapeError("Hessian matrix does not match its declared layer");
  const std::size_t F = filter_count(weight, D, "TaylorEvaluator");
  ConstMap W(weight.data(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(D));
  ConstMap H(h.matrix.data(), static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
  const RowMat G = W.transpose() * W;
  const std::size_t kk = h.kernel * h.kernel;
  const std::size_t C = channels_;
  interaction_ = Tensor({C, C});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t c2 = c; c2 < C; ++c2) {
      double s = 0.0;
      for (std::size_t a = c * kk; a < (c + 1) * kk; ++a) {
        for (std::size_t b = c2 * kk; b < (c2 + 1) * kk; ++b) {
          s += H(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) *
               G(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        }
      }
      interaction_[c * C + c2] = s;
      interaction_[c2 * C + c] = s;
    }
  }
}

double TaylorEvaluator::operator()(const Chromosome& mask) const {
  check_mask(mask, channels_, "TaylorEvaluator");
  const std::vector<std::size_t> p = mask.pruned();
  double total = 0.0;
  for (std::size_t a : p) {
    for (std::size_t b : p) total += interaction_[a * channels_ + b];
  }
  return 0.5 * total;
}

void save_hessian(const HessianCache& h, const std::filesystem::path& dir) {
  TensorBundle b;
  b.manifest["kind"] = "hessian";
  b.manifest["layer_id"] = h.layer_id;
  b.manifest["channels"] = h.channels;
  b.manifest["kernel"] = h.kernel;
  b.manifest["samples"] = h.samples;
  b.tensors["matrix"] = h.matrix;
  write_bundle(dir, b, BlobType::kFloat64);
}

HessianCache load_hessian(const std::filesystem::path& dir) {
  TensorBundle b = read_bundle(dir);
  if (b.manifest.value("kind", "") != "hessian") throw FormatError(dir.string() + ": not a Hessian");
  HessianCache h;
  h.layer_id = b.manifest.at("layer_id").get<std::string>();
  h.channels = b.manifest.at("channels").get<std::size_t>();
  h.kernel = b.manifest.at("kernel").get<std::size_t>();
  h.samples = b.manifest.at("samples").get<std::size_t>();
  h.matrix = std::move(b.tensors.at("matrix"));
  if (h.matrix.size() != h.dim() * h.dim()) throw FormatError(dir.string() + ": Hessian size mismatch");
  return h;
}

}  // namespace chprune
