#include "chprune/engine.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "chprune/errors.hpp"

namespace chprune {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvGeom {
  std::size_t batch, channels, height, width;
  std::size_t filters, kernel, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

ConvGeom conv_geom(const Tensor& x, std::size_t filters, std::size_t k, std::size_t s,
                   std::size_t p) {
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), filters, k, s, p, 0, 0};
  g.out_h = (g.height + 2 * p - k) / s + 1;
  g.out_w = (g.width + 2 * p - k) / s + 1;
  return g;
}

// Rows index (c, ky, kx); columns index (b, oy, ox).
Tensor im2col(const Tensor& x, const ConvGeom& g) {
  const std::size_t cols_per_image = g.positions();
  Tensor cols({g.patch(), g.batch * cols_per_image});
  double* out = cols.data();
  const std::size_t ncols = g.batch * cols_per_image;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = out + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* plane = x.data() + (b * g.channels + c) * g.height * g.width;
          double* dst = row + b * cols_per_image;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.padding);
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.padding);
              const bool inside = iy >= 0 && ix >= 0 &&
                                  iy < static_cast<std::ptrdiff_t>(g.height) &&
                                  ix < static_cast<std::ptrdiff_t>(g.width);
              dst[oy * g.out_w + ox] =
                  inside ? plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)]
                         : 0.0;
            }
          }
        }
      }
    }
  }
  return cols;
}

void col2im(const Tensor& dcols, const ConvGeom& g, Tensor& dx) {
  const std::size_t cols_per_image = g.positions();
  const std::size_t ncols = g.batch * cols_per_image;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = dcols.data() + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* plane = dx.data() + (b * g.channels + c) * g.height * g.width;
          const double* src = row + b * cols_per_image;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] +=
                  src[oy * g.out_w + ox];
            }
          }
        }
      }
    }
  }
}

Tensor conv_forward(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t k,
                    std::size_t s, std::size_t p, Tensor* cols_out) {
  const ConvGeom g = conv_geom(x, weight.dim(0), k, s, p);
  Tensor cols = im2col(x, g);
  const std::size_t ncols = g.batch * g.positions();
  RowMat prod = ConstMatMap(weight.data(), static_cast<Eigen::Index>(g.filters),
                            static_cast<Eigen::Index>(g.patch())) *
                ConstMatMap(cols.data(), static_cast<Eigen::Index>(g.patch()),
                            static_cast<Eigen::Index>(ncols));
  Tensor y({g.batch, g.filters, g.out_h, g.out_w});
  const std::size_t hw = g.positions();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      const double shift = bias ? (*bias)[f] : 0.0;
      const double* src = prod.data() + f * ncols + b * hw;
      double* dst = y.data() + (b * g.filters + f) * hw;
      for (std::size_t q = 0; q < hw; ++q) dst[q] = src[q] + shift;
    }
  }
  if (cols_out) *cols_out = std::move(cols);
  return y;
}

// dW and db are written (not accumulated); dx is accumulated when requested.
void conv_backward(const Tensor& dy, const Tensor& x_shape_ref, const Tensor& cols,
                   const Tensor& weight, std::size_t k, std::size_t s, std::size_t p,
                   Tensor* dweight, Tensor* dbias, Tensor* dx) {
  const ConvGeom g = conv_geom(x_shape_ref, weight.dim(0), k, s, p);
  const std::size_t hw = g.positions();
  const std::size_t ncols = g.batch * hw;
  RowMat dmat(static_cast<Eigen::Index>(g.filters), static_cast<Eigen::Index>(ncols));
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      const double* src = dy.data() + (b * g.filters + f) * hw;
      double* dst = dmat.data() + f * ncols + b * hw;
      std::copy(src, src + hw, dst);
    }
  }
  ConstMatMap cmat(cols.data(), static_cast<Eigen::Index>(g.patch()),
                   static_cast<Eigen::Index>(ncols));
  if (dweight) {
    *dweight = Tensor(weight.shape());
    MatMap(dweight->data(), static_cast<Eigen::Index>(g.filters),
           static_cast<Eigen::Index>(g.patch())) = dmat * cmat.transpose();
  }
  if (dbias) {
    *dbias = Tensor({g.filters});
    for (std::size_t f = 0; f < g.filters; ++f) {
      (*dbias)[f] = dmat.row(static_cast<Eigen::Index>(f)).sum();
    }
  }
  if (dx) {
    Tensor dcols({g.patch(), ncols});
    MatMap(dcols.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(ncols)) =
        ConstMatMap(weight.data(), static_cast<Eigen::Index>(g.filters),
                    static_cast<Eigen::Index>(g.patch()))
            .transpose() *
        dmat;
    col2im(dcols, g, *dx);
  }
}

// Views an activation as batch x channels x spatial.
struct ChannelView {
  std::size_t batch, channels, spatial;
};

ChannelView channel_view(const Tensor& x) {
  ChannelView v{x.dim(0), x.dim(1), 1};
  for (std::size_t a = 2; a < x.rank(); ++a) v.spatial *= x.dim(a);
  return v;
}

Tensor batchnorm_forward(const LayerSpec& l, const Tensor& x, Mode mode, LayerCache* cache) {
  const ChannelView v = channel_view(x);
  const Tensor& gamma = l.param(role::kGamma);
  const Tensor& beta = l.param(role::kBeta);
  std::vector<double> mean(v.channels), var(v.channels), inv_std(v.channels);
  const double m = static_cast<double>(v.batch * v.spatial);
  if (mode == Mode::kTrain) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < v.batch; ++b) {
        const double* p = x.data() + (b * v.channels + c) * v.spatial;
        for (std::size_t q = 0; q < v.spatial; ++q) s += p[q];
      }
      mean[c] = s / m;
      double ss = 0.0;
      for (std::size_t b = 0; b < v.batch; ++b) {
        const double* p = x.data() + (b * v.channels + c) * v.spatial;
        for (std::size_t q = 0; q < v.spatial; ++q) ss += (p[q] - mean[c]) * (p[q] - mean[c]);
      }
      var[c] = ss / m;
    }
  } else {
    const Tensor& rm = l.param(role::kRunningMean);
    const Tensor& rv = l.param(role::kRunningVar);
    for (std::size_t c = 0; c < v.channels; ++c) {
      mean[c] = rm[c];
      var[c] = rv[c];
    }
  }
  for (std::size_t c = 0; c < v.channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + l.eps);

  Tensor y(x.shape());
  Tensor xhat(cache ? x.shape() : Shape{});
  for (std::size_t b = 0; b < v.batch; ++b) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const std::size_t off = (b * v.channels + c) * v.spatial;
      for (std::size_t q = 0; q < v.spatial; ++q) {
        const double h = (x[off + q] - mean[c]) * inv_std[c];
        if (cache) xhat[off + q] = h;
        y[off + q] = gamma[c] * h + beta[c];
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->batch_mean = std::move(mean);
    cache->batch_var = std::move(var);
  }
  return y;
}

void batchnorm_backward(const LayerSpec& l, const Tensor& dy, const LayerCache& cache, Mode mode,
                        Tensor& dgamma, Tensor& dbeta, Tensor* dx) {
  const ChannelView v = channel_view(dy);
  const Tensor& gamma = l.param(role::kGamma);
  dgamma = Tensor({v.channels});
  dbeta = Tensor({v.channels});
  for (std::size_t b = 0; b < v.batch; ++b) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const std::size_t off = (b * v.channels + c) * v.spatial;
      for (std::size_t q = 0; q < v.spatial; ++q) {
        dbeta[c] += dy[off + q];
        dgamma[c] += dy[off + q] * cache.xhat[off + q];
      }
    }
  }
  if (!dx) return;
  const double m = static_cast<double>(v.batch * v.spatial);
  for (std::size_t b = 0; b < v.batch; ++b) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const std::size_t off = (b * v.channels + c) * v.spatial;
      const double scale = gamma[c] * cache.inv_std[c];
      for (std::size_t q = 0; q < v.spatial; ++q) {
        if (mode == Mode::kTrain) {
          (*dx)[off + q] += scale / m *
                            (m * dy[off + q] - dbeta[c] - cache.xhat[off + q] * dgamma[c]);
        } else {
          (*dx)[off + q] += scale * dy[off + q];
        }
      }
    }
  }
}

Tensor pool_forward(const LayerSpec& l, const Tensor& x, LayerCache* cache) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t k = l.kernel, s = l.stride;
  const std::size_t Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  Tensor y({B, C, Ho, Wo});
  const bool is_max = l.kind == LayerKind::kMaxPool;
  if (cache && is_max) cache->argmax.assign(y.size(), 0);
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_at = 0;
        double sum = 0.0;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t at = base + (oy * s + ky) * W + (ox * s + kx);
            sum += x[at];
            if (x[at] > best) {
              best = x[at];
              best_at = at;
            }
          }
        }
        if (is_max) {
          y[o] = best;
          if (cache) cache->argmax[o] = best_at;
        } else {
          y[o] = sum / static_cast<double>(k * k);
        }
      }
    }
  }
  return y;
}

void pool_backward(const LayerSpec& l, const Tensor& dy, const Shape& in_shape,
                   const LayerCache& cache, Tensor& dx) {
  if (l.kind == LayerKind::kMaxPool) {
    for (std::size_t o = 0; o < dy.size(); ++o) dx[cache.argmax[o]] += dy[o];
    return;
  }
  const std::size_t H = in_shape[2], W = in_shape[3];
  const std::size_t k = l.kernel, s = l.stride;
  const std::size_t Ho = dy.dim(2), Wo = dy.dim(3);
  const double inv = 1.0 / static_cast<double>(k * k);
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < dy.dim(0) * dy.dim(1); ++bc) {
    const std::size_t base = bc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            dx[base + (oy * s + ky) * W + (ox * s + kx)] += dy[o] * inv;
          }
        }
      }
    }
  }
}

Tensor linear_forward(const LayerSpec& l, const Tensor& x) {
  const std::size_t B = x.dim(0);
  const Tensor& w = l.param(role::kWeight);
  Tensor y({B, l.out_channels});
  MatMap(y.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(l.out_channels)) =
      ConstMatMap(x.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(l.in_channels)) *
      ConstMatMap(w.data(), static_cast<Eigen::Index>(l.out_channels),
                  static_cast<Eigen::Index>(l.in_channels))
          .transpose();
  if (l.bias) {
    const Tensor& bias = l.param(role::kBias);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t o = 0; o < l.out_channels; ++o) y[b * l.out_channels + o] += bias[o];
    }
  }
  return y;
}

Tensor run_layer(const Network& net, std::size_t i, const Tensor& x,
                 const std::vector<Tensor>& outputs, const Tensor& net_input, Mode mode,
                 LayerCache* cache) {
  const LayerSpec& l = net.layers[i];
  switch (l.kind) {
    case LayerKind::kConv2d: {
      const Tensor* bias = l.bias ? &l.param(role::kBias) : nullptr;
      return conv_forward(x, l.param(role::kWeight), bias, l.kernel, l.stride, l.padding,
                          cache ? &cache->cols : nullptr);
    }
    case LayerKind::kBatchNorm:
      return batchnorm_forward(l, x, mode, cache);
    case LayerKind::kRelu: {
      Tensor y = x;
      for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
      return y;
    }
    case LayerKind::kMaxPool:
    case LayerKind::kAvgPool:
      return pool_forward(l, x, cache);
    case LayerKind::kGlobalAvgPool: {
      const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
      Tensor y({B, C});
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        double s = 0.0;
        for (std::size_t q = 0; q < S; ++q) s += x[bc * S + q];
        y[bc] = s / static_cast<double>(S);
      }
      return y;
    }
    case LayerKind::kFlatten:
      return x.reshaped({x.dim(0), x.size() / x.dim(0)});
    case LayerKind::kLinear:
      return linear_forward(l, x);
    case LayerKind::kResidualAdd: {
      const Tensor& skip = l.skip_from == kInputId ? net_input : outputs[net.index_of(l.skip_from)];
      Tensor y = x;
      if (l.projection) {
        Tensor proj = conv_forward(skip, l.param(role::kWeight), nullptr, 1, l.stride, 0,
                                   cache ? &cache->cols : nullptr);
        for (std::size_t q = 0; q < y.size(); ++q) y[q] += proj[q];
      } else {
        for (std::size_t q = 0; q < y.size(); ++q) y[q] += skip[q];
      }
      return y;
    }
  }
  throw ShapeError("unsupported layer kind");
}

void check_batch(const Network& net, const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(0) == 0 ||
      Shape{batch.dim(1), batch.dim(2), batch.dim(3)} != net.input_shape) {
    throw ShapeError("batch shape " + shape_to_string(batch.shape()) +
                     " does not match network input " + shape_to_string(net.input_shape));
  }
}

Tape run_network(const Network& net, const Tensor& batch, Mode mode, bool keep_caches) {
  check_batch(net, batch);
  Tape tape;
  tape.mode = mode;
  tape.input = batch;
  tape.outputs.reserve(net.layers.size());
  if (keep_caches) tape.caches.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Tensor& x = i == 0 ? tape.input : tape.outputs[i - 1];
    Tensor y = run_layer(net, i, x, tape.outputs, tape.input, mode,
                         keep_caches ? &tape.caches[i] : nullptr);
    require_finite(y, "activation of layer " + net.layers[i].id);
    tape.outputs.push_back(std::move(y));
  }
  return tape;
}

void add_into(Tensor& acc, const Tensor& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  if (acc.size() != g.size()) throw ShapeError("gradient shape mismatch");
  for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += g[q];
}

}  // namespace

ForwardResult forward(const Network& net, const Tensor& batch, const std::set<std::string>& capture) {
  for (const auto& id : capture) {
    if (id != kInputId && !net.contains(id)) {
      throw ShapeError("capture requested for unknown layer '" + id + "'");
    }
  }
  Tape tape = run_network(net, batch, Mode::kInference, false);
  ForwardResult out;
  for (const auto& id : capture) {
    out.trace[id] = id == kInputId ? tape.input : tape.outputs[net.index_of(id)];
  }
  out.logits = std::move(tape.outputs.back());
  return out;
}

Tape forward_tape(const Network& net, const Tensor& batch, Mode mode) {
  return run_network(net, batch, mode, true);
}

BackwardResult backward(const Network& net, const Tape& tape, const Tensor& grad_logits,
                        const BackwardOptions& options) {
  const std::size_t L = net.layers.size();
  if (tape.caches.size() != L) throw ShapeError("tape was recorded without caches");
  BackwardResult result;
  result.params.resize(L);
  std::vector<Tensor> grads(L);
  Tensor input_grad;
  grads[L - 1] = grad_logits;

  for (std::size_t step = 0; step < L; ++step) {
    const std::size_t i = L - 1 - step;
    const LayerSpec& l = net.layers[i];
    Tensor g = std::move(grads[i]);
    if (options.extra_output_grads) {
      auto it = options.extra_output_grads->find(i);
      if (it != options.extra_output_grads->end()) add_into(g, it->second);
    }
    if (g.empty()) g = Tensor(tape.outputs[i].shape());
    if (options.capture_output_grads.contains(i)) result.output_grads[i] = g;

    const Tensor& x = tape.input_of(i);
    const bool need_dx = i > 0 || options.want_input_grad;
    Tensor dx = need_dx ? Tensor(x.shape()) : Tensor();
    const LayerCache& cache = tape.caches[i];
    auto& pg = result.params[i];

    switch (l.kind) {
      case LayerKind::kConv2d: {
        Tensor dw, db;
        conv_backward(g, x, cache.cols, l.param(role::kWeight), l.kernel, l.stride, l.padding,
                      &dw, l.bias ? &db : nullptr, need_dx ? &dx : nullptr);
        pg[role::kWeight] = std::move(dw);
        if (l.bias) pg[role::kBias] = std::move(db);
        break;
      }
      case LayerKind::kBatchNorm: {
        Tensor dgamma, dbeta;
        batchnorm_backward(l, g, cache, tape.mode, dgamma, dbeta, need_dx ? &dx : nullptr);
        pg[role::kGamma] = std::move(dgamma);
        pg[role::kBeta] = std::move(dbeta);
        break;
      }
      case LayerKind::kRelu: {
        if (need_dx) {
          const Tensor& y = tape.outputs[i];
          for (std::size_t q = 0; q < dx.size(); ++q) dx[q] = y[q] > 0.0 ? g[q] : 0.0;
        }
        break;
      }
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool:
        if (need_dx) pool_backward(l, g, x.shape(), cache, dx);
        break;
      case LayerKind::kGlobalAvgPool: {
        if (need_dx) {
          const std::size_t S = x.dim(2) * x.dim(3);
          const double inv = 1.0 / static_cast<double>(S);
          for (std::size_t bc = 0; bc < g.size(); ++bc) {
            for (std::size_t q = 0; q < S; ++q) dx[bc * S + q] = g[bc] * inv;
          }
        }
        break;
      }
      case LayerKind::kFlatten:
        if (need_dx) dx = g.reshaped(x.shape());
        break;
      case LayerKind::kLinear: {
        const std::size_t B = x.dim(0);
        const auto in = static_cast<Eigen::Index>(l.in_channels);
        const auto out = static_cast<Eigen::Index>(l.out_channels);
        const auto b = static_cast<Eigen::Index>(B);
        ConstMatMap gm(g.data(), b, out);
        Tensor dw(l.param(role::kWeight).shape());
        MatMap(dw.data(), out, in) = gm.transpose() * ConstMatMap(x.data(), b, in);
        pg[role::kWeight] = std::move(dw);
        if (l.bias) {
          Tensor db({l.out_channels});
          for (std::size_t o = 0; o < l.out_channels; ++o) {
            db[o] = gm.col(static_cast<Eigen::Index>(o)).sum();
          }
          pg[role::kBias] = std::move(db);
        }
        if (need_dx) {
          MatMap(dx.data(), b, in) = gm * ConstMatMap(l.param(role::kWeight).data(), out, in);
        }
        break;
      }
      case LayerKind::kResidualAdd: {
        if (need_dx) dx = g;
        const bool from_input = l.skip_from == kInputId;
        const Tensor& skip = from_input ? tape.input : tape.outputs[net.index_of(l.skip_from)];
        Tensor dskip;
        if (l.projection) {
          Tensor dw;
          dskip = Tensor(skip.shape());
          conv_backward(g, skip, cache.cols, l.param(role::kWeight), 1, l.stride, 0, &dw, nullptr,
                        &dskip);
          pg[role::kWeight] = std::move(dw);
        } else {
          dskip = g;
        }
        if (from_input) {
          if (options.want_input_grad) add_into(input_grad, dskip);
        } else {
          add_into(grads[net.index_of(l.skip_from)], dskip);
        }
        break;
      }
    }

    if (i > 0) {
      add_into(grads[i - 1], dx);
    } else if (options.want_input_grad) {
      add_into(input_grad, dx);
    }
  }
  result.input_grad = std::move(input_grad);
  return result;
}

void update_running_stats(Network& net, const Tape& tape) {
  if (tape.mode != Mode::kTrain) return;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    LayerSpec& l = net.layers[i];
    if (l.kind != LayerKind::kBatchNorm) continue;
    const LayerCache& cache = tape.caches.at(i);
    const Tensor& x = tape.input_of(i);
    const ChannelView v = channel_view(x);
    const double m = static_cast<double>(v.batch * v.spatial);
    const double unbias = m > 1.0 ? m / (m - 1.0) : 1.0;
    Tensor& rm = l.param(role::kRunningMean);
    Tensor& rv = l.param(role::kRunningVar);
    for (std::size_t c = 0; c < v.channels; ++c) {
      rm[c] = (1.0 - l.momentum) * rm[c] + l.momentum * cache.batch_mean[c];
      rv[c] = (1.0 - l.momentum) * rv[c] + l.momentum * cache.batch_var[c] * unbias;
    }
  }
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("logits " + shape_to_string(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (grad) *grad = Tensor(logits.shape());
  double loss = 0.0;
  std::vector<double> p(K);
  for (std::size_t b = 0; b < B; ++b) {
    const double* z = logits.data() + b * K;
    const auto label = static_cast<std::size_t>(labels[b]);
    if (labels[b] < 0 || label >= K) throw ShapeError("label out of range for logits");
    const double zmax = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      p[k] = std::exp(z[k] - zmax);
      sum += p[k];
    }
    loss += std::log(sum) - (z[label] - zmax);
    if (grad) {
      for (std::size_t k = 0; k < K; ++k) {
        (*grad)[b * K + k] = (p[k] / sum - (k == label ? 1.0 : 0.0)) / static_cast<double>(B);
      }
    }
  }
  return loss / static_cast<double>(B);
}

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be nonnegative");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be nonnegative");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  for (std::size_t i = 1; i < lr_schedule.size(); ++i) {
    if (lr_schedule[i].first <= lr_schedule[i - 1].first) {
      throw ConfigError("learning-rate schedule epochs must be strictly increasing");
    }
  }
}

double OptimizerConfig::lr_at(int epoch) const {
  double lr = learning_rate;
  for (const auto& [e, mult] : lr_schedule) {
    if (epoch >= e) lr *= mult;
  }
  return lr;
}

OptimizerConfig geometric_decay(OptimizerConfig base, double start, double end, int epochs) {
  base.learning_rate = start;
  base.lr_schedule.clear();
  if (epochs > 1) {
    const double factor = std::pow(end / start, 1.0 / static_cast<double>(epochs - 1));
    for (int e = 1; e < epochs; ++e) base.lr_schedule.emplace_back(e, factor);
  }
  return base;
}

SgdOptimizer::SgdOptimizer(OptimizerConfig config) : config_(std::move(config)) {
  config_.validate();
}

void SgdOptimizer::step(Network& net, const Gradients& grads, int epoch) {
  const double lr = config_.lr_at(epoch);
  if (velocity_.size() != net.layers.size()) velocity_.assign(net.layers.size(), {});
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    for (const auto& [r, g] : grads[i]) {
      Tensor& w = net.layers[i].param(r);
      Tensor& v = velocity_[i][r];
      if (v.shape() != w.shape()) v = Tensor(w.shape());
      for (std::size_t q = 0; q < w.size(); ++q) {
        const double d = g[q] + config_.weight_decay * w[q];
        v[q] = config_.momentum * v[q] + d;
        w[q] -= lr * v[q];
      }
    }
  }
}

EpochStats run_epoch(Network& net, const Dataset& data, SgdOptimizer& opt, Rng& rng, int epoch,
                     const AugmentPolicy* augment_policy, const AuxLoss& aux) {
  if (data.size() == 0) throw ShapeError("cannot train on an empty dataset");
  if (net.num_classes() != data.num_classes) {
    throw ShapeError("network has " + std::to_string(net.num_classes()) + " outputs but data has " +
                     std::to_string(data.num_classes) + " classes");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  const std::size_t bs = opt.config().batch_size;
  EpochStats stats;
  double ce_sum = 0.0, extra_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    std::span<const std::size_t> idx(order.data() + start, end - start);
    Tensor x = data.gather(idx);
    if (augment_policy && augment_policy->enabled) x = augment(x, *augment_policy, rng);
    const std::vector<int> labels = data.gather_labels(idx);
    const std::size_t batch_index = stats.batches;
    try {
      Tape tape = forward_tape(net, x, Mode::kTrain);
      Tensor g;
      const double ce = softmax_cross_entropy(tape.logits(), labels, &g);
      std::map<std::size_t, Tensor> extra_grads;
      const double extra = aux ? aux(tape, x, extra_grads) : 0.0;
      if (!std::isfinite(ce + extra)) throw NumericError("loss is not finite");
      BackwardOptions bo;
      bo.extra_output_grads = &extra_grads;
      BackwardResult br = backward(net, tape, g, bo);
      update_running_stats(net, tape);
      opt.step(net, br.params, epoch);
      ce_sum += ce * static_cast<double>(idx.size());
      extra_sum += extra * static_cast<double>(idx.size());
    } catch (const NumericError& e) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch_index) + ": " + e.what());
    }
    ++stats.batches;
  }
  const double n = static_cast<double>(data.size());
  stats.ce = ce_sum / n;
  stats.extra = extra_sum / n;
  stats.total = stats.ce + stats.extra;
  return stats;
}

double train_epoch(Network& net, const Dataset& data, SgdOptimizer& opt, Rng& rng, int epoch,
                   const AugmentPolicy* augment_policy) {
  return run_epoch(net, data, opt, rng, epoch, augment_policy).ce;
}

std::vector<int> predict(const Network& net, const Tensor& images, std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(images.dim(0));
  for (std::size_t start = 0; start < images.dim(0); start += batch_size) {
    const std::size_t end = std::min(images.dim(0), start + batch_size);
    const Tensor logits = forward(net, images.slice_rows(start, end)).logits;
    const std::size_t K = logits.dim(1);
    for (std::size_t b = 0; b < end - start; ++b) {
      const double* z = logits.data() + b * K;
      out.push_back(static_cast<int>(std::max_element(z, z + K) - z));
    }
  }
  return out;
}

double evaluate(const Network& net, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw ShapeError("cannot evaluate on an empty dataset");
  const std::vector<int> pred = predict(net, data.images, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

ModelStats model_stats(const Network& net) { return model_stats(net, net.input_shape); }

ModelStats model_stats(const Network& net, const Shape& input_shape) {
  const std::vector<Shape> shapes = net.output_shapes_for(input_shape);
  ModelStats s;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    switch (l.kind) {
      case LayerKind::kConv2d: {
        const std::uint64_t macs_per_pos = l.out_channels * l.in_channels * l.kernel * l.kernel;
        s.params += macs_per_pos + (l.bias ? l.out_channels : 0);
        s.flops += 2 * macs_per_pos * shapes[i][1] * shapes[i][2];
        break;
      }
      case LayerKind::kLinear:
        s.params += l.out_channels * l.in_channels + (l.bias ? l.out_channels : 0);
        s.flops += 2 * l.out_channels * l.in_channels;
        break;
      case LayerKind::kBatchNorm:
        s.params += 2 * l.out_channels;
        break;
      case LayerKind::kResidualAdd:
        if (l.projection) {
          s.params += l.out_channels * l.in_channels;
          s.flops += 2 * l.out_channels * l.in_channels * shapes[i][1] * shapes[i][2];
        }
        break;
      default:
        break;
    }
  }
  return s;
}

}  // namespace chprune
