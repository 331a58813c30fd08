#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "chprune/dataset.hpp"
#include "chprune/distill.hpp"
#include "chprune/engine.hpp"
#include "chprune/network.hpp"
#include "chprune/rng.hpp"
#include "chprune/sampler.hpp"
#include "chprune/tensor.hpp"

namespace testing {

using namespace chprune;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (auto& v : t.storage()) v = rng.normal(0.0, scale);
  return t;
}

inline void randomize(Network& net, Rng& rng, double scale = 0.5) {
  for (auto& l : net.layers) {
    for (auto& [r, t] : l.params) {
      for (auto& v : t.storage()) {
        if (r == role::kRunningVar || r == role::kGamma) {
          v = rng.uniform(0.5, 1.5);
        } else {
          v = rng.normal(0.0, scale);
        }
      }
    }
  }
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(classes));
  return y;
}

inline Dataset synthetic(std::size_t n, std::size_t classes = 2, std::size_t channels = 1,
                         std::size_t side = 8, std::uint64_t seed = 1, std::uint64_t stream = 0) {
  DatasetSource src;
  src.format = DataFormat::kSynthetic;
  src.synthetic.seed = seed;
  src.synthetic.size = n;
  src.synthetic.classes = classes;
  src.synthetic.channels = channels;
  src.synthetic.height = side;
  src.synthetic.width = side;
  src.synthetic.stream = stream;
  return load_dataset(src, stream == 0 ? "train" : "test");
}

// Fresh scratch directory under the build tree (or the system temp dir).
inline std::filesystem::path scratch(const std::string& name) {
  const char* env = std::getenv("CHPRUNE_TMP");
  const std::filesystem::path root =
      env ? std::filesystem::path(env) : std::filesystem::temp_directory_path() / "chprune_tests";
  const auto dir = root / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline bool close_rel(double a, double b, double rel, double abs_floor = 1e-10) {
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

// Direct 4-loop convolution, independent of the im2col/GEMM engine path.
inline Tensor naive_conv(const Tensor& x, const LayerSpec& l) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = l.kernel, s = l.stride, p = l.padding, f = l.out_channels;
  const std::size_t oh = (h + 2 * p - k) / s + 1, ow = (w + 2 * p - k) / s + 1;
  const Tensor& wt = l.param(role::kWeight);
  Tensor out({n, f, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = l.bias ? l.param(role::kBias)[o] : 0.0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y * s + ky) - static_cast<long>(p);
                const long ix = static_cast<long>(xx * s + kx) - static_cast<long>(p);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += wt[((o * c + ci) * k + ky) * k + kx] *
                       x.at(b, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
          out.at(b, o, y, xx) = acc;
        }
  return out;
}

// Cross-entropy of a training-mode pass (BN on batch statistics).
inline double train_loss(const Network& net, const Tensor& x, const std::vector<int>& y) {
  const Tape tape = forward_tape(net, x, Mode::kTrain);
  return softmax_cross_entropy(tape.logits(), y);
}

// Random layer problem: N volumes of C*K*K inputs and F filters, with the
// reference outputs computed by explicit dot products.
struct LayerFixture {
  VolumeSet volumes;
  Tensor weight;  // F x C x K x K
  Tensor bias;    // F
};

inline LayerFixture random_fixture(std::size_t channels, std::size_t kernel, std::size_t filters,
                                   std::size_t n, Rng& rng) {
  LayerFixture fx;
  const std::size_t d = channels * kernel * kernel;
  fx.volumes.layer_id = "fixture";
  fx.volumes.channels = channels;
  fx.volumes.kernel = kernel;
  // Correlated inputs, as real feature maps are.
  const Tensor mix = random_tensor({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  const Tensor z = random_tensor({n, d}, rng);
  fx.volumes.volumes = Tensor({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      double v = 0.0;
      for (std::size_t b = 0; b < d; ++b) v += z[i * d + b] * mix[b * d + a];
      fx.volumes.volumes[i * d + a] = v;
    }
  fx.weight = random_tensor({filters, channels, kernel, kernel}, rng);
  fx.bias = random_tensor({filters}, rng);
  fx.volumes.ref_outputs = Tensor({n, filters});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t f = 0; f < filters; ++f) {
      double y = fx.bias[f];
      for (std::size_t a = 0; a < d; ++a) y += fx.weight[f * d + a] * fx.volumes.volumes[i * d + a];
      fx.volumes.ref_outputs[i * filters + f] = y;
    }
  fx.volumes.origins.resize(n);
  return fx;
}

// Which side of every kink the pass sits on: the sign of each ReLU input and
// the winner of each max-pool window.
inline std::vector<std::size_t> kink_pattern(const Network& net, const Tape& tape) {
  std::vector<std::size_t> pattern;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].kind == LayerKind::kRelu) {
      for (double v : tape.input_of(i).storage()) pattern.push_back(v > 0.0 ? 1 : 0);
    } else if (net.layers[i].kind == LayerKind::kMaxPool) {
      const auto& a = tape.caches[i].argmax;
      pattern.insert(pattern.end(), a.begin(), a.end());
    }
  }
  return pattern;
}

struct GradCheck {
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::size_t straddled = 0;  // samples whose +/- step crossed a kink, not compared
  double worst = 0.0;
  std::string worst_at;
};

// Central differences (step 1e-4) against backward() for every learnable
// parameter entry (up to `per_tensor` entries each) and the input. A sample
// whose two probes land on different sides of a ReLU or max-pool kink has no
// meaningful difference quotient and is counted in `straddled` instead.
inline GradCheck check_gradients(const Network& net, const Tensor& x, const std::vector<int>& y,
                                 std::size_t per_tensor = 24, double rel = 1e-4) {
  constexpr double kStep = 1e-4;
  const Tape tape = forward_tape(net, x, Mode::kTrain);
  const auto base = kink_pattern(net, tape);
  Tensor g;
  softmax_cross_entropy(tape.logits(), y, &g);
  BackwardOptions opts;
  opts.want_input_grad = true;
  const BackwardResult br = backward(net, tape, g, opts);

  GradCheck res;
  bool smooth = true;
  auto probe_loss = [&](const Network& n, const Tensor& in) {
    const Tape t = forward_tape(n, in, Mode::kTrain);
    if (kink_pattern(n, t) != base) smooth = false;
    return softmax_cross_entropy(t.logits(), y);
  };
  auto record = [&](double analytic, double numeric, const std::string& where) {
    if (!smooth) {
      ++res.straddled;
      smooth = true;
      return;
    }
    ++res.checked;
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    const double err = std::abs(analytic - numeric) / denom;
    if (err > res.worst) {
      res.worst = err;
      res.worst_at = where;
    }
    if (err > rel) ++res.failed;
  };

  Network probe = net;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    for (const auto& [r, grad] : br.params[i]) {
      Tensor& p = probe.layers[i].param(r);
      const std::size_t stride = std::max<std::size_t>(1, p.size() / per_tensor);
      for (std::size_t j = 0; j < p.size(); j += stride) {
        const double saved = p[j];
        p[j] = saved + kStep;
        const double up = probe_loss(probe, x);
        p[j] = saved - kStep;
        const double down = probe_loss(probe, x);
        p[j] = saved;
        record(grad[j], (up - down) / (2 * kStep), net.layers[i].id + "." + r + "[" + std::to_string(j) + "]");
      }
    }
  }
  Tensor xp = x;
  const std::size_t stride = std::max<std::size_t>(1, x.size() / per_tensor);
  for (std::size_t j = 0; j < x.size(); j += stride) {
    const double saved = xp[j];
    xp[j] = saved + kStep;
    const double up = probe_loss(net, xp);
    xp[j] = saved - kStep;
    const double down = probe_loss(net, xp);
    xp[j] = saved;
    record(br.input_grad[j], (up - down) / (2 * kStep), "input[" + std::to_string(j) + "]");
  }
  return res;
}

// Same check for cross-entropy plus the attention term against `teacher`
// over its default pairs.
inline GradCheck check_kd_gradients(const Network& net, const Network& teacher, const Tensor& x,
                                    const std::vector<int>& y, double beta, std::size_t per_tensor = 16,
                                    double rel = 1e-4) {
  constexpr double kStep = 1e-4;
  const auto pairs = default_attention_pairs(teacher);
  std::set<std::string> ids;
  for (const auto& p : pairs) ids.insert(p.teacher);
  const ForwardResult tr = forward(teacher, x, ids);
  std::vector<Tensor> feats;
  for (const auto& p : pairs) feats.push_back(tr.trace.at(p.teacher));

  const Tape tape = forward_tape(net, x, Mode::kTrain);
  const auto base = kink_pattern(net, tape);
  Tensor g;
  softmax_cross_entropy(tape.logits(), y, &g);
  std::map<std::size_t, Tensor> extra;
  attention_term(net, tape, feats, pairs, beta, &extra);
  BackwardOptions opts;
  opts.extra_output_grads = &extra;
  const BackwardResult br = backward(net, tape, g, opts);

  GradCheck res;
  Network probe = net;
  auto loss = [&](bool& smooth) {
    const Tape t = forward_tape(probe, x, Mode::kTrain);
    if (kink_pattern(probe, t) != base) smooth = false;
    return softmax_cross_entropy(t.logits(), y) + attention_term(probe, t, feats, pairs, beta, nullptr);
  };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    for (const auto& [r, grad] : br.params[i]) {
      Tensor& p = probe.layers[i].param(r);
      const std::size_t stride = std::max<std::size_t>(1, p.size() / per_tensor);
      for (std::size_t j = 0; j < p.size(); j += stride) {
        bool smooth = true;
        const double saved = p[j];
        p[j] = saved + kStep;
        const double up = loss(smooth);
        p[j] = saved - kStep;
        const double down = loss(smooth);
        p[j] = saved;
        if (!smooth) {
          ++res.straddled;
          continue;
        }
        ++res.checked;
        const double numeric = (up - down) / (2 * kStep);
        const double err = std::abs(grad[j] - numeric) / std::max({std::abs(grad[j]), std::abs(numeric), 1e-6});
        if (err > res.worst) {
          res.worst = err;
          res.worst_at = net.layers[i].id + "." + r + "[" + std::to_string(j) + "]";
        }
        if (err > rel) ++res.failed;
      }
    }
  }
  return res;
}

}  // namespace testing
