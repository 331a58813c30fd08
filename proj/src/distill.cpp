#include "chprune/distill.hpp"

#include <cmath>
#include <sstream>

#include "chprune/errors.hpp"

namespace chprune {

void DistillConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("distill beta must be finite and >= 0");
  optimizer.validate();
}

Tensor attention_map(const Tensor& feature) {
  const bool batched = feature.rank() == 4;
  if (!batched && feature.rank() != 3) {
    throw ShapeError("attention map needs a C x H x W or N x C x H x W feature, got " +
                     shape_to_string(feature.shape()));
  }
  const std::size_t off = batched ? 1 : 0;
  const std::size_t N = batched ? feature.dim(0) : 1;
  const std::size_t C = feature.dim(off), H = feature.dim(off + 1), W = feature.dim(off + 2);
  if (C == 0) throw ShapeError("attention map of a feature with zero channels");
  const std::size_t hw = H * W;
  Tensor out(batched ? Shape{N, H, W} : Shape{H, W});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = feature.data() + (n * C + c) * hw;
      double* dst = out.data() + n * hw;
      for (std::size_t q = 0; q < hw; ++q) dst[q] += src[q];
    }
  }
  const double inv = 1.0 / static_cast<double>(C);
  for (double& v : out.storage()) v *= inv;
  return out;
}

double attention_distance(std::span<const double> s, std::span<const double> t,
                          std::vector<double>* grad_s) {
  if (s.size() != t.size()) throw ShapeError("attention maps differ in size");
  double ns = 0.0, nt = 0.0;
  for (double v : s) ns += v * v;
  for (double v : t) nt += v * v;
  ns = std::sqrt(ns);
  nt = std::sqrt(nt);
  const double ds = ns + kAttentionEps, dt = nt + kAttentionEps;
  std::vector<double> diff(s.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    diff[i] = s[i] / ds - t[i] / dt;
    d2 += diff[i] * diff[i];
  }
  const double d = std::sqrt(d2);
  if (grad_s) {
    grad_s->assign(s.size(), 0.0);
    if (d > 0.0) {
      // d/ds of s/(|s|+eps) applied to g = diff/d.
      double sg = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) sg += s[i] * diff[i] / d;
      const double coef = ns > 0.0 ? sg / (ns * ds * ds) : 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) (*grad_s)[i] = diff[i] / d / ds - coef * s[i];
    }
  }
  return d;
}

double at_loss(const std::vector<Tensor>& student_maps, const std::vector<Tensor>& teacher_maps,
               double beta, double ce) {
  if (student_maps.size() != teacher_maps.size()) {
    throw ShapeError("student and teacher attention lists differ in length");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < student_maps.size(); ++j) {
    const Tensor& s = student_maps[j];
    const Tensor& t = teacher_maps[j];
    if (s.shape() != t.shape()) {
      throw ShapeError("attention pair " + std::to_string(j) + " shapes differ: " +
                       shape_to_string(s.shape()) + " vs " + shape_to_string(t.shape()));
    }
    const std::size_t N = s.rank() == 3 ? s.dim(0) : 1;
    const std::size_t hw = s.size() / std::max<std::size_t>(N, 1);
    double sum = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      sum += attention_distance(s.values().subspan(n * hw, hw), t.values().subspan(n * hw, hw));
    }
    total += sum / static_cast<double>(N);
  }
  return ce + beta * total;
}

std::vector<AttentionPair> default_attention_pairs(const Network& net) {
  const std::vector<Shape> shapes = net.output_shapes();
  std::vector<AttentionPair> pairs;
  Shape current;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].kind != LayerKind::kRelu || shapes[i].size() != 3) continue;
    const Shape hw{shapes[i][1], shapes[i][2]};
    if (!pairs.empty() && hw == current) {
      pairs.back() = {net.layers[i].id, net.layers[i].id};
    } else {
      pairs.push_back({net.layers[i].id, net.layers[i].id});
      current = hw;
    }
  }
  return pairs;
}

void check_attention_pairs(const Network& student, const Network& teacher,
                           const std::vector<AttentionPair>& pairs) {
  const std::vector<Shape> ss = student.output_shapes();
  const std::vector<Shape> ts = teacher.output_shapes();
  for (const auto& p : pairs) {
    if (!teacher.contains(p.teacher)) throw ConfigError("attention pair names unknown teacher layer " + p.teacher);
    if (!student.contains(p.student)) throw ConfigError("attention pair names unknown student layer " + p.student);
    const Shape& a = ss[student.index_of(p.student)];
    const Shape& b = ts[teacher.index_of(p.teacher)];
    if (a.size() != 3 || b.size() != 3 || a[1] != b[1] || a[2] != b[2]) {
      throw ShapeError("attention pair " + p.teacher + "/" + p.student + " is spatially misaligned: " +
                       shape_to_string(b) + " vs " + shape_to_string(a));
    }
  }
}

double attention_term(const Network& student, const Tape& tape,
                      const std::vector<Tensor>& teacher_features,
                      const std::vector<AttentionPair>& pairs, double beta,
                      std::map<std::size_t, Tensor>* grads) {
  if (teacher_features.size() != pairs.size()) throw ShapeError("one teacher feature per pair required");
  double total = 0.0;
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    const std::size_t li = student.index_of(pairs[j].student);
    const Tensor& fs = tape.outputs[li];
    const Tensor as = attention_map(fs);
    const Tensor at = attention_map(teacher_features[j]);
    if (as.shape() != at.shape()) {
      throw ShapeError("attention pair " + pairs[j].teacher + "/" + pairs[j].student + " is misaligned");
    }
    const std::size_t N = as.dim(0);
    const std::size_t hw = as.dim(1) * as.dim(2);
    const std::size_t C = fs.dim(1);
    const double scale = beta / static_cast<double>(N);
    Tensor* g = nullptr;
    if (grads && beta != 0.0) {
      Tensor& slot = (*grads)[li];
      if (slot.empty()) slot = Tensor(fs.shape());
      g = &slot;
    }
    std::vector<double> ga;
    double sum = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      sum += attention_distance(as.values().subspan(n * hw, hw), at.values().subspan(n * hw, hw),
                                g ? &ga : nullptr);
      if (!g) continue;
      for (std::size_t c = 0; c < C; ++c) {
        double* dst = g->data() + (n * C + c) * hw;
        for (std::size_t q = 0; q < hw; ++q) dst[q] += scale * ga[q] / static_cast<double>(C);
      }
    }
    total += sum / static_cast<double>(N);
  }
  return beta * total;
}

std::vector<KdEpoch> finetune_kd(Network& student, const Network& teacher, const Dataset& data,
                                 const DistillConfig& cfg, Rng& rng, const AugmentPolicy* augment) {
  cfg.validate();
  std::vector<AttentionPair> pairs = cfg.pairs.empty() ? default_attention_pairs(teacher) : cfg.pairs;
  check_attention_pairs(student, teacher, pairs);
  std::set<std::string> capture;
  for (const auto& p : pairs) capture.insert(p.teacher);

  AuxLoss aux;
  if (cfg.beta > 0.0 && !pairs.empty()) {
    aux = [&](const Tape& tape, const Tensor& batch, std::map<std::size_t, Tensor>& grads) {
      const ForwardResult tr = forward(teacher, batch, capture);
      std::vector<Tensor> feats;
      feats.reserve(pairs.size());
      for (const auto& p : pairs) feats.push_back(tr.trace.at(p.teacher));
      return attention_term(student, tape, feats, pairs, cfg.beta, &grads);
    };
  }
  SgdOptimizer opt(cfg.optimizer);
  std::vector<KdEpoch> trajectory;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const EpochStats s = run_epoch(student, data, opt, rng, static_cast<int>(e), augment, aux);
    trajectory.push_back({e, s.ce, s.extra, s.total});
  }
  return trajectory;
}

std::string trajectory_csv(const std::vector<KdEpoch>& trajectory) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,ce,at,total\n";
  for (const auto& e : trajectory) out << e.epoch << ',' << e.ce << ',' << e.at << ',' << e.total << '\n';
  return out.str();
}

}  // namespace chprune
