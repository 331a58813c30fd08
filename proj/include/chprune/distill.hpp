#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "chprune/dataset.hpp"
#include "chprune/engine.hpp"
#include "chprune/network.hpp"
#include "chprune/rng.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

struct AttentionPair {
  std::string teacher;
  std::string student;

  bool operator==(const AttentionPair&) const = default;
};

struct DistillConfig {
  double beta = 1e3;
  std::vector<AttentionPair> pairs;  // empty: default_attention_pairs(teacher)
  std::size_t epochs = 1;
  OptimizerConfig optimizer{1e-3, 0.9, 5e-4, 128, {}};

  void validate() const;
};

inline constexpr double kAttentionEps = 1e-8;

// Channel mean: C x H x W -> H x W, or N x C x H x W -> N x H x W.
Tensor attention_map(const Tensor& feature);

// || s/(|s|+eps) - t/(|t|+eps) || over the flattened maps. Writes the
// gradient w.r.t. s when `grad_s` is non-null (zero where the distance is 0).
double attention_distance(std::span<const double> s, std::span<const double> t,
                          std::vector<double>* grad_s = nullptr);

// ce + beta * sum_j mean_b distance(student_j[b], teacher_j[b]). Maps are
// H x W (one sample) or N x H x W.
double at_loss(const std::vector<Tensor>& student_maps, const std::vector<Tensor>& teacher_maps,
               double beta, double ce);

// Last ReLU output at each spatial resolution, in forward order.
std::vector<AttentionPair> default_attention_pairs(const Network& net);

// Checks that every pair exists and that paired outputs share H x W.
void check_attention_pairs(const Network& student, const Network& teacher,
                           const std::vector<AttentionPair>& pairs);

// beta * sum_j mean_b distance for one batch. `teacher_features[j]` is the
// teacher output for pair j. Gradients w.r.t. student layer outputs are
// added into `grads` when non-null.
double attention_term(const Network& student, const Tape& tape,
                      const std::vector<Tensor>& teacher_features,
                      const std::vector<AttentionPair>& pairs, double beta,
                      std::map<std::size_t, Tensor>* grads);

struct KdEpoch {
  std::size_t epoch = 0;
  double ce = 0.0;
  double at = 0.0;
  double total = 0.0;
};

// Trains the student for cfg.epochs on CE plus the attention term against
// the frozen teacher (inference mode). With beta == 0 the teacher is never
// run and the result equals plain fine-tuning.
std::vector<KdEpoch> finetune_kd(Network& student, const Network& teacher, const Dataset& data,
                                 const DistillConfig& cfg, Rng& rng,
                                 const AugmentPolicy* augment = nullptr);

// "epoch,ce,at,total" rows.
std::string trajectory_csv(const std::vector<KdEpoch>& trajectory);

}  // namespace chprune
