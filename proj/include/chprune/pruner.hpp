#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "chprune/chromosome.hpp"
#include "chprune/dataset.hpp"
#include "chprune/distill.hpp"
#include "chprune/engine.hpp"
#include "chprune/fitness.hpp"
#include "chprune/genetic.hpp"
#include "chprune/network.hpp"
#include "chprune/rng.hpp"
#include "chprune/sampler.hpp"
#include "json.hpp"

namespace chprune {

// A conv whose filters can be removed: its output reaches exactly one
// following conv through channel-wise layers (BN, ReLU, pooling) only, and
// none of those outputs is used as a residual shortcut.
struct PrunePath {
  std::size_t producer = 0;
  std::size_t consumer = 0;
  std::vector<std::size_t> batchnorms;  // BN layers between the two
};

PrunePath prune_path(const Network& net, const std::string& producer_id);
// Producer ids in forward order.
std::vector<std::string> prunable_layers(const Network& net);
std::string consumer_of(const Network& net, const std::string& producer_id);
std::string producer_of(const Network& net, const std::string& consumer_id);

// Removes the input channels of `consumer_id` where mask is 0, together with
// the producing filters, their biases and the BN channels in between.
Network surgery(const Network& net, const std::string& consumer_id, const Chromosome& mask);

// Everything the selectors need for one producer/consumer pair.
struct LayerProblem {
  std::string producer;
  std::string consumer;
  VolumeSet volumes;      // consumer input volumes
  HessianCache hessian;
  Tensor weight;          // consumer weight
  std::optional<Tensor> bias;
};

LayerProblem build_layer_problem(const Network& net, const Dataset& data, const std::string& producer,
                                 const SamplerConfig& sampler, Rng& rng);

struct SensitivityEntry {
  std::string layer;
  double rate = 0.0;
  double accuracy = 0.0;
  double error = 0.0;  // GA second-order error of the chosen mask
};

struct SensitivityProfile {
  double baseline_accuracy = 0.0;
  std::vector<SensitivityEntry> entries;

  std::vector<std::string> layers() const;
  double accuracy(const std::string& layer, double rate) const;
  // "layer,rate,accuracy" rows.
  std::string csv() const;
};

// For every (layer, rate): GA on that layer alone, surgery on a copy,
// accuracy on `test` without fine-tuning. Empty `layers` scans every
// prunable layer.
SensitivityProfile sensitivity_scan(const Network& net, const Dataset& train, const Dataset& test,
                                    std::vector<std::string> layers, const std::vector<double>& rates,
                                    const GAConfig& ga, const SamplerConfig& sampler, Rng& rng);

struct PlanGroup {
  std::vector<std::string> layers;
  double rate = 0.0;

  bool operator==(const PlanGroup&) const = default;
};

struct PruningPlan {
  std::vector<PlanGroup> groups;
  std::vector<std::string> skip;

  // Groups and skip-set reference prunable layers, are disjoint, rates in
  // (0, 1).
  void validate(const Network& net) const;
  // Copy with every uncovered prunable layer moved to the skip-set.
  PruningPlan completed(const Network& net) const;
  std::size_t layer_count() const;

  nlohmann::json to_json() const;
  static PruningPlan from_json(const nlohmann::json& j);
};

PruningPlan make_plan(const std::vector<std::string>& prunable,
                      const std::vector<std::vector<std::string>>& groups,
                      const std::vector<double>& rates);
PruningPlan make_plan(const SensitivityProfile& profile,
                      const std::vector<std::vector<std::string>>& groups,
                      const std::vector<double>& rates);

// Per group, the largest scanned rate whose mean accuracy drop over the
// group's layers stays within `max_drop`; 0 when none does.
std::vector<double> suggest_rates(const SensitivityProfile& profile,
                                  const std::vector<std::vector<std::string>>& groups,
                                  double max_drop);

struct FinetuneConfig {
  std::size_t inter_epochs = 1;
  double inter_lr = 1e-3;
  std::size_t final_epochs = 20;
  double final_lr_start = 1e-3;
  double final_lr_end = 1e-5;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  AugmentPolicy augment;

  void validate() const;
};

struct PipelineConfig {
  GAConfig ga;
  SamplerConfig sampler;
  FinetuneConfig finetune;
  DistillConfig distill;  // beta and pairs; epochs and rates come from finetune
};

struct LayerReport {
  std::string layer;
  std::string consumer;
  double rate = 0.0;
  std::size_t channels = 0;
  std::size_t kept = 0;
  double taylor_error = 0.0;
  double direct_error = 0.0;
  double accuracy_pruned = 0.0;
  double accuracy_finetuned = 0.0;
  ModelStats stats;  // after this layer
  std::string mask_hex;
  Chromosome mask;
  EvolveResult ga;
  std::vector<KdEpoch> finetune;
};

struct PruneReport {
  double baseline_accuracy = 0.0;
  double final_accuracy = 0.0;
  ModelStats before;
  ModelStats after;
  std::vector<LayerReport> layers;
  std::vector<KdEpoch> final_finetune;

  nlohmann::json to_json() const;
  // "layer,consumer,rate,channels,kept,taylor_error,direct_error,
  // accuracy_pruned,accuracy_finetuned,params,flops" rows.
  std::string csv() const;
};

struct PruneResult {
  Network net;
  PruneReport report;
};

// Layer-by-layer pipeline in forward order: sample, Hessian, GA, surgery,
// attention-transfer fine-tuning against `teacher`; then the final decayed
// fine-tuning. Errors name the layer being pruned.
PruneResult prune_model(const Network& net, const PruningPlan& plan, const Dataset& train,
                        const Dataset& test, const PipelineConfig& cfg, const Network& teacher,
                        Rng& rng);

enum class BaselineCriterion { kRandom, kWeightSum, kTaylor1, kGreedy };

BaselineCriterion baseline_from_string(const std::string& name);
std::string to_string(BaselineCriterion c);

struct BaselineContext {
  std::size_t channels = 0;
  const Tensor* producer_weight = nullptr;  // weight-sum: F x C_in x k x k of the producer
  const VolumeSet* volumes = nullptr;       // greedy
  const Tensor* consumer_weight = nullptr;  // greedy
  const Tensor* consumer_bias = nullptr;    // greedy, optional
  const Tensor* activations = nullptr;      // taylor1: consumer input, N x C x H x W
  const Tensor* gradients = nullptr;        // taylor1: dLoss/d(activations)
};

Chromosome select_baseline(BaselineCriterion criterion, const BaselineContext& ctx, std::size_t k,
                           Rng& rng);

struct TaylorSnapshot {
  Tensor activations;
  Tensor gradients;
};

// Consumer-input activations and cross-entropy gradients (inference-mode
// BN) over the first `samples` images of `data`.
TaylorSnapshot collect_taylor_snapshot(const Network& net, const Dataset& data,
                                       const std::string& consumer_id, std::size_t samples);

}  // namespace chprune
