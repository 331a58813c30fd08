#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chprune/dataset.hpp"
#include "chprune/network.hpp"
#include "chprune/rng.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

enum class Mode {
  kInference,  // BN uses running statistics
  kTrain,      // BN uses batch statistics
};

struct ForwardResult {
  Tensor logits;
  std::map<std::string, Tensor> trace;  // layer id -> post-layer activation
};

// Deterministic inference pass. `capture` names layers whose outputs are
// copied into the trace; "input" captures the batch itself.
ForwardResult forward(const Network& net, const Tensor& batch,
                      const std::set<std::string>& capture = {});

// Per-layer scratch kept for the backward pass.
struct LayerCache {
  Tensor cols;       // im2col matrix of a conv input (or projection input)
  Tensor xhat;       // normalised BN input
  std::vector<double> inv_std;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
  std::vector<std::size_t> argmax;  // max-pool winners, flat input offsets
};

struct Tape {
  Mode mode = Mode::kTrain;
  Tensor input;
  std::vector<Tensor> outputs;  // outputs[i] is the output of layer i
  std::vector<LayerCache> caches;

  const Tensor& logits() const { return outputs.back(); }
  const Tensor& input_of(std::size_t i) const { return i == 0 ? input : outputs[i - 1]; }
};

Tape forward_tape(const Network& net, const Tensor& batch, Mode mode);

// Gradients aligned with net.layers; only learnable roles are present.
using Gradients = std::vector<std::map<std::string, Tensor>>;

struct BackwardOptions {
  // Additional dL/d(output of layer i), summed into the flowing gradient.
  const std::map<std::size_t, Tensor>* extra_output_grads = nullptr;
  // Layer indices whose total output gradient should be reported.
  std::set<std::size_t> capture_output_grads;
  bool want_input_grad = false;
};

struct BackwardResult {
  Gradients params;
  std::map<std::size_t, Tensor> output_grads;
  Tensor input_grad;
};

BackwardResult backward(const Network& net, const Tape& tape, const Tensor& grad_logits,
                        const BackwardOptions& options = {});

// Folds the batch statistics of a kTrain tape into BN running averages.
void update_running_stats(Network& net, const Tape& tape);

// Mean softmax cross-entropy over the batch; writes dL/dlogits when `grad`
// is non-null.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* grad = nullptr);

struct OptimizerConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  // (epoch, multiplier): from `epoch` onward the rate is scaled by the
  // product of every multiplier whose epoch has been reached.
  std::vector<std::pair<int, double>> lr_schedule;

  void validate() const;
  double lr_at(int epoch) const;
};

// Schedule that decays geometrically from `start` to `end` over `epochs`.
OptimizerConfig geometric_decay(OptimizerConfig base, double start, double end, int epochs);

class SgdOptimizer {
 public:
  explicit SgdOptimizer(OptimizerConfig config);

  const OptimizerConfig& config() const { return config_; }
  void step(Network& net, const Gradients& grads, int epoch);

 private:
  OptimizerConfig config_;
  std::vector<std::map<std::string, Tensor>> velocity_;
};

struct EpochStats {
  double ce = 0.0;      // mean cross-entropy
  double extra = 0.0;   // mean auxiliary loss (e.g. attention transfer)
  double total = 0.0;
  std::size_t batches = 0;
};

// Auxiliary loss on a forward tape: returns its value and adds its
// gradients w.r.t. layer outputs into `grads`.
using AuxLoss = std::function<double(const Tape& tape, const Tensor& batch,
                                     std::map<std::size_t, Tensor>& grads)>;

// One shuffled pass of minibatch SGD with cross-entropy plus optional
// auxiliary loss. Throws NumericError naming the batch on divergence.
EpochStats run_epoch(Network& net, const Dataset& data, SgdOptimizer& opt, Rng& rng,
                     int epoch, const AugmentPolicy* augment = nullptr,
                     const AuxLoss& aux = {});

// Plain cross-entropy training epoch; returns the mean loss.
double train_epoch(Network& net, const Dataset& data, SgdOptimizer& opt, Rng& rng,
                   int epoch = 0, const AugmentPolicy* augment = nullptr);

// Top-1 accuracy with inference-mode BN.
double evaluate(const Network& net, const Dataset& data, std::size_t batch_size = 256);

std::vector<int> predict(const Network& net, const Tensor& images, std::size_t batch_size = 256);

struct ModelStats {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

// Learnable values (conv/linear weights and biases, BN gamma/beta) and
// 2 x multiply-accumulates of conv, projection and linear layers.
ModelStats model_stats(const Network& net);
ModelStats model_stats(const Network& net, const Shape& input_shape);

}  // namespace chprune
