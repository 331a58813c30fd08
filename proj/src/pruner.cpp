#include "chprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "chprune/errors.hpp"

namespace chprune {

using nlohmann::json;

namespace {

bool is_channelwise(LayerKind k) {
  return k == LayerKind::kBatchNorm || k == LayerKind::kRelu || k == LayerKind::kMaxPool ||
         k == LayerKind::kAvgPool;
}

std::set<std::string> shortcut_sources(const Network& net) {
  std::set<std::string> out;
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::kResidualAdd) out.insert(l.skip_from);
  }
  return out;
}

// Keeps entries `keep` along axis 0 (axis 1 when `inner`) of a tensor whose
// trailing dims are contiguous blocks.
Tensor take(const Tensor& t, const std::vector<std::size_t>& keep, bool inner) {
  Shape shape = t.shape();
  const std::size_t axis = inner ? 1 : 0;
  const std::size_t outer = inner ? shape[0] : 1;
  const std::size_t n = shape[axis];
  const std::size_t block = t.size() / (outer * n);
  shape[axis] = keep.size();
  Tensor out(shape);
  double* dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c : keep) {
      const double* src = t.data() + (o * n + c) * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  return out;
}

std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

Chromosome mask_of(std::size_t channels, const std::vector<std::size_t>& keep) {
  Chromosome m(channels, 0);
  for (std::size_t c : keep) m[c] = 1;
  return m;
}

json stats_json(const ModelStats& s) { return {{"params", s.params}, {"flops", s.flops}}; }

json trajectory_json(const std::vector<KdEpoch>& t) {
  json a = json::array();
  for (const auto& e : t) a.push_back({{"epoch", e.epoch}, {"ce", e.ce}, {"at", e.at}, {"total", e.total}});
  return a;
}

}  // namespace

PrunePath prune_path(const Network& net, const std::string& producer_id) {
  const std::size_t p = net.index_of(producer_id);
  if (net.layers[p].kind != LayerKind::kConv2d) {
    throw PruneError("layer " + producer_id + " is not convolutional");
  }
  const std::set<std::string> shortcuts = shortcut_sources(net);
  PrunePath path;
  path.producer = p;
  for (std::size_t j = p; j < net.layers.size(); ++j) {
    const LayerSpec& l = net.layers[j];
    if (shortcuts.contains(l.id)) {
      throw PruneError("layer " + producer_id + " feeds a residual shortcut via " + l.id +
                       " and cannot lose channels");
    }
    if (j == p) continue;
    if (l.kind == LayerKind::kConv2d) {
      path.consumer = j;
      return path;
    }
    if (!is_channelwise(l.kind)) {
      throw PruneError("layer " + producer_id + " reaches " + l.id + " (" + std::string(to_string(l.kind)) +
                       ") before any conv; only convs followed by another conv are prunable");
    }
    if (l.kind == LayerKind::kBatchNorm) path.batchnorms.push_back(j);
  }
  throw PruneError("layer " + producer_id + " has no following conv");
}

std::vector<std::string> prunable_layers(const Network& net) {
  std::vector<std::string> out;
  for (const auto& l : net.layers) {
    if (l.kind != LayerKind::kConv2d) continue;
    try {
      prune_path(net, l.id);
      out.push_back(l.id);
    } catch (const PruneError&) {
    }
  }
  return out;
}

std::string consumer_of(const Network& net, const std::string& producer_id) {
  return net.layers[prune_path(net, producer_id).consumer].id;
}

std::string producer_of(const Network& net, const std::string& consumer_id) {
  const std::size_t c = net.index_of(consumer_id);
  if (net.layers[c].kind != LayerKind::kConv2d) throw PruneError("layer " + consumer_id + " is not convolutional");
  std::size_t j = c;
  while (j > 0) {
    --j;
    const LayerSpec& l = net.layers[j];
    if (l.kind == LayerKind::kConv2d) {
      const PrunePath path = prune_path(net, l.id);
      if (path.consumer != c) throw PruneError("layer " + consumer_id + " is not fed by a prunable conv");
      return l.id;
    }
    if (!is_channelwise(l.kind)) break;
  }
  throw PruneError("input channels of " + consumer_id + " do not come from a prunable conv (block boundary)");
}

Network surgery(const Network& net, const std::string& consumer_id, const Chromosome& mask) {
  const std::size_t ci = net.index_of(consumer_id);
  const LayerSpec& consumer = net.layers[ci];
  if (consumer.kind != LayerKind::kConv2d) throw PruneError("layer " + consumer_id + " is not convolutional");
  if (mask.size() != consumer.in_channels) {
    throw ShapeError("mask length " + std::to_string(mask.size()) + " does not match the " +
                     std::to_string(consumer.in_channels) + " input channels of " + consumer_id);
  }
  const std::string producer_id = producer_of(net, consumer_id);
  const PrunePath path = prune_path(net, producer_id);
  const std::vector<std::size_t> keep = mask.kept();
  if (keep.empty()) throw PruneError("mask removes every channel of " + consumer_id);

  Network out = net;
  if (keep.size() == mask.size()) return out;

  LayerSpec& prod = out.layers[path.producer];
  for (auto& [r, t] : prod.params) t = take(t, keep, false);
  prod.out_channels = keep.size();
  for (std::size_t b : path.batchnorms) {
    LayerSpec& bn = out.layers[b];
    for (auto& [r, t] : bn.params) t = take(t, keep, false);
    bn.in_channels = bn.out_channels = keep.size();
  }
  LayerSpec& cons = out.layers[ci];
  cons.params.at(role::kWeight) = take(cons.params.at(role::kWeight), keep, true);
  cons.in_channels = keep.size();
  out.validate();
  return out;
}

LayerProblem build_layer_problem(const Network& net, const Dataset& data, const std::string& producer,
                                 const SamplerConfig& sampler, Rng& rng) {
  LayerProblem p;
  p.producer = producer;
  p.consumer = consumer_of(net, producer);
  p.volumes = sample_volumes(net, data, p.consumer, sampler, rng);
  p.hessian = compute_hessian(p.volumes);
  const LayerSpec& l = net.layers[net.index_of(p.consumer)];
  p.weight = l.param(role::kWeight);
  if (l.bias) p.bias = l.param(role::kBias);
  return p;
}

std::vector<std::string> SensitivityProfile::layers() const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (std::find(out.begin(), out.end(), e.layer) == out.end()) out.push_back(e.layer);
  }
  return out;
}

double SensitivityProfile::accuracy(const std::string& layer, double rate) const {
  for (const auto& e : entries) {
    if (e.layer == layer && e.rate == rate) return e.accuracy;
  }
  throw ConfigError("sensitivity profile has no entry for " + layer + " at rate " + std::to_string(rate));
}

std::string SensitivityProfile::csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "layer,rate,accuracy\n";
  for (const auto& e : entries) out << e.layer << ',' << e.rate << ',' << e.accuracy << '\n';
  return out.str();
}

SensitivityProfile sensitivity_scan(const Network& net, const Dataset& train, const Dataset& test,
                                    std::vector<std::string> layers, const std::vector<double>& rates,
                                    const GAConfig& ga, const SamplerConfig& sampler, Rng& rng) {
  if (rates.empty()) throw ConfigError("sensitivity scan needs at least one rate");
  for (double r : rates) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("sensitivity rates must lie in (0, 1)");
  }
  if (layers.empty()) layers = prunable_layers(net);
  SensitivityProfile profile;
  profile.baseline_accuracy = evaluate(net, test);
  for (const auto& layer : layers) {
    const LayerProblem p = build_layer_problem(net, train, layer, sampler, rng);
    for (double r : rates) {
      const EvolveResult res = evolve(p.hessian, p.weight, r, ga, rng);
      const Network pruned = surgery(net, p.consumer, res.best);
      profile.entries.push_back({layer, r, evaluate(pruned, test), res.best_error});
    }
  }
  return profile;
}

void PruningPlan::validate(const Network& net) const {
  const std::vector<std::string> prunable = prunable_layers(net);
  std::set<std::string> seen;
  auto claim = [&](const std::string& id) {
    if (!net.contains(id)) throw ConfigError("plan names unknown layer " + id);
    if (std::find(prunable.begin(), prunable.end(), id) == prunable.end()) {
      throw ConfigError("plan names layer " + id + ", which is not prunable");
    }
    if (!seen.insert(id).second) throw ConfigError("layer " + id + " appears in more than one plan group");
  };
  for (const auto& g : groups) {
    if (g.layers.empty()) throw ConfigError("plan group without layers");
    if (!(g.rate > 0.0 && g.rate < 1.0)) throw ConfigError("plan rates must lie in (0, 1)");
    for (const auto& id : g.layers) claim(id);
  }
  for (const auto& id : skip) claim(id);
}

PruningPlan PruningPlan::completed(const Network& net) const {
  validate(net);
  PruningPlan out = *this;
  std::set<std::string> covered(out.skip.begin(), out.skip.end());
  for (const auto& g : groups) covered.insert(g.layers.begin(), g.layers.end());
  for (const auto& id : prunable_layers(net)) {
    if (!covered.contains(id)) out.skip.push_back(id);
  }
  return out;
}

std::size_t PruningPlan::layer_count() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.layers.size();
  return n;
}

json PruningPlan::to_json() const {
  json gs = json::array();
  for (const auto& g : groups) gs.push_back({{"layers", g.layers}, {"rate", g.rate}});
  return {{"groups", gs}, {"skip", skip}};
}

PruningPlan PruningPlan::from_json(const json& j) {
  PruningPlan p;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key != "groups" && key != "skip") throw ConfigError("unknown plan key '" + key + "'");
    }
    for (const auto& g : j.value("groups", json::array())) {
      for (const auto& [key, value] : g.items()) {
        if (key != "layers" && key != "rate") throw ConfigError("unknown plan group key '" + key + "'");
      }
      p.groups.push_back({g.at("layers").get<std::vector<std::string>>(), g.at("rate").get<double>()});
    }
    p.skip = j.value("skip", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed plan: ") + e.what());
  }
  return p;
}

PruningPlan make_plan(const std::vector<std::string>& prunable,
                      const std::vector<std::vector<std::string>>& groups,
                      const std::vector<double>& rates) {
  if (rates.empty()) throw ConfigError("a plan needs at least one rate");
  if (rates.size() != groups.size()) throw ConfigError("one rate per plan group is required");
  PruningPlan plan;
  std::set<std::string> seen;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw ConfigError("plan group " + std::to_string(g) + " is empty");
    if (!(rates[g] > 0.0 && rates[g] < 1.0)) throw ConfigError("plan rates must lie in (0, 1)");
    for (const auto& id : groups[g]) {
      if (std::find(prunable.begin(), prunable.end(), id) == prunable.end()) {
        throw ConfigError("layer " + id + " is not prunable");
      }
      if (!seen.insert(id).second) throw ConfigError("plan groups overlap at layer " + id);
    }
    plan.groups.push_back({groups[g], rates[g]});
  }
  for (const auto& id : prunable) {
    if (!seen.contains(id)) plan.skip.push_back(id);
  }
  return plan;
}

PruningPlan make_plan(const SensitivityProfile& profile,
                      const std::vector<std::vector<std::string>>& groups,
                      const std::vector<double>& rates) {
  return make_plan(profile.layers(), groups, rates);
}

std::vector<double> suggest_rates(const SensitivityProfile& profile,
                                  const std::vector<std::vector<std::string>>& groups,
                                  double max_drop) {
  std::vector<double> scanned;
  for (const auto& e : profile.entries) {
    if (std::find(scanned.begin(), scanned.end(), e.rate) == scanned.end()) scanned.push_back(e.rate);
  }
  std::sort(scanned.begin(), scanned.end());
  std::vector<double> out;
  for (const auto& g : groups) {
    double best = 0.0;
    for (double r : scanned) {
      double drop = 0.0;
      for (const auto& id : g) drop += profile.baseline_accuracy - profile.accuracy(id, r);
      if (drop / static_cast<double>(g.size()) <= max_drop) best = r;
    }
    out.push_back(best);
  }
  return out;
}

void FinetuneConfig::validate() const {
  if (!(inter_lr > 0.0) || !(final_lr_start > 0.0) || !(final_lr_end > 0.0)) {
    throw ConfigError("fine-tuning learning rates must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  augment.validate();
}

json PruneReport::to_json() const {
  json layers_json = json::array();
  for (const auto& l : layers) {
    layers_json.push_back({{"layer", l.layer},
                           {"consumer", l.consumer},
                           {"rate", l.rate},
                           {"channels", l.channels},
                           {"kept", l.kept},
                           {"taylor_error", l.taylor_error},
                           {"direct_error", l.direct_error},
                           {"accuracy_pruned", l.accuracy_pruned},
                           {"accuracy_finetuned", l.accuracy_finetuned},
                           {"stats", stats_json(l.stats)},
                           {"mask", l.mask_hex},
                           {"finetune", trajectory_json(l.finetune)}});
  }
  return {{"baseline_accuracy", baseline_accuracy},
          {"final_accuracy", final_accuracy},
          {"before", stats_json(before)},
          {"after", stats_json(after)},
          {"layers_pruned", layers.size()},
          {"layers", layers_json},
          {"final_finetune", trajectory_json(final_finetune)}};
}

std::string PruneReport::csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "layer,consumer,rate,channels,kept,taylor_error,direct_error,accuracy_pruned,"
         "accuracy_finetuned,params,flops\n";
  for (const auto& l : layers) {
    out << l.layer << ',' << l.consumer << ',' << l.rate << ',' << l.channels << ',' << l.kept << ','
        << l.taylor_error << ',' << l.direct_error << ',' << l.accuracy_pruned << ','
        << l.accuracy_finetuned << ',' << l.stats.params << ',' << l.stats.flops << '\n';
  }
  return out.str();
}

PruneResult prune_model(const Network& net, const PruningPlan& plan, const Dataset& train,
                        const Dataset& test, const PipelineConfig& cfg, const Network& teacher,
                        Rng& rng) {
  cfg.ga.validate();
  cfg.sampler.validate();
  cfg.finetune.validate();
  cfg.distill.validate();
  plan.validate(net);

  std::vector<std::pair<std::string, double>> steps;
  for (const auto& g : plan.groups) {
    for (const auto& id : g.layers) steps.emplace_back(id, g.rate);
  }
  std::sort(steps.begin(), steps.end(),
            [&](const auto& a, const auto& b) { return net.index_of(a.first) < net.index_of(b.first); });

  PruneResult result{net, {}};
  PruneReport& report = result.report;
  report.before = model_stats(net);
  report.baseline_accuracy = evaluate(net, test);
  const AugmentPolicy* augment = cfg.finetune.augment.enabled ? &cfg.finetune.augment : nullptr;

  for (const auto& [layer, rate] : steps) {
    try {
      LayerReport lr;
      lr.layer = layer;
      lr.rate = rate;
      const LayerProblem p = build_layer_problem(result.net, train, layer, cfg.sampler, rng);
      lr.consumer = p.consumer;
      lr.channels = p.hessian.channels;
      lr.ga = evolve(p.hessian, p.weight, rate, cfg.ga, rng);
      lr.mask = lr.ga.best;
      lr.mask_hex = lr.mask.hex();
      lr.kept = lr.mask.popcount();
      lr.taylor_error = lr.ga.best_error;
      lr.direct_error = direct_error(p.volumes, p.weight, p.bias ? &*p.bias : nullptr, lr.mask);
      result.net = surgery(result.net, p.consumer, lr.mask);
      lr.accuracy_pruned = evaluate(result.net, test);
      if (cfg.finetune.inter_epochs > 0) {
        DistillConfig d = cfg.distill;
        d.epochs = cfg.finetune.inter_epochs;
        d.optimizer = {cfg.finetune.inter_lr, cfg.finetune.momentum, cfg.finetune.weight_decay,
                       cfg.finetune.batch_size, {}};
        lr.finetune = finetune_kd(result.net, teacher, train, d, rng, augment);
      }
      lr.accuracy_finetuned = evaluate(result.net, test);
      lr.stats = model_stats(result.net);
      report.layers.push_back(std::move(lr));
    } catch (const ConfigError& e) {
      throw ConfigError("while pruning layer " + layer + ": " + e.what());
    } catch (const Error& e) {
      throw PruneError("while pruning layer " + layer + ": " + e.what());
    }
  }

  if (!steps.empty() && cfg.finetune.final_epochs > 0) {
    DistillConfig d = cfg.distill;
    d.epochs = cfg.finetune.final_epochs;
    d.optimizer = geometric_decay({cfg.finetune.final_lr_start, cfg.finetune.momentum,
                                   cfg.finetune.weight_decay, cfg.finetune.batch_size, {}},
                                  cfg.finetune.final_lr_start, cfg.finetune.final_lr_end,
                                  static_cast<int>(cfg.finetune.final_epochs));
    try {
      report.final_finetune = finetune_kd(result.net, teacher, train, d, rng, augment);
    } catch (const Error& e) {
      throw PruneError(std::string("final fine-tuning: ") + e.what());
    }
  }
  report.after = model_stats(result.net);
  report.final_accuracy = steps.empty() ? report.baseline_accuracy : evaluate(result.net, test);
  return result;
}

BaselineCriterion baseline_from_string(const std::string& name) {
  if (name == "random") return BaselineCriterion::kRandom;
  if (name == "weight-sum") return BaselineCriterion::kWeightSum;
  if (name == "taylor1") return BaselineCriterion::kTaylor1;
  if (name == "greedy") return BaselineCriterion::kGreedy;
  throw ConfigError("unknown baseline criterion '" + name + "'");
}

std::string to_string(BaselineCriterion c) {
  switch (c) {
    case BaselineCriterion::kRandom: return "random";
    case BaselineCriterion::kWeightSum: return "weight-sum";
    case BaselineCriterion::kTaylor1: return "taylor1";
    case BaselineCriterion::kGreedy: return "greedy";
  }
  return "unknown";
}

Chromosome select_baseline(BaselineCriterion criterion, const BaselineContext& ctx, std::size_t k,
                           Rng& rng) {
  const std::size_t C = ctx.channels;
  if (k == 0 || k > C) throw ConfigError("baseline K must lie in [1, C]");
  switch (criterion) {
    case BaselineCriterion::kRandom:
      return mask_of(C, rng.sample_without_replacement(C, k));

    case BaselineCriterion::kWeightSum: {
      if (!ctx.producer_weight) throw ConfigError("weight-sum needs the producer weights");
      const Tensor& w = *ctx.producer_weight;
      if (w.rank() < 1 || w.dim(0) != C) throw ShapeError("producer weight does not have C filters");
      const std::size_t per = w.size() / C;
      std::vector<double> scores(C, 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t q = 0; q < per; ++q) scores[c] += std::abs(w[c * per + q]);
      }
      return mask_of(C, top_k(scores, k));
    }

    case BaselineCriterion::kTaylor1: {
      if (!ctx.activations || !ctx.gradients) throw ConfigError("taylor1 needs activation and gradient snapshots");
      const Tensor& a = *ctx.activations;
      const Tensor& g = *ctx.gradients;
      if (a.shape() != g.shape() || a.rank() != 4 || a.dim(1) != C) {
        throw ShapeError("taylor1 snapshots must be N x C x H x W with matching shapes");
      }
      const std::size_t N = a.dim(0), hw = a.dim(2) * a.dim(3);
      std::vector<double> scores(C, 0.0);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t off = (n * C + c) * hw;
          for (std::size_t q = 0; q < hw; ++q) scores[c] += a[off + q] * g[off + q];
        }
      }
      for (double& s : scores) s = std::abs(s / static_cast<double>(N * hw));
      return mask_of(C, top_k(scores, k));
    }

    case BaselineCriterion::kGreedy: {
      if (!ctx.volumes || !ctx.consumer_weight) throw ConfigError("greedy needs volumes and consumer weights");
      Chromosome mask(C, 1);
      while (mask.popcount() > k) {
        std::size_t best_c = C;
        double best_e = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          if (!mask[c]) continue;
          mask[c] = 0;
          const double e = direct_error(*ctx.volumes, *ctx.consumer_weight, ctx.consumer_bias, mask);
          mask[c] = 1;
          if (best_c == C || e < best_e) {
            best_c = c;
            best_e = e;
          }
        }
        mask[best_c] = 0;
      }
      return mask;
    }
  }
  throw ConfigError("unknown baseline criterion");
}

TaylorSnapshot collect_taylor_snapshot(const Network& net, const Dataset& data,
                                       const std::string& consumer_id, std::size_t samples) {
  const std::size_t ci = net.index_of(consumer_id);
  const std::size_t n = std::min(samples, data.size());
  if (n == 0) throw ConfigError("taylor snapshot needs at least one sample");
  const Shape in = net.input_shape_of(ci);
  TaylorSnapshot snap{Tensor({n, in[0], in[1], in[2]}), Tensor({n, in[0], in[1], in[2]})};
  const std::size_t per = in[0] * in[1] * in[2];
  constexpr std::size_t kBatch = 128;
  for (std::size_t start = 0; start < n; start += kBatch) {
    const std::size_t end = std::min(n, start + kBatch);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tape tape = forward_tape(net, data.gather(idx), Mode::kInference);
    Tensor g;
    softmax_cross_entropy(tape.logits(), data.gather_labels(idx), &g);
    // Per-sample loss gradients rather than gradients of the batch mean.
    for (double& v : g.storage()) v *= static_cast<double>(idx.size());
    BackwardOptions bo;
    if (ci == 0) {
      bo.want_input_grad = true;
    } else {
      bo.capture_output_grads.insert(ci - 1);
    }
    const BackwardResult br = backward(net, tape, g, bo);
    const Tensor& act = tape.input_of(ci);
    const Tensor& grad = ci == 0 ? br.input_grad : br.output_grads.at(ci - 1);
    std::copy(act.data(), act.data() + act.size(), snap.activations.data() + start * per);
    std::copy(grad.data(), grad.data() + grad.size(), snap.gradients.data() + start * per);
  }
  return snap;
}

}  // namespace chprune
