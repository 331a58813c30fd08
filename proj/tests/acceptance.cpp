// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance --work DIR --cli PATH [--only N ...]

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "chprune/config.hpp"
#include "chprune/distill.hpp"
#include "chprune/fitness.hpp"
#include "chprune/genetic.hpp"
#include "chprune/model_io.hpp"
#include "chprune/platform.hpp"
#include "chprune/pruner.hpp"
#include "helpers.hpp"

using namespace chprune;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out << std::setprecision(precision) << v;
  return out.str();
}

// Best-so-far error of every GA run in this process, for the elitism check.
std::vector<std::vector<GenerationLog>> g_logs;

void record_log(const EvolveResult& r) { g_logs.push_back(r.log); }

bool within_3_sigma(double count, double trials, double p) {
  return std::abs(count - trials * p) <= 3.0 * std::sqrt(trials * p * (1.0 - p));
}

// 1. VGG-16 accounting.
Outcome architecture_accounting() {
  const auto t0 = Clock::now();
  const Network net = make_vgg16(10, {3, 32, 32});
  const ModelStats s = model_stats(net);
  const double secs = seconds_since(t0);
  const double dp = std::abs(static_cast<double>(s.params) - 14.7e6) / 14.7e6;
  const double df = std::abs(static_cast<double>(s.flops) - 6.26e8) / 6.26e8;
  return {dp <= 0.02 && df <= 0.02 && secs < 1.0,
          "params " + std::to_string(s.params) + " (" + fmt(100 * dp, 3) + "% off), flops " +
              std::to_string(s.flops) + " (" + fmt(100 * df, 3) + "% off), " + fmt(secs, 3) + " s"};
}

// 2. direct == 2 x taylor on 50 random fixtures.
Outcome taylor_exactness() {
  const auto t0 = Clock::now();
  Rng rng(2);
  double worst = 0.0;
  int bad = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t c = 1 + rng.below(32);
    const std::size_t k = 1 + rng.below(3);
    const std::size_t f = 1 + rng.below(8);
    const auto fx = testing::random_fixture(c, k, f, 500, rng);
    const HessianCache h = compute_hessian(fx.volumes);
    Chromosome m(c, 0);
    for (std::size_t i = 0; i < c; ++i) m[i] = rng.bernoulli(0.5) ? 1 : 0;
    m[rng.below(c)] = 0;  // at least one channel pruned, so both errors are nonzero
    const double te = taylor_error(h, fx.weight, m);
    const double de = direct_error(fx.volumes, fx.weight, &fx.bias, m);
    worst = std::max(worst, std::abs(de - 2.0 * te) / std::max(std::abs(de), 2.0 * std::abs(te)));
    if (!testing::close_rel(de, 2.0 * te, 1e-6, 1e-12)) ++bad;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 30.0,
          "50 fixtures, " + std::to_string(bad) + " outside 1e-6, worst rel " + fmt(worst, 3) + ", " +
              fmt(secs, 3) + " s"};
}

// 3. GA against the exhaustive optimum over all 252 masks.
Outcome ga_optimality() {
  const auto t0 = Clock::now();
  Rng frng(3);
  const auto fx = testing::random_fixture(10, 3, 8, 500, frng);
  const HessianCache h = compute_hessian(fx.volumes);
  const TaylorEvaluator eval(h, fx.weight);
  double best = std::numeric_limits<double>::infinity();
  std::size_t masks = 0;
  for (unsigned bits = 0; bits < (1u << 10); ++bits) {
    if (__builtin_popcount(bits) != 5) continue;
    Chromosome m(10, 0);
    for (std::size_t i = 0; i < 10; ++i) m[i] = (bits >> i) & 1u;
    best = std::min(best, eval(m));
    ++masks;
  }
  GAConfig cfg;
  cfg.population = 20;
  cfg.max_iterations = 100;
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const EvolveResult r = evolve(h, fx.weight, 0.5, cfg, rng);
    record_log(r);
    if (r.best.popcount() == 5 && r.best_error <= best * 1.01) ++hits;
  }
  const double secs = seconds_since(t0);
  return {masks == 252 && hits >= 95 && secs < 120.0,
          std::to_string(hits) + "/100 runs within 1% of the minimum over " + std::to_string(masks) +
              " masks, " + fmt(secs, 3) + " s"};
}

// 5. Zero filters removed by surgery leave the logits unchanged.
Outcome surgery_equivalence() {
  Rng rng(5);
  Network net = make_small_cnn(10, {1, 16, 16}, {16, 32, 32, 32});
  init_parameters(net, rng);
  testing::randomize(net, rng, 0.3);
  std::map<std::string, Chromosome> masks;
  for (const std::string producer : {"conv1", "conv2", "conv3"}) {
    const PrunePath path = prune_path(net, producer);
    LayerSpec& p = net.layers[path.producer];
    Chromosome m(p.out_channels, 1);
    for (std::size_t c = 0; c < m.size(); ++c) m[c] = rng.bernoulli(0.5) ? 1 : 0;
    m[0] = 1;
    Tensor& w = p.param(role::kWeight);
    const std::size_t per = w.size() / p.out_channels;
    for (std::size_t c = 0; c < m.size(); ++c) {
      if (m[c]) continue;
      std::fill(w.data() + c * per, w.data() + (c + 1) * per, 0.0);
      if (p.bias) p.param(role::kBias)[c] = 0.0;
      // A zero filter followed by BN still emits beta - gamma*mean/std; the
      // channel is only truly empty when that shift is zero too.
      for (std::size_t b : path.batchnorms) {
        net.layers[b].param(role::kBeta)[c] = 0.0;
        net.layers[b].param(role::kRunningMean)[c] = 0.0;
      }
    }
    masks[producer] = m;
  }
  Network pruned = net;
  for (const auto& [producer, m] : masks) pruned = surgery(pruned, consumer_of(pruned, producer), m);
  const Tensor x = testing::random_tensor({100, 1, 16, 16}, rng);
  const double diff = max_abs_diff(forward(net, x).logits, forward(pruned, x).logits);
  const ModelStats a = model_stats(net), b = model_stats(pruned);
  return {diff <= 1e-6 && b.params < a.params,
          "max logit change " + fmt(diff, 3) + " on 100 inputs, params " + std::to_string(a.params) + " -> " +
              std::to_string(b.params)};
}

// 6. Mutation flip rate and roulette frequencies.
Outcome operator_statistics() {
  constexpr int kTrials = 200000;
  int bad = 0;
  Rng rng(6);
  for (const auto& [len, p] : std::vector<std::pair<std::size_t, double>>{{8, 0.1}, {32, 0.1}, {5, 0.5}}) {
    std::vector<double> flips(len, 0.0);
    const Chromosome base(len, 0);
    for (int t = 0; t < kTrials; ++t) {
      const Chromosome m = mutate(base, p, rng);
      for (std::size_t i = 0; i < len; ++i) flips[i] += m[i];
    }
    for (double f : flips) bad += !within_3_sigma(f, kTrials, p / static_cast<double>(len));
  }
  const std::vector<double> fitness{0.5, 1.0, 2.0, 4.0, 0.0, 2.5};
  const double total = std::accumulate(fitness.begin(), fitness.end(), 0.0);
  std::vector<double> picks(fitness.size(), 0.0);
  for (int t = 0; t < kTrials; ++t) ++picks[roulette_select(fitness, rng)];
  for (std::size_t i = 0; i < fitness.size(); ++i) bad += !within_3_sigma(picks[i], kTrials, fitness[i] / total);
  const std::size_t tests = 8 + 32 + 5 + fitness.size();
  return {bad == 0, std::to_string(kTrials) + " trials per test, " + std::to_string(bad) + " of " +
                        std::to_string(tests) + " frequencies outside 3 sigma"};
}

// 7. Finite-difference gradient checks for every layer kind and the AT term.
Outcome gradient_checks() {
  auto seq = [](Shape input, std::vector<LayerSpec> layers) {
    Network n;
    n.input_shape = std::move(input);
    n.layers = std::move(layers);
    n.validate();
    return n;
  };
  const std::size_t flat = 3 * 3 * 3;
  std::vector<std::pair<std::string, Network>> nets;
  nets.push_back({"conv", seq({2, 5, 5}, {conv_layer("c", 2, 3, 3, 2, 1, true), plain_layer("f", LayerKind::kFlatten),
                                          linear_layer("fc", flat, 3)})});
  nets.push_back({"conv-nobias", seq({2, 5, 5}, {conv_layer("c", 2, 3, 3, 1, 0, false),
                                                 plain_layer("f", LayerKind::kFlatten),
                                                 linear_layer("fc", flat, 3, false)})});
  nets.push_back({"batchnorm", seq({2, 5, 5}, {conv_layer("c", 2, 3, 3, 1, 0), batchnorm_layer("bn", 3),
                                               plain_layer("f", LayerKind::kFlatten), linear_layer("fc", flat, 3)})});
  nets.push_back({"relu", seq({2, 5, 5}, {conv_layer("c", 2, 3, 3, 1, 0), plain_layer("r", LayerKind::kRelu),
                                          plain_layer("f", LayerKind::kFlatten), linear_layer("fc", flat, 3)})});
  nets.push_back({"maxpool", seq({2, 6, 6}, {conv_layer("c", 2, 3, 3, 1, 1), plain_layer("p", LayerKind::kMaxPool, 2, 2),
                                             plain_layer("f", LayerKind::kFlatten), linear_layer("fc", flat, 3)})});
  nets.push_back({"avgpool", seq({2, 6, 6}, {conv_layer("c", 2, 3, 3, 1, 1), plain_layer("p", LayerKind::kAvgPool, 2, 2),
                                             plain_layer("f", LayerKind::kFlatten), linear_layer("fc", flat, 3)})});
  nets.push_back({"gap+linear", seq({2, 5, 5}, {conv_layer("c", 2, 3, 3, 1, 1),
                                                plain_layer("g", LayerKind::kGlobalAvgPool), linear_layer("fc", 3, 4)})});
  nets.push_back({"residual", seq({3, 4, 4}, {conv_layer("a", 3, 3, 3, 1, 1), plain_layer("ar", LayerKind::kRelu),
                                              conv_layer("b", 3, 3, 3, 1, 1), residual_layer("add", "ar", 3, 3, 1),
                                              plain_layer("g", LayerKind::kGlobalAvgPool), linear_layer("fc", 3, 2)})});
  nets.push_back({"residual-projection",
                  seq({3, 4, 4}, {conv_layer("a", 3, 3, 3, 1, 1), plain_layer("ar", LayerKind::kRelu),
                                  conv_layer("b", 3, 4, 3, 2, 1), residual_layer("add", "ar", 3, 4, 2),
                                  plain_layer("g", LayerKind::kGlobalAvgPool), linear_layer("fc", 4, 2)})});
  nets.push_back({"small-cnn", make_small_cnn(3, {1, 8, 8}, {3, 4, 4, 5})});
  nets.push_back({"bottleneck-resnet", make_bottleneck_resnet(3, {3, 8, 8}, {2, 4}, 1, 2)});

  std::ostringstream detail;
  bool ok = true;
  std::size_t checked = 0;
  double worst = 0.0;
  std::uint64_t seed = 70;
  for (auto& [name, net] : nets) {
    Rng rng(seed++);
    testing::randomize(net, rng, 0.5);
    const Tensor x = testing::random_tensor(Shape{3, net.input_shape[0], net.input_shape[1], net.input_shape[2]}, rng);
    const auto y = testing::random_labels(3, net.num_classes(), rng);
    const testing::GradCheck r = testing::check_gradients(net, x, y);
    checked += r.checked;
    worst = std::max(worst, r.worst);
    if (r.failed || r.checked == 0 || r.straddled * 10 > r.checked) {
      ok = false;
      detail << name << " failed " << r.failed << " (worst " << fmt(r.worst, 3) << " at " << r.worst_at << "); ";
    }
  }
  // Attention term: CE + beta * AT through the whole student.
  Rng rng(80);
  Network student = make_small_cnn(3, {1, 8, 8}, {3, 4, 4, 5});
  Network teacher = make_small_cnn(3, {1, 8, 8}, {4, 6, 6, 5});
  testing::randomize(student, rng, 0.5);
  testing::randomize(teacher, rng, 0.5);
  const Tensor x = testing::random_tensor({3, 1, 8, 8}, rng);
  const auto y = testing::random_labels(3, 3, rng);
  const testing::GradCheck kd = testing::check_kd_gradients(student, teacher, x, y, 2.0);
  checked += kd.checked;
  worst = std::max(worst, kd.worst);
  if (kd.failed || kd.checked == 0 || kd.straddled * 10 > kd.checked) {
    ok = false;
    detail << "attention failed " << kd.failed << " (worst " << fmt(kd.worst, 3) << " at " << kd.worst_at << "); ";
  }
  detail << nets.size() << " networks + attention term, " << checked << " entries, worst rel " << fmt(worst, 3);
  return {ok, detail.str()};
}

// 8. Desk-scale end-to-end on generated digits.
Outcome desk_scale(std::ostream& log) {
  const auto t0 = Clock::now();
  DataConfig dc;  // digits, 10k train / 2k test, 16x16
  const Dataset train = load_dataset(dataset_source(dc, "train", {}), "train");
  const Dataset test = load_dataset(dataset_source(dc, "test", {}), "test", &train.normalization);

  Rng rng(7);
  Network base = make_small_cnn(10, {1, 16, 16});
  init_parameters(base, rng);
  SgdOptimizer opt({0.05, 0.9, 5e-4, 128, {{5, 0.1}, {7, 0.1}}});
  for (int e = 0; e < 8; ++e) train_epoch(base, train, opt, rng, e);
  const double base_acc = evaluate(base, test);
  log << "  baseline accuracy " << base_acc << " after 8 epochs (" << fmt(seconds_since(t0), 3) << " s)\n";

  // (a), (b): layer-wise selection on the trained network.
  const std::vector<std::string> middle{"conv2", "conv3"};
  constexpr int kTrials = 20;
  std::map<std::string, std::vector<double>> ga_err, rnd_err, ws_err, greedy_err;
  int ga_wins = 0;
  for (int t = 0; t < kTrials; ++t) {
    Rng trng(1000 + static_cast<std::uint64_t>(t));
    bool trial_ok = true;
    for (const auto& id : middle) {
      const LayerProblem p = build_layer_problem(base, train, id, SamplerConfig{}, trng);
      const std::size_t c = p.hessian.channels;
      const std::size_t k = kept_channels(c, 0.5);
      const EvolveResult r = evolve(p.hessian, p.weight, 0.5, GAConfig{}, trng);
      record_log(r);
      const Tensor* bias = p.bias ? &*p.bias : nullptr;
      const double ga = direct_error(p.volumes, p.weight, bias, r.best);
      BaselineContext ctx;
      ctx.channels = c;
      ctx.producer_weight = &base.layers[base.index_of(id)].param(role::kWeight);
      ctx.volumes = &p.volumes;
      ctx.consumer_weight = &p.weight;
      ctx.consumer_bias = bias;
      const double rnd = direct_error(p.volumes, p.weight, bias, select_baseline(BaselineCriterion::kRandom, ctx, k, trng));
      const double ws = direct_error(p.volumes, p.weight, bias, select_baseline(BaselineCriterion::kWeightSum, ctx, k, trng));
      const double gr = direct_error(p.volumes, p.weight, bias, select_baseline(BaselineCriterion::kGreedy, ctx, k, trng));
      ga_err[id].push_back(ga);
      rnd_err[id].push_back(rnd);
      ws_err[id].push_back(ws);
      greedy_err[id].push_back(gr);
      if (!(ga <= rnd)) trial_ok = false;
    }
    ga_wins += trial_ok;
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  bool b_ok = true;
  for (const auto& id : middle) {
    const double ga_mean = mean(ga_err[id]);
    int greedy_worse = 0;
    for (int t = 0; t < kTrials; ++t) {
      if (ws_err[id][t] < ga_mean || rnd_err[id][t] < ga_mean) b_ok = false;
      greedy_worse += greedy_err[id][t] >= ga_err[id][t];
    }
    log << "  " << id << ": mean dE ga " << fmt(ga_mean) << ", random " << fmt(mean(rnd_err[id])) << ", weight-sum "
        << fmt(mean(ws_err[id])) << ", greedy " << fmt(mean(greedy_err[id])) << " (greedy >= ga in " << greedy_worse
        << "/" << kTrials << ")\n";
  }
  const bool a_ok = ga_wins >= 19;

  // (c): the full pipeline with attention-transfer fine-tuning.
  PipelineConfig pc;
  pc.finetune.inter_epochs = 1;
  pc.finetune.inter_lr = 1e-2;
  pc.finetune.final_epochs = 2;
  pc.finetune.final_lr_start = 1e-2;
  pc.finetune.final_lr_end = 1e-4;
  pc.finetune.batch_size = 32;
  pc.distill.beta = 0.1;
  const PruningPlan plan = make_plan(prunable_layers(base), {middle}, {0.5});
  Rng prng(3);
  const PruneResult pruned = prune_model(base, plan, train, test, pc, base, prng);
  for (const auto& l : pruned.report.layers) record_log(l.ga);
  const double drop = base_acc - pruned.report.final_accuracy;
  const bool c_ok = drop <= 0.01;
  log << "  pipeline: accuracy " << base_acc << " -> " << pruned.report.final_accuracy << ", params "
      << pruned.report.before.params << " -> " << pruned.report.after.params << ", flops "
      << pruned.report.before.flops << " -> " << pruned.report.after.flops << " (" << fmt(seconds_since(t0), 3)
      << " s)\n";

  // (d): paired KD vs plain fine-tuning from the same surgically pruned net.
  int kd_wins = 0;
  std::ostringstream pairs;
  for (std::uint64_t s = 0; s < 10; ++s) {
    PipelineConfig cut = pc;
    cut.finetune.inter_epochs = 0;
    cut.finetune.final_epochs = 0;
    Rng srng(500 + s);
    const PruneResult raw = prune_model(base, plan, train, test, cut, base, srng);
    for (const auto& l : raw.report.layers) record_log(l.ga);
    DistillConfig d;
    d.epochs = 2;
    d.optimizer = geometric_decay({1e-2, 0.9, 5e-4, 32, {}}, 1e-2, 1e-4, 2);
    d.beta = 0.1;
    Network kd = raw.net, plain = raw.net;
    Rng r1(900 + s), r2(900 + s);
    finetune_kd(kd, base, train, d, r1);
    d.beta = 0.0;
    finetune_kd(plain, base, train, d, r2);
    const double a_kd = evaluate(kd, test), a_plain = evaluate(plain, test);
    kd_wins += a_kd >= a_plain;
    pairs << ' ' << fmt(a_kd, 5) << '/' << fmt(a_plain, 5);
  }
  log << "  kd/plain:" << pairs.str() << '\n';
  const bool d_ok = kd_wins >= 7;

  const double secs = seconds_since(t0);
  const bool base_ok = base_acc >= 0.97;
  std::ostringstream detail;
  detail << "baseline " << fmt(base_acc) << (base_ok ? "" : " (<0.97)") << "; (a) ga<=random " << ga_wins << "/20"
         << "; (b) " << (b_ok ? "baselines never beat ga mean" : "a baseline beat the ga mean") << "; (c) drop "
         << fmt(100 * drop, 3) << " pts; (d) kd>=plain " << kd_wins << "/10; " << fmt(secs, 4) << " s";
  return {base_ok && a_ok && b_ok && c_ok && d_ok && secs < 1800.0, detail.str()};
}

// 4. Non-increasing best error in every GA run of this process.
Outcome elitism_monotonicity() {
  std::size_t violations = 0, generations = 0;
  for (const auto& log : g_logs) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : log) {
      ++generations;
      if (g.best_error > best) ++violations;
      best = std::min(best, g.best_error);
    }
  }
  return {violations == 0 && !g_logs.empty(), std::to_string(violations) + " violations over " +
                                                  std::to_string(g_logs.size()) + " runs / " +
                                                  std::to_string(generations) + " generations"};
}

// 9. CLI re-runs with identical config and seed are byte-identical.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "run_meta.json") continue;
    out[fs::relative(e.path(), dir).string()] = read_text_file(e.path());
  }
  return out;
}

Outcome determinism(const fs::path& work, const std::string& cli) {
  if (cli.empty()) return {false, "no --cli given"};
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const json data = {{"format", "digits"}, {"seed", 4}, {"train_size", 1500}, {"test_size", 500}};
  const std::string model = (dir / "train" / "model").string();
  const std::string pruned = (dir / "prune" / "model").string();
  const std::vector<std::pair<std::string, json>> runs{
      {"train",
       {{"command", "train"}, {"data", data}, {"train", {{"epochs", 2}, {"learning_rate", 0.05}, {"batch_size", 64}}}}},
      {"stats", {{"command", "stats"}, {"model", {{"path", model}}}}},
      {"eval", {{"command", "eval"}, {"model", {{"path", model}}}, {"data", data}}},
      {"sensitivity",
       {{"command", "sensitivity"},
        {"model", {{"path", model}}},
        {"data", data},
        {"sensitivity", {{"rates", {0.25, 0.5}}}},
        {"ga", {{"max_iterations", 30}}}}},
      {"prune",
       {{"command", "prune"},
        {"model", {{"path", model}}},
        {"data", data},
        {"max_workers", 2},
        {"plan", {{"groups", {{{"layers", {"conv2", "conv3"}}, {"rate", 0.5}}}}}},
        {"ga", {{"max_iterations", 40}}},
        {"finetune", {{"inter_epochs", 1}, {"final_epochs", 1}, {"batch_size", 64}}},
        {"distill", {{"beta", 0.1}}}}},
      {"finetune",
       {{"command", "finetune"},
        {"model", {{"path", pruned}}},
        {"teacher_path", model},
        {"data", data},
        {"distill", {{"beta", 0.1}, {"epochs", 1}, {"learning_rate", 0.01}, {"batch_size", 64}}}}},
  };
  std::size_t files = 0;
  std::vector<std::string> differing;
  for (const auto& [name, body] : runs) {
    json cfg = body;
    cfg["seed"] = 11;
    cfg["output_dir"] = (dir / name).string();
    const fs::path cfg_path = dir / (name + ".json");
    write_text_file(cfg_path, cfg.dump(2));
    std::map<std::string, std::string> first;
    for (int rep = 0; rep < 2; ++rep) {
      fs::remove_all(dir / name);
      const std::string cmd = "\"" + cli + "\" --config \"" + cfg_path.string() + "\" > \"" +
                              (dir / (name + ".log")).string() + "\" 2>&1";
      const int status = std::system(cmd.c_str());
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        return {false, name + " exited with status " + std::to_string(WEXITSTATUS(status))};
      }
      if (rep == 0) {
        first = snapshot(dir / name);
      } else if (snapshot(dir / name) != first) {
        differing.push_back(name);
      }
    }
    files += first.size();
  }
  std::string detail = std::to_string(runs.size()) + " commands, " + std::to_string(files) + " artifacts compared";
  if (!differing.empty()) {
    detail += "; differing:";
    for (const auto& d : differing) detail += " " + d;
  }
  return {differing.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance criteria"};
  std::string work = "acceptance_work";
  std::string cli;
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--cli", cli, "Path to the chprune executable");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  // Criterion 4 reads the GA logs of 3 and 8, so it runs after them.
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, architecture_accounting},
      {2, taylor_exactness},
      {3, ga_optimality},
      {5, surgery_equivalence},
      {6, operator_statistics},
      {7, gradient_checks},
      {8, [] { return desk_scale(std::cout); }},
      {4, elitism_monotonicity},
      {9, [&] { return determinism(work, cli); }},
  };
  const std::map<int, std::string> names{{1, "architecture accounting"}, {2, "taylor exactness"},
                                         {3, "GA vs exhaustive optimum"}, {4, "elitism monotonicity"},
                                         {5, "surgery no-op equivalence"}, {6, "operator statistics"},
                                         {7, "gradient checks"},          {8, "desk-scale end-to-end"},
                                         {9, "determinism"}};
  std::map<int, std::string> lines;
  bool all = true;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << names.at(id) << "): " << o.detail
         << " [" << fmt(seconds_since(t0), 3) << " s]";
    std::cout << line.str() << std::endl;
    lines[id] = line.str();
    all = all && o.pass;
  }
  std::cout << "\nsummary\n";
  for (const auto& [id, l] : lines) std::cout << l << '\n';
  return all ? 0 : 1;
}
