#include "chprune/run.hpp"

#include <chrono>
#include <ctime>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "chprune/distill.hpp"
#include "chprune/engine.hpp"
#include "chprune/errors.hpp"
#include "chprune/genetic.hpp"
#include "chprune/model_io.hpp"
#include "chprune/network.hpp"
#include "chprune/pruner.hpp"

namespace chprune {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

json stats_json(const ModelStats& s) { return {{"params", s.params}, {"flops", s.flops}}; }

Network load_or_build(const RunConfig& cfg, Rng& rng) {
  if (!cfg.model.path.empty()) return load_model(cfg.resolve(cfg.model.path));
  Network net = make_architecture(cfg.model.architecture, cfg.model.num_classes, cfg.model.input_shape);
  init_parameters(net, rng);
  return net;
}

json run_train(const RunConfig& cfg, const fs::path& out, Rng& rng, std::ostream& log) {
  auto [train, test] = load_splits(cfg);
  Network net = load_or_build(cfg, rng);
  SgdOptimizer opt(cfg.train.optimizer);
  const AugmentPolicy* augment = cfg.train.augment.enabled ? &cfg.train.augment : nullptr;
  std::ostringstream csv;
  csv.precision(17);
  csv << "epoch,loss,test_accuracy\n";
  double acc = 0.0;
  for (std::size_t e = 0; e < cfg.train.epochs; ++e) {
    const double loss = train_epoch(net, train, opt, rng, static_cast<int>(e), augment);
    acc = evaluate(net, test);
    csv << e << ',' << loss << ',' << acc << '\n';
    log << "epoch " << e << " loss " << loss << " test accuracy " << acc << '\n';
  }
  save_model(net, out / "model");
  write_text_file(out / "train_log.csv", csv.str());
  // Accuracy of the saved (float32) parameters.
  const double saved_acc = evaluate(load_model(out / "model"), test);
  return {{"command", "train"},
          {"epochs", cfg.train.epochs},
          {"final_accuracy", saved_acc},
          {"stats", stats_json(model_stats(net))},
          {"normalization", {{"mean", train.normalization.mean}, {"std", train.normalization.std}}}};
}

json run_sensitivity(const RunConfig& cfg, const fs::path& out, Rng& rng, std::ostream& log) {
  auto [train, test] = load_splits(cfg);
  const Network net = load_model(cfg.resolve(cfg.model.path));
  const SensitivityProfile p = sensitivity_scan(net, train, test, cfg.sensitivity.layers,
                                                cfg.sensitivity.rates, cfg.ga, cfg.sampler, rng);
  write_text_file(out / "sensitivity.csv", p.csv());
  json entries = json::array();
  for (const auto& e : p.entries) {
    entries.push_back({{"layer", e.layer}, {"rate", e.rate}, {"accuracy", e.accuracy}, {"error", e.error}});
    log << e.layer << " rate " << e.rate << " accuracy " << e.accuracy << '\n';
  }
  return {{"command", "sensitivity"}, {"baseline_accuracy", p.baseline_accuracy}, {"entries", entries}};
}

json run_prune(const RunConfig& cfg, const fs::path& out, Rng& rng, std::ostream& log) {
  auto [train, test] = load_splits(cfg);
  const Network net = load_model(cfg.resolve(cfg.model.path));
  const Network teacher = net;
  PruningPlan plan = cfg.plan;
  if (!cfg.plan_path.empty()) {
    try {
      plan = PruningPlan::from_json(json::parse(read_text_file(cfg.resolve(cfg.plan_path))));
    } catch (const json::parse_error& e) {
      throw ConfigError("plan file: " + std::string(e.what()));
    }
  }
  plan = plan.completed(net);
  PipelineConfig pc{cfg.ga, cfg.sampler, cfg.finetune, cfg.distill};
  PruneResult res = prune_model(net, plan, train, test, pc, teacher, rng);

  save_model(res.net, out / "model");
  write_json(out / "plan.json", plan.to_json());
  write_text_file(out / "report.csv", res.report.csv());
  if (!res.report.layers.empty()) {
    fs::create_directories(out / "masks");
    fs::create_directories(out / "ga");
  }
  for (const auto& l : res.report.layers) {
    write_json(out / "masks" / (l.layer + ".json"), mask_to_json(l.layer, l.mask));
    write_text_file(out / "ga" / (l.layer + ".csv"), run_log_csv(l.ga));
    log << l.layer << ": kept " << l.kept << "/" << l.channels << ", error " << l.taylor_error
        << ", accuracy " << l.accuracy_pruned << " -> " << l.accuracy_finetuned << '\n';
  }
  write_text_file(out / "final_finetune.csv", trajectory_csv(res.report.final_finetune));
  json report = res.report.to_json();
  report["command"] = "prune";
  return report;
}

json run_finetune(const RunConfig& cfg, const fs::path& out, Rng& rng, std::ostream& log) {
  auto [train, test] = load_splits(cfg);
  Network student = load_model(cfg.resolve(cfg.model.path));
  DistillConfig d = cfg.distill;
  Network teacher;
  if (cfg.teacher_path.empty()) {
    d.beta = 0.0;
    teacher = student;
  } else {
    teacher = load_model(cfg.resolve(cfg.teacher_path));
  }
  const double before = evaluate(student, test);
  const AugmentPolicy* augment = cfg.finetune.augment.enabled ? &cfg.finetune.augment : nullptr;
  const std::vector<KdEpoch> traj = finetune_kd(student, teacher, train, d, rng, augment);
  save_model(student, out / "model");
  write_text_file(out / "trajectory.csv", trajectory_csv(traj));
  const double after = evaluate(load_model(out / "model"), test);
  log << "accuracy " << before << " -> " << after << '\n';
  return {{"command", "finetune"},
          {"beta", d.beta},
          {"epochs", d.epochs},
          {"accuracy_before", before},
          {"accuracy_after", after}};
}

json run_eval(const RunConfig& cfg, Rng&, std::ostream& log) {
  auto [train, test] = load_splits(cfg);
  const Network net = load_model(cfg.resolve(cfg.model.path));
  const double acc = evaluate(net, test);
  log << "accuracy " << acc << " on " << test.size() << " samples\n";
  return {{"command", "eval"}, {"accuracy", acc}, {"samples", test.size()}};
}

json run_stats(const RunConfig& cfg, Rng& rng, std::ostream& log) {
  const Network net = cfg.model.path.empty()
                          ? make_architecture(cfg.model.architecture, cfg.model.num_classes,
                                              cfg.model.input_shape)
                          : load_or_build(cfg, rng);
  const ModelStats s = model_stats(net);
  log << "params " << s.params << " (" << std::fixed << std::setprecision(2)
      << static_cast<double>(s.params) / 1e6 << "M), flops " << std::scientific << std::setprecision(3)
      << static_cast<double>(s.flops) << std::defaultfloat << '\n';
  return {{"command", "stats"},
          {"input_shape", net.input_shape},
          {"params", s.params},
          {"flops", s.flops},
          {"layers", net.layers.size()}};
}

}  // namespace

std::pair<Dataset, Dataset> load_splits(const RunConfig& cfg) {
  const Normalization* fixed = cfg.data.normalization ? &*cfg.data.normalization : nullptr;
  Dataset train = load_dataset(dataset_source(cfg.data, "train", cfg.base_dir), "train", fixed);
  Dataset test = load_dataset(dataset_source(cfg.data, "test", cfg.base_dir), "test", &train.normalization);
  return {std::move(train), std::move(test)};
}

json run(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const fs::path out = cfg.resolve(cfg.output_dir);
  fs::create_directories(out);
  const std::string started = utc_now();
  write_json(out / "config.json", serialize(cfg));

  Rng rng(cfg.seed);
  json summary;
  switch (cfg.command) {
    case Command::kTrain: summary = run_train(cfg, out, rng, log); break;
    case Command::kSensitivity: summary = run_sensitivity(cfg, out, rng, log); break;
    case Command::kPrune: summary = run_prune(cfg, out, rng, log); break;
    case Command::kFinetune: summary = run_finetune(cfg, out, rng, log); break;
    case Command::kEval: summary = run_eval(cfg, rng, log); break;
    case Command::kStats: summary = run_stats(cfg, rng, log); break;
  }
  const char* name = cfg.command == Command::kEval    ? "eval.json"
                     : cfg.command == Command::kStats ? "stats.json"
                                                      : "report.json";
  write_json(out / name, summary);
  write_json(out / "run_meta.json", {{"command", to_string(cfg.command)},
                                     {"seed", cfg.seed},
                                     {"started_at", started},
                                     {"finished_at", utc_now()}});
  return summary;
}

int run_with_status(const RunConfig& cfg, std::ostream& log, std::ostream& err) {
  try {
    run(cfg, log);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace chprune
