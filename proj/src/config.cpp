#include "chprune/config.hpp"

#include <set>
#include <type_traits>

#include "chprune/errors.hpp"
#include "chprune/model_io.hpp"

namespace chprune {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Reads known keys of one object and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError(where(key) + " must be a nonnegative integer");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + " must be a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    }
    try {
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) throw ConfigError("unknown key '" + where(k.c_str()) + "'");
    }
  }

  std::string where(const char* key) const { return ctx_.empty() ? key : ctx_ + "." + key; }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

void read_split(const json& j, const std::string& ctx, DataSplitConfig& s) {
  Reader r(j, ctx);
  r.get("images", s.images);
  r.get("labels", s.labels);
  r.get("files", s.files);
  r.get("limit", s.limit);
  r.finish();
}

json split_json(const DataSplitConfig& s) {
  return {{"images", s.images}, {"labels", s.labels}, {"files", s.files}, {"limit", s.limit}};
}

void read_augment(const json& j, const std::string& ctx, AugmentPolicy& a) {
  Reader r(j, ctx);
  r.get("enabled", a.enabled);
  r.get("pad", a.pad);
  r.get("flip_prob", a.flip_prob);
  r.finish();
}

json augment_json(const AugmentPolicy& a) {
  return {{"enabled", a.enabled}, {"pad", a.pad}, {"flip_prob", a.flip_prob}};
}

void read_optimizer(Reader& r, OptimizerConfig& o) {
  r.get("learning_rate", o.learning_rate);
  r.get("momentum", o.momentum);
  r.get("weight_decay", o.weight_decay);
  r.get("batch_size", o.batch_size);
  r.get("lr_schedule", o.lr_schedule);
}

void write_optimizer(json& j, const OptimizerConfig& o) {
  j["learning_rate"] = o.learning_rate;
  j["momentum"] = o.momentum;
  j["weight_decay"] = o.weight_decay;
  j["batch_size"] = o.batch_size;
  j["lr_schedule"] = o.lr_schedule;
}

}  // namespace

Command command_from_string(const std::string& name) {
  if (name == "train") return Command::kTrain;
  if (name == "sensitivity") return Command::kSensitivity;
  if (name == "prune") return Command::kPrune;
  if (name == "finetune") return Command::kFinetune;
  if (name == "eval") return Command::kEval;
  if (name == "stats") return Command::kStats;
  throw ConfigError("unknown command '" + name + "'");
}

std::string to_string(Command c) {
  switch (c) {
    case Command::kTrain: return "train";
    case Command::kSensitivity: return "sensitivity";
    case Command::kPrune: return "prune";
    case Command::kFinetune: return "finetune";
    case Command::kEval: return "eval";
    case Command::kStats: return "stats";
  }
  return "unknown";
}

fs::path RunConfig::resolve(const std::string& p) const {
  const fs::path path(p);
  if (path.is_absolute() || base_dir.empty()) return path;
  return base_dir / path;
}

void RunConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (max_workers == 0) throw ConfigError("max_workers must be at least 1");
  sampler.validate();
  ga.validate();
  train.optimizer.validate();
  train.augment.validate();
  finetune.validate();
  distill.validate();
  if (train.epochs == 0) throw ConfigError("train.epochs must be at least 1");
  if (sensitivity.rates.empty()) throw ConfigError("sensitivity.rates must not be empty");
  for (double r : sensitivity.rates) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("sensitivity rates must lie in (0, 1)");
  }
  if (model.num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
  if (model.input_shape.size() != 3) throw ConfigError("model.input_shape must be [C, H, W]");
  if (data.normalization) {
    const auto& n = *data.normalization;
    if (n.mean.empty() || n.mean.size() != n.std.size()) {
      throw ConfigError("data.normalization needs matching nonempty mean and std lists");
    }
    for (double s : n.std) {
      if (!(s > 0.0)) throw ConfigError("data.normalization std entries must be positive");
    }
  }

  const bool needs_model = command != Command::kTrain && command != Command::kStats;
  if (needs_model && model.path.empty()) {
    throw ConfigError("command " + to_string(command) + " needs model.path");
  }
  auto require = [&](const std::string& p, const std::string& what) {
    if (!p.empty() && !fs::exists(resolve(p))) throw ConfigError(what + " '" + p + "' does not exist");
  };
  if (command != Command::kStats || !model.path.empty()) require(model.path, "model.path");
  require(teacher_path, "teacher_path");
  require(plan_path, "plan_path");

  if (command == Command::kStats) return;
  if (data.format == DataFormat::kIdx) {
    for (const auto* s : {&data.train, &data.test}) {
      if (s->images.empty() || s->labels.empty()) throw ConfigError("idx data needs images and labels per split");
      require(s->images, "idx image file");
      require(s->labels, "idx label file");
    }
  } else if (data.format == DataFormat::kCifarBinary) {
    for (const auto* s : {&data.train, &data.test}) {
      if (s->files.empty()) throw ConfigError("cifar data needs files per split");
      for (const auto& f : s->files) require(f, "cifar batch");
    }
  } else {
    if (data.train_size == 0 || data.test_size == 0) throw ConfigError("generated data sizes must be positive");
  }
}

RunConfig parse_config(const json& j, const fs::path& base_dir) {
  RunConfig cfg;
  cfg.base_dir = base_dir;
  Reader r(j, "");
  std::string command;
  r.get("command", command);
  if (command.empty()) throw ConfigError("config needs a command");
  cfg.command = command_from_string(command);
  if (!r.has("seed")) throw ConfigError("config needs an explicit seed");
  r.get("seed", cfg.seed);
  r.get("output_dir", cfg.output_dir);
  r.get("max_workers", cfg.max_workers);
  r.get("teacher_path", cfg.teacher_path);
  r.get("plan_path", cfg.plan_path);

  if (const json* m = r.sub("model")) {
    Reader mr(*m, "model");
    mr.get("path", cfg.model.path);
    mr.get("architecture", cfg.model.architecture);
    mr.get("num_classes", cfg.model.num_classes);
    mr.get("input_shape", cfg.model.input_shape);
    mr.finish();
  }
  if (const json* d = r.sub("data")) {
    Reader dr(*d, "data");
    std::string format = to_string(cfg.data.format);
    dr.get("format", format);
    cfg.data.format = data_format_from_string(format);
    if (const json* s = dr.sub("train")) read_split(*s, "data.train", cfg.data.train);
    if (const json* s = dr.sub("test")) read_split(*s, "data.test", cfg.data.test);
    dr.get("seed", cfg.data.seed);
    dr.get("train_size", cfg.data.train_size);
    dr.get("test_size", cfg.data.test_size);
    dr.get("image_size", cfg.data.image_size);
    dr.get("classes", cfg.data.classes);
    dr.get("channels", cfg.data.channels);
    dr.get("noise", cfg.data.noise);
    if (const json* n = dr.sub("normalization"); n && !n->is_null()) {
      Reader nr(*n, "data.normalization");
      Normalization norm;
      nr.get("mean", norm.mean);
      nr.get("std", norm.std);
      nr.finish();
      cfg.data.normalization = norm;
    }
    dr.finish();
  }
  if (const json* t = r.sub("train")) {
    Reader tr(*t, "train");
    tr.get("epochs", cfg.train.epochs);
    read_optimizer(tr, cfg.train.optimizer);
    if (const json* a = tr.sub("augment")) read_augment(*a, "train.augment", cfg.train.augment);
    tr.finish();
  }
  if (const json* s = r.sub("sampler")) {
    Reader sr(*s, "sampler");
    sr.get("image_fraction", cfg.sampler.image_fraction);
    sr.get("volumes_per_image", cfg.sampler.volumes_per_image);
    sr.get("max_volumes", cfg.sampler.max_volumes);
    sr.finish();
  }
  if (const json* g = r.sub("ga")) {
    Reader gr(*g, "ga");
    gr.get("population", cfg.ga.population);
    gr.get("crossover_prob", cfg.ga.crossover_prob);
    gr.get("mutation_prob", cfg.ga.mutation_prob);
    gr.get("max_iterations", cfg.ga.max_iterations);
    gr.get("elitism", cfg.ga.elitism);
    gr.finish();
  }
  if (const json* s = r.sub("sensitivity")) {
    Reader sr(*s, "sensitivity");
    sr.get("layers", cfg.sensitivity.layers);
    sr.get("rates", cfg.sensitivity.rates);
    sr.finish();
  }
  if (const json* p = r.sub("plan")) cfg.plan = PruningPlan::from_json(*p);
  if (const json* f = r.sub("finetune")) {
    Reader fr(*f, "finetune");
    fr.get("inter_epochs", cfg.finetune.inter_epochs);
    fr.get("inter_lr", cfg.finetune.inter_lr);
    fr.get("final_epochs", cfg.finetune.final_epochs);
    fr.get("final_lr_start", cfg.finetune.final_lr_start);
    fr.get("final_lr_end", cfg.finetune.final_lr_end);
    fr.get("momentum", cfg.finetune.momentum);
    fr.get("weight_decay", cfg.finetune.weight_decay);
    fr.get("batch_size", cfg.finetune.batch_size);
    if (const json* a = fr.sub("augment")) read_augment(*a, "finetune.augment", cfg.finetune.augment);
    fr.finish();
  }
  if (const json* d = r.sub("distill")) {
    Reader dr(*d, "distill");
    dr.get("beta", cfg.distill.beta);
    dr.get("epochs", cfg.distill.epochs);
    read_optimizer(dr, cfg.distill.optimizer);
    if (const json* p = dr.sub("pairs")) {
      if (!p->is_array()) throw ConfigError("distill.pairs must be an array");
      for (const auto& e : *p) {
        Reader pr(e, "distill.pairs[]");
        AttentionPair ap;
        pr.get("teacher", ap.teacher);
        pr.get("student", ap.student);
        pr.finish();
        if (ap.teacher.empty() || ap.student.empty()) throw ConfigError("attention pairs need teacher and student ids");
        cfg.distill.pairs.push_back(ap);
      }
    }
    dr.finish();
  }
  r.finish();
  cfg.ga.max_workers = cfg.max_workers;
  cfg.validate();
  return cfg;
}

RunConfig parse_config_file(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON: " + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(j, path.parent_path());
}

json serialize(const RunConfig& cfg) {
  json j;
  j["command"] = to_string(cfg.command);
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["max_workers"] = cfg.max_workers;
  j["teacher_path"] = cfg.teacher_path;
  j["plan_path"] = cfg.plan_path;
  j["model"] = {{"path", cfg.model.path},
                {"architecture", cfg.model.architecture},
                {"num_classes", cfg.model.num_classes},
                {"input_shape", cfg.model.input_shape}};
  json data = {{"format", to_string(cfg.data.format)},
               {"train", split_json(cfg.data.train)},
               {"test", split_json(cfg.data.test)},
               {"seed", cfg.data.seed},
               {"train_size", cfg.data.train_size},
               {"test_size", cfg.data.test_size},
               {"image_size", cfg.data.image_size},
               {"classes", cfg.data.classes},
               {"channels", cfg.data.channels},
               {"noise", cfg.data.noise}};
  data["normalization"] = cfg.data.normalization
                              ? json{{"mean", cfg.data.normalization->mean}, {"std", cfg.data.normalization->std}}
                              : json(nullptr);
  j["data"] = std::move(data);
  json train = {{"epochs", cfg.train.epochs}, {"augment", augment_json(cfg.train.augment)}};
  write_optimizer(train, cfg.train.optimizer);
  j["train"] = std::move(train);
  j["sampler"] = {{"image_fraction", cfg.sampler.image_fraction},
                  {"volumes_per_image", cfg.sampler.volumes_per_image},
                  {"max_volumes", cfg.sampler.max_volumes}};
  j["ga"] = {{"population", cfg.ga.population},
             {"crossover_prob", cfg.ga.crossover_prob},
             {"mutation_prob", cfg.ga.mutation_prob},
             {"max_iterations", cfg.ga.max_iterations},
             {"elitism", cfg.ga.elitism}};
  j["sensitivity"] = {{"layers", cfg.sensitivity.layers}, {"rates", cfg.sensitivity.rates}};
  j["plan"] = cfg.plan.to_json();
  j["finetune"] = {{"inter_epochs", cfg.finetune.inter_epochs},
                   {"inter_lr", cfg.finetune.inter_lr},
                   {"final_epochs", cfg.finetune.final_epochs},
                   {"final_lr_start", cfg.finetune.final_lr_start},
                   {"final_lr_end", cfg.finetune.final_lr_end},
                   {"momentum", cfg.finetune.momentum},
                   {"weight_decay", cfg.finetune.weight_decay},
                   {"batch_size", cfg.finetune.batch_size},
                   {"augment", augment_json(cfg.finetune.augment)}};
  json pairs = json::array();
  for (const auto& p : cfg.distill.pairs) pairs.push_back({{"teacher", p.teacher}, {"student", p.student}});
  json distill = {{"beta", cfg.distill.beta}, {"epochs", cfg.distill.epochs}, {"pairs", pairs}};
  write_optimizer(distill, cfg.distill.optimizer);
  j["distill"] = std::move(distill);
  return j;
}

DatasetSource dataset_source(const DataConfig& cfg, const std::string& split, const fs::path& base_dir) {
  const bool train = split == "train";
  const DataSplitConfig& s = train ? cfg.train : cfg.test;
  auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  DatasetSource src;
  src.format = cfg.format;
  if (!s.images.empty()) src.images = resolve(s.images);
  if (!s.labels.empty()) src.labels = resolve(s.labels);
  for (const auto& f : s.files) src.files.push_back(resolve(f));
  src.limit = s.limit;
  src.digits.seed = cfg.seed;
  src.digits.size = train ? cfg.train_size : cfg.test_size;
  src.digits.image_size = cfg.image_size;
  src.synthetic.seed = cfg.seed;
  src.synthetic.size = train ? cfg.train_size : cfg.test_size;
  src.synthetic.classes = cfg.classes;
  src.synthetic.channels = cfg.channels;
  src.synthetic.height = cfg.image_size;
  src.synthetic.width = cfg.image_size;
  src.synthetic.noise = cfg.noise;
  return src;
}

}  // namespace chprune
