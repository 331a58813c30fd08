#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>

#include "chprune/config.hpp"
#include "chprune/errors.hpp"
#include "chprune/model_io.hpp"
#include "chprune/run.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace chprune;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* cli_path() { return std::getenv("CHPRUNE_CLI"); }

int run_cli(const fs::path& dir, const json& cfg, const std::string& extra = "") {
  write_text_file(dir / "run.json", cfg.dump(2));
  const std::string cmd = std::string("\"") + cli_path() + "\" --config \"" + (dir / "run.json").string() +
                          "\" " + extra + " > \"" + (dir / "stdout.txt").string() + "\" 2> \"" +
                          (dir / "stderr.txt").string() + "\"";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Every file under `dir` except the wall-clock metadata.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "run_meta.json") continue;
    out[fs::relative(e.path(), dir).string()] = read_text_file(e.path());
  }
  return out;
}

json small_data() {
  return {{"format", "synthetic"}, {"seed", 3}, {"train_size", 96}, {"test_size", 48},
          {"image_size", 8},       {"classes", 2}};
}

json small_model() {
  return {{"architecture", "small-cnn"}, {"num_classes", 2}, {"input_shape", {1, 8, 8}}};
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("an empty GA block gives the documented defaults") {
    const RunConfig cfg = parse_config({{"command", "stats"}, {"seed", 1}, {"ga", json::object()}});
    CHECK(cfg.ga.population == 20);
    CHECK(cfg.ga.crossover_prob == 0.1);
    CHECK(cfg.ga.mutation_prob == 0.1);
    CHECK(cfg.ga.elitism == 1);
    CHECK(cfg.ga.iterations_for(64) == 640);
    CHECK(cfg.sampler.image_fraction == 0.01);
    CHECK(cfg.sampler.volumes_per_image == 10);
    CHECK(cfg.distill.beta == 1e3);
  }

  TEST_CASE("invalid values, unknown keys and missing seeds are config errors") {
    CHECK_THROWS_AS(parse_config({{"command", "stats"}, {"seed", 1}, {"ga", {{"mutation_prob", 1.5}}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "stats"}, {"seed", 1}, {"gaa", json::object()}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "stats"}, {"seed", 1}, {"ga", {{"pop", 3}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "stats"}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"seed", 1}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "compress"}, {"seed", 1}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "stats"}, {"seed", -4}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "stats"}, {"seed", 1}, {"sampler", {{"image_fraction", 0}}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "eval"}, {"seed", 1}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "eval"}, {"seed", 1}, {"model", {{"path", "/no/such/model"}}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_config({{"command", "stats"}, {"seed", 1}, {"distill", {{"beta", -1.0}}}}),
                    ConfigError);
  }

  TEST_CASE("serialize(parse(x)) is a fixed point") {
    const json in = {{"command", "stats"},
                     {"seed", 9},
                     {"ga", {{"population", 12}, {"max_iterations", 30}}},
                     {"distill", {{"beta", 0.1}, {"pairs", {{{"teacher", "relu2"}, {"student", "relu2"}}}}}},
                     {"plan", {{"groups", {{{"layers", {"conv2"}}, {"rate", 0.5}}}}}},
                     {"data", {{"normalization", {{"mean", {0.5}}, {"std", {0.25}}}}}}};
    const json once = serialize(parse_config(in));
    const json twice = serialize(parse_config(once));
    CHECK(once == twice);
    CHECK(once["ga"]["population"] == 12);
    CHECK(once["distill"]["pairs"][0]["teacher"] == "relu2");
    CHECK(once["data"]["normalization"]["std"][0] == 0.25);
  }

  TEST_CASE("run_with_status maps error kinds to exit codes") {
    const auto dir = testing::scratch("status");
    RunConfig cfg = parse_config({{"command", "stats"}, {"seed", 1}, {"output_dir", dir.string()}});
    std::ostringstream log, err;
    CHECK(run_with_status(cfg, log, err) == kExitOk);
    cfg.max_workers = 0;
    CHECK(run_with_status(cfg, log, err) == kExitConfig);
    cfg.max_workers = 1;
    cfg.command = Command::kEval;
    cfg.model.path = (dir / "missing").string();
    CHECK(run_with_status(cfg, log, err) == kExitConfig);
    // A model directory with a manifest but no blob fails at load time.
    fs::create_directories(dir / "broken");
    write_text_file(dir / "broken" / "manifest.json", "{}");
    cfg.model.path = (dir / "broken").string();
    cfg.data.train_size = 8;
    cfg.data.test_size = 8;
    CHECK(run_with_status(cfg, log, err) == kExitRuntime);
  }

  TEST_CASE("CLI: exit codes and VGG-16 stats") {
    if (!cli_path()) {
      MESSAGE("CHPRUNE_CLI not set; skipping");
      return;
    }
    const auto dir = testing::scratch("cli_stats");
    const json stats = {{"command", "stats"},
                        {"seed", 1},
                        {"output_dir", (dir / "out").string()},
                        {"model", {{"architecture", "vgg16"}, {"num_classes", 10}, {"input_shape", {3, 32, 32}}}}};
    REQUIRE(run_cli(dir, stats) == 0);
    const json s = json::parse(read_text_file(dir / "out" / "stats.json"));
    CHECK(std::abs(s["params"].get<double>() - 14.7e6) <= 0.02 * 14.7e6);
    CHECK(std::abs(s["flops"].get<double>() - 6.26e8) <= 0.02 * 6.26e8);
    CHECK(fs::exists(dir / "out" / "run_meta.json"));
    CHECK(fs::exists(dir / "out" / "config.json"));

    json bad = stats;
    bad["ga"] = {{"mutation_prob", 1.5}};
    CHECK(run_cli(dir, bad) == 1);
    CHECK(read_text_file(dir / "stderr.txt").find("mutation") != std::string::npos);
    write_text_file(dir / "garbage.json", "{not json");
    const std::string cmd = std::string("\"") + cli_path() + "\" --config \"" + (dir / "garbage.json").string() +
                            "\" 2> /dev/null";
    const int st = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(st) == 1);

    json eval = {{"command", "eval"},
                 {"seed", 1},
                 {"output_dir", (dir / "eval").string()},
                 {"model", {{"path", (dir / "broken").string()}}},
                 {"data", small_data()}};
    fs::create_directories(dir / "broken");
    write_text_file(dir / "broken" / "manifest.json", "[]");
    CHECK(run_cli(dir, eval) == 2);
  }

  TEST_CASE("CLI: train, eval, prune; re-runs are byte-identical") {
    if (!cli_path()) {
      MESSAGE("CHPRUNE_CLI not set; skipping");
      return;
    }
    const auto dir = testing::scratch("cli_pipeline");
    const json train = {{"command", "train"},
                        {"seed", 5},
                        {"output_dir", (dir / "train").string()},
                        {"model", small_model()},
                        {"data", small_data()},
                        {"train", {{"epochs", 2}, {"learning_rate", 0.05}, {"batch_size", 16}}}};
    REQUIRE(run_cli(dir, train) == 0);
    const auto first = snapshot(dir / "train");
    CHECK(first.contains("model/manifest.json"));
    CHECK(first.contains("train_log.csv"));
    fs::remove_all(dir / "train");
    REQUIRE(run_cli(dir, train) == 0);
    CHECK(snapshot(dir / "train") == first);

    const std::string model = (dir / "train" / "model").string();
    json eval = {{"command", "eval"},
                 {"seed", 5},
                 {"output_dir", (dir / "eval").string()},
                 {"model", {{"path", model}}},
                 {"data", small_data()}};
    REQUIRE(run_cli(dir, eval) == 0);
    const std::string e1 = read_text_file(dir / "eval" / "eval.json");
    REQUIRE(run_cli(dir, eval) == 0);
    CHECK(read_text_file(dir / "eval" / "eval.json") == e1);

    // Empty plan: the model comes back unchanged.
    json empty = {{"command", "prune"},
                  {"seed", 5},
                  {"output_dir", (dir / "noop").string()},
                  {"model", {{"path", model}}},
                  {"data", small_data()}};
    REQUIRE(run_cli(dir, empty) == 0);
    CHECK(snapshot(dir / "noop" / "model") == snapshot(dir / "train" / "model"));
    const json noop = json::parse(read_text_file(dir / "noop" / "report.json"));
    CHECK(noop["layers_pruned"] == 0);

    json prune = empty;
    prune["output_dir"] = (dir / "prune").string();
    prune["plan"] = {{"groups", {{{"layers", {"conv2", "conv3"}}, {"rate", 0.5}}}}};
    prune["ga"] = {{"max_iterations", 20}};
    prune["sampler"] = {{"image_fraction", 0.5}, {"volumes_per_image", 2}};
    prune["finetune"] = {{"inter_epochs", 1}, {"final_epochs", 1}, {"batch_size", 16}};
    prune["distill"] = {{"beta", 0.1}};
    prune["max_workers"] = 2;
    REQUIRE(run_cli(dir, prune) == 0);
    const auto p1 = snapshot(dir / "prune");
    CHECK(p1.contains("masks/conv2.json"));
    CHECK(p1.contains("ga/conv3.csv"));
    CHECK(p1.contains("report.csv"));
    const json report = json::parse(p1.at("report.json"));
    CHECK(report["layers_pruned"] == 2);
    CHECK(report["after"]["params"].get<double>() < report["before"]["params"].get<double>());
    fs::remove_all(dir / "prune");
    REQUIRE(run_cli(dir, prune) == 0);
    CHECK(snapshot(dir / "prune") == p1);

    // --seed overrides the config.
    prune["output_dir"] = (dir / "prune_seed").string();
    REQUIRE(run_cli(dir, prune, "--seed 6") == 0);
    CHECK(json::parse(read_text_file(dir / "prune_seed" / "config.json"))["seed"] == 6);
  }
}
