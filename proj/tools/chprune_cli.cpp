// Batch front end: one JSON config per run.
//
//   chprune --config run.json [--seed N] [--out DIR]
//
// Exit status: 0 success, 1 invalid configuration, 2 runtime failure.

#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "chprune/config.hpp"
#include "chprune/errors.hpp"
#include "chprune/model_io.hpp"
#include "chprune/platform.hpp"
#include "chprune/run.hpp"

int main(int argc, char** argv) {
  chprune::tune_allocator();
  CLI::App app{"Channel pruning with genetic mask search and attention-transfer fine-tuning"};
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  app.add_option("--config", config_path, "Run configuration (JSON)")->required();
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", out_dir, "Override the output directory");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? chprune::kExitOk : chprune::kExitConfig;
  }

  chprune::RunConfig cfg;
  try {
    const std::filesystem::path path(config_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(chprune::read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw chprune::ConfigError(config_path + ": malformed JSON: " + e.what());
    } catch (const chprune::FormatError& e) {
      throw chprune::ConfigError(e.what());
    }
    if (!j.is_object()) throw chprune::ConfigError(config_path + ": top level must be an object");
    if (seed) j["seed"] = *seed;
    if (!out_dir.empty()) j["output_dir"] = std::filesystem::absolute(out_dir).string();
    cfg = chprune::parse_config(j, path.parent_path());
  } catch (const chprune::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return chprune::kExitConfig;
  }
  return chprune::run_with_status(cfg, std::cout, std::cerr);
}
