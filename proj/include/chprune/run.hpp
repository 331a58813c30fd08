#pragma once

#include <iosfwd>
#include <utility>

#include "chprune/config.hpp"
#include "chprune/dataset.hpp"
#include "json.hpp"

namespace chprune {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

// Train and test splits; the test split is normalised with the train split's
// statistics unless the config fixes them.
std::pair<Dataset, Dataset> load_splits(const RunConfig& cfg);

// Executes the command and writes its artifacts under the output directory.
// Returns the command summary (also written as report/eval/stats JSON).
// Wall-clock timestamps go to run_meta.json only.
nlohmann::json run(const RunConfig& cfg, std::ostream& log);

// run() with errors mapped to exit codes: 1 for configuration errors, 2 for
// everything else. The message is written to `err`.
int run_with_status(const RunConfig& cfg, std::ostream& log, std::ostream& err);

}  // namespace chprune
