#pragma once

#include <ostream>
#include <string>

#include "tresnet/config.hpp"

namespace tresnet {

/// Command entry points used by the CLI binary. Artifacts are written under
/// cfg.out_dir with fixed names; `log` receives progress and warnings.
/// Commands throw the library error types; the binary maps them to exit codes.
void cmd_simulate(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_estimate(const RunConfig& cfg, std::ostream& log);
void cmd_benchmark(const RunConfig& cfg, std::size_t jobs, std::ostream& log);
void cmd_ensemble(const RunConfig& cfg, std::size_t jobs, std::ostream& log);

}  // namespace tresnet
