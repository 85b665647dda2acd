#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace csformer::cli {

enum ExitCode : int {
  kOk = 0,
  kInternalError = 1,
  kUsageError = 2,
  kMissingFile = 3,
  kInvalidConfig = 4,
  kCheckpointError = 5,
  kShapeError = 6,
  kCheckFailed = 7,
};

/// Parses `args` (program name first), runs one subcommand, and returns its
/// exit code. Results go to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace csformer::cli
