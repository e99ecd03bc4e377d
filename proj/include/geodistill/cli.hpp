#pragma once

// `geodistill` command line: gen-scene, train, eval, grad-check.

#include <ostream>

namespace geodistill::cli {

enum ExitCode : int {
  kSuccess = 0,
  kUsageError = 1,
  kNumericalError = 2,
  kIoError = 3,
};

/// Parses `argv` and runs the selected subcommand. Never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace geodistill::cli
