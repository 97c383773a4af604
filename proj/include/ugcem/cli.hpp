#pragma once

#include <span>
#include <string>
#include <vector>

namespace ugcem::cli {

/// Process exit codes.
enum ExitCode : int {
  kSuccess = 0,
  kConfigError = 2,
  kMissingInput = 3,
  kNumericalFailure = 4,
};

/// Parses arguments (argv[0] is the program name) and runs one command.
int run(std::span<const std::string> args);
int run(int argc, const char* const* argv);

}  // namespace ugcem::cli
