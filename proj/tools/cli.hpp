#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace munet::cli {

enum ExitCode : int { kOk = 0, kValidationFailure = 1, kUsage = 2, kIo = 3, kNumerical = 4 };

/// Runs one subcommand. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace munet::cli
