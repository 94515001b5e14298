#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vsur {

enum ExitCode { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2 };

/// Runs the `vsur` command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vsur
