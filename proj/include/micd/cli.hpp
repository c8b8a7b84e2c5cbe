#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace micd {

// Exit codes shared by every command.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitUsage = 2,
    kExitNumeric = 3,
    kExitCheckpoint = 4,
    kExitAblation = 5,
};

// Runs `micd <args...>` (args exclude the program name) and returns the exit
// code. Commands: gen-data, train, eval, ablate.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace micd
