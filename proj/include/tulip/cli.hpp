#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tulip::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,
    kMissingInput = 3,
    kPhaseMismatch = 4,
    kNumericFailure = 5,
    kOutOfWindow = 6,
};

// Runs one invocation; args exclude the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tulip::cli
