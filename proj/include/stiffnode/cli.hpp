#pragma once

// Command-line front end: gen-data, train, predict, eval and ablate.

#include <ostream>

namespace stiffnode::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kNumerical = 3 };

/// Runs one command; never throws. Messages go to `out` and `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stiffnode::cli
