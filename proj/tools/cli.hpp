#pragma once

// The `rin` command line, callable in-process for tests.

#include <string>
#include <vector>

namespace rin::cli {

inline constexpr int kOk = 0;
inline constexpr int kRuntimeFailure = 1;
inline constexpr int kValidationFailure = 2;

/// Default output root when no -o is given: $RIN_OUTPUT_ROOT or "rin_runs".
std::string output_root();

/// argv[0] is the program name. Returns the process exit code.
int run(const std::vector<std::string>& args);

}  // namespace rin::cli
