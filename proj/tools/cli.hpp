#pragma once

// The gaitworks command line as a callable, so tests can drive it in-process.

#include <ostream>
#include <string>
#include <vector>

namespace gaitworks::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitInternal = 3;

/// `args` excludes the program name. Results go to `out`; progress and errors to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gaitworks::cli
