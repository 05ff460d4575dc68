#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace istd::cli {

inline constexpr int kOk = 0;
inline constexpr int kFailed = 1;
inline constexpr int kUsage = 2;

/// Runs one command line (arguments after the program name). Returns kOk, kFailed when a
/// verification or audit fails, or kUsage for malformed flags, bad values and missing files.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace istd::cli
