#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vitscope::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
/// `analyze detect` found a backdoor.
inline constexpr int kExitFlagged = 2;

/// Runs the command line in `args` (program name excluded). Progress goes to
/// `out`, errors to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vitscope::cli
