#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mega::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitConfig = 2;

// args[0] is the command name (gradcheck, ema-equiv, theorem1, laplace-check,
// bench, train, eval); the program name is not included.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mega::cli
