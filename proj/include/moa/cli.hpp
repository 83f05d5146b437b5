#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace moa {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand (train, eval, ensemble, landscape, hessian, routemap,
/// paramcount). `args` excludes the program name. Returns the exit code:
/// 0 on success, 1 on runtime failure, 2 on usage, config or checkpoint
/// errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace moa
