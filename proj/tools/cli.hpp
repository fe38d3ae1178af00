#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace massseg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs one `massseg` invocation. `args` excludes the program name. Machine-readable output goes
/// to `out`, diagnostics to stderr.
int run_cli(const std::vector<std::string>& args, std::ostream& out);

}  // namespace massseg::cli
