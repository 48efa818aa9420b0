#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace patchlens {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Runs `patchlens <command> ...`; args[0] is the program name. Returns the
/// process exit code: 0 on success, 2 on a configuration or usage error, 3 on
/// any other failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace patchlens
