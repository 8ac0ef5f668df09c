#pragma once

// Command-line front end shared by the `audiosae` executable and the tests.

#include <iosfwd>
#include <string>
#include <vector>

namespace audiosae::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Parses argv (argv[0] is the program name), runs the subcommand and maps
/// errors to exit codes: 1 for usage and validation problems, 2 for
/// failures while running.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace audiosae::cli
