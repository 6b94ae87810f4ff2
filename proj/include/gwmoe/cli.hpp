#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gwmoe::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `gwmoe` executable. argv[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

/// Subcommand names in registration order.
std::vector<std::string> subcommands();

/// (flag, description) pairs registered for a subcommand, in registration order.
std::vector<std::pair<std::string, std::string>> flags(const std::string& subcommand);

}  // namespace gwmoe::cli
