#pragma once

// Command-line front end. Kept in a library so tests drive the exact user path.

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace textret::cli {

enum ExitCode { kOk = 0, kUsage = 1, kFailure = 2 };

/// Runs one command line (without the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Every subcommand's options as (flag, description); the empty key holds the global options.
std::map<std::string, std::vector<std::pair<std::string, std::string>>> flag_docs();

}  // namespace textret::cli
