#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace fmash::cli {

/// Runs one subcommand. Returns 0 on success, 1 usage error, 2 data error,
/// 3 numeric failure. args[0] is the program name.
int execute_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Comma-separated names to ids; unknown names raise UsageError listing the
/// closest vocabulary entries.
std::vector<int> resolve_names(const std::string& list, const std::map<std::string, int>& vocab);

/// Up to `limit` vocabulary names closest to `name` by edit distance.
std::vector<std::string> near_matches(const std::string& name, const std::map<std::string, int>& vocab,
                                      std::size_t limit = 5);

}  // namespace fmash::cli
