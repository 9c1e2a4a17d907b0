#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace txd::cli {

/// Runs one invocation. Exit codes: 0 success, 2 usage or configuration
/// error, 3 numerical failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace txd::cli
