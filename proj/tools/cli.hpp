#pragma once

#include <string>
#include <vector>

namespace promptct::cli {

/// Exit codes: 0 success, 1 user error, 2 numeric failure.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace promptct::cli
