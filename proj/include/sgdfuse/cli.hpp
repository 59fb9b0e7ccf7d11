#pragma once

#include <string>
#include <vector>

namespace sgdfuse::cli {

// Exit codes: 0 success, 1 config/usage error, 2 runtime failure.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, char** argv);

} // namespace sgdfuse::cli
