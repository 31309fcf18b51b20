#pragma once

#include <string>
#include <vector>

namespace gdfd {

// Parses args (program name excluded) and runs one subcommand. Returns the
// process exit code: 0 success, 1 usage or config error, 2 runtime failure.
// All artifacts land under the subcommand's --out directory, and a rerun
// with identical flags reproduces every file byte for byte.
int run_cli(const std::vector<std::string>& args);

} // namespace gdfd
