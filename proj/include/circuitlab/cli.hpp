#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace circuitlab {

/// Runs one command line (args[0] is the program name). Returns 0 on
/// success, 1 on a runtime error and 2 on a usage error. `--help` prints
/// usage and returns 0. `--config file.json` supplies defaults for any flag;
/// flags given on the command line win.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace circuitlab
