#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace sknet::cli {

enum ExitCode { ok = 0, usage_error = 1, runtime_error = 2 };

/// Runs one command. `args` excludes the program name. Data goes to `out`
/// unless --out is given; the resolved configuration and logs go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace sknet::cli
