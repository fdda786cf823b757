#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dppkit {

/// Entry point of the `dppkit` command line tool. Returns the process exit
/// status: 0 on success, 1 on a runtime failure, 2 on a usage error. Errors
/// are reported as a single line on `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dppkit
