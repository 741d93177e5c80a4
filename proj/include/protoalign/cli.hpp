#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace protoalign {

/// Runs one `protoalign` invocation. `args` excludes the program name.
/// Returns the process exit code: 0 success, 1 usage error, 2 data or format
/// error, 3 numerical error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace protoalign
