#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace forkscope::cli {

// Entry point behind the `forkscope` binary. `args` excludes the program
// name. Returns the process exit code: 0 on success, 1 on invalid input or
// usage, 2 when the model backend fails.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace forkscope::cli
