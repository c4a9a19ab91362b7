#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pbrl {

/// Entry point behind the `pbrl` binary; split out so tests can drive the
/// command line in-process.  Returns the process exit code.
int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pbrl
