#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace circuitlab::cli {

/// Runs one command line (args[0] is the program name). Errors are written
/// to `err` as one JSON line {"error": kind, "message": text}. Returns the
/// process exit code: 0 on success, 2 for usage and config errors, 1 for
/// everything else.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace circuitlab::cli
