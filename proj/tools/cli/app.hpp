#pragma once

#include <ostream>

namespace xlprobe::cli {

/// Exit codes: 0 success, 1 internal failure, 2 invalid input or usage.
/// Failures are written to `err` as {"error": {"kind": ..., "message": ...}}.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace xlprobe::cli
