#pragma once

#include <iosfwd>

namespace mobileone {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Entry point of the `mobileone` tool. Subcommands: build, reparam, verify,
/// bench, correlate, train-toy, count. MOBILEONE_NUM_THREADS sets the default
/// kernel thread count; --threads overrides it.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mobileone
