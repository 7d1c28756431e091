#pragma once

#include <iosfwd>

namespace cgan {

/// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `cgan` tool. Subcommands: gen-corpus, train, generate,
/// audit, eval, export-graph. Each prints one `key=value` summary line to
/// `out`; progress and errors go to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cgan
