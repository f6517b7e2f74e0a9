#pragma once

#include <ostream>

namespace vertseg {

/// Entry point of the `vertseg` tool. Subcommands: synth, preprocess, train,
/// evaluate, predict, ablate, report. Returns 0 on success, 1 on a runtime
/// failure (one-line diagnostic on `err`) and 2 on a usage error (message plus
/// usage text on `err`).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace vertseg
