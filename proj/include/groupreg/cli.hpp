#pragma once

#include <string>
#include <vector>

namespace groupreg {

// Entry point behind the command-line tool, callable in-process by tests.
// Subcommands: extract, match, register, apply, evaluate, synth, pipeline.
// Returns the process exit code; diagnostics go to stderr.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace groupreg
