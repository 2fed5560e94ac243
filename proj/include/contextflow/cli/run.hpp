#pragma once

namespace contextflow {

// Entry point for the contextflow tool; returns the process exit code
// (0 ok, 2 config/data error, 3 checkpoint error, 4 numerical abort).
// Split out from main() so tests can drive the CLI in-process.
int cli_main(int argc, const char* const* argv);

}  // namespace contextflow
