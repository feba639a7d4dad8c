#pragma once

// Command surface: build-sids | gen-data | train | eval | compare |
// run-manifest. Every subcommand reads a JSON config, writes its artifacts
// plus a provenance sidecar, and maps failures to stable exit codes
// (0 ok, 2 config, 3 missing input, 4 divergence, 5 hash mismatch).

namespace raddpo::cli {

int run_cli(int argc, const char* const* argv);

} // namespace raddpo::cli
