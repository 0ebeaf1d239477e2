#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "config.h"

namespace chom::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2 };

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"sample", "solve", "effective", "ldp", "corrector", "converge"};
  return names;
}

struct RunOptions {
  std::filesystem::path out;
  /// 0: leave the OpenMP default.
  int workers = 0;
  std::optional<std::uint64_t> seed_override;
};

struct OutputFile {
  std::string name;
  std::size_t bytes = 0;
  std::uint64_t hash = 0;
};

struct RunResult {
  std::vector<OutputFile> files;
  std::filesystem::path manifest;
};

std::uint64_t fnv1a64(std::string_view bytes);

/// Runs one subcommand. Outputs are staged and moved into `options.out` only
/// on success; on failure nothing is left behind. Throws ConfigError for
/// invalid input and other exceptions for runtime failures.
RunResult run(const std::string& subcommand, ExperimentConfig config, const RunOptions& options, std::ostream& log);

/// Full command line: parses flags, reads the config and maps failures to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace chom::cli
