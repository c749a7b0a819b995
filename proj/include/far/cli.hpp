#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "far/config.hpp"
#include "far/trainer.hpp"

namespace far {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitNumeric = 3,
};

/// Entry point of the `far` tool. Writes results to `out` and diagnostics
/// to `err`; never calls exit().
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Writes config echo, per-seed results, step logs, learner reports and
/// the summary into `dir`.
void write_run_directory(const std::filesystem::path& dir, const RunConfig& config, const RunResult& result,
                         const std::string& verbatim_config = {});

/// Table of mean scores: header "p\r" then one column per r value.
void write_grid_table(std::ostream& out, const GridResult& grid);

/// Delimited plot data, one row per run directory sorted by retention.
/// Throws InputError when a directory lacks summary.json.
void write_report(std::ostream& out, const std::vector<std::filesystem::path>& run_dirs);

}  // namespace far
