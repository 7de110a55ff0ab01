#pragma once

#include <stdexcept>
#include <string>

#include "loomnet/config.hpp"
#include "loomnet/metrics.hpp"

namespace loomnet {

struct RunnerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunOutputs {
  RunReport report;
  std::string report_path;
  std::string trace_path;
  std::string csv_path;
};

// Serializes report.json, trace.json and iterations.csv into output_dir.
RunOutputs write_outputs(RunReport report, const std::string& output_dir);

// One-process deterministic run over the simulated fabric.
RunOutputs run_virtual(const RunConfig& cfg);

// Executes a single rank of a REAL run over the socket mesh and writes its
// record file (rank_<r>.records.json) into output_dir. coordinator_override
// replaces the configured rendezvous address when non-empty.
void run_real_rank(const RunConfig& cfg, int rank,
                   const std::string& coordinator_override = "");

// Parent side of a REAL run: forks one child per rank (re-invoking argv0
// with `run -c config --rank R`), waits for all of them, merges the per-rank
// record files and writes the report.
RunOutputs run_real_parent(const RunConfig& cfg, const std::string& argv0,
                           const std::string& config_path);

}  // namespace loomnet
