#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "loomnet/scheduler.hpp"
#include "loomnet/workload.hpp"

namespace loomnet {

struct MetricsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bandwidths are decimal GB/s (1e9 bytes per second); payload sizes stay in
// bytes. busbw = algbw * factor(coll_type, N), the usual collective
// benchmarking convention.
struct Bandwidth {
  double algbw_GBps = 0;
  double busbw_GBps = 0;
};

double busbw_factor(CollType type, int nranks);
Bandwidth compute_bandwidth(CollType type, int nranks, uint64_t size_bytes, double duration_us);

struct CollectiveRecord {
  int64_t coll_id = 0;
  CollType coll_type = CollType::AllReduce;
  int nranks = 0;
  uint64_t size_bytes = 0;
  double start_us = 0;  // earliest participant start
  double end_us = 0;    // latest participant completion
  double duration_us = 0;
  double algbw_GBps = 0;
  double busbw_GBps = 0;
  int iter = 0;

  bool operator==(const CollectiveRecord&) const = default;
};

struct IterationStat {
  int iter = 0;
  double start_us = 0;
  double wall_us = 0;
  double min_busbw_GBps = 0;

  bool operator==(const IterationStat&) const = default;
};

struct RunReport {
  std::string mode = "VIRTUAL";
  nlohmann::ordered_json config_echo = nlohmann::ordered_json::object();
  double makespan_us = 0;
  std::vector<IterationStat> iterations;
  std::vector<CollectiveRecord> collectives;
  std::map<int, std::vector<OpRecord>> timelines;
  std::vector<std::pair<int, int>> critical_path;  // (rank, node id)
  double critical_path_us = 0;
};

// Assembles iteration stats, collective bandwidth records and the critical
// path from the raw per-rank records. Iteration boundaries come from `iter`
// markers on the graph; without markers the whole run is iteration 0.
RunReport build_report(const WorkloadGraph& graph, const RunRecords& records,
                       nlohmann::ordered_json config_echo, const std::string& mode);

struct CriticalPath {
  std::vector<std::pair<int, int>> nodes;
  double length_us = 0;
};

// Longest dependency-weighted chain through the measured records: intra-rank
// dep edges plus cross-rank edges tying a collective's participants together.
// Throws on dependency-inconsistent records. length_us never exceeds the
// makespan.
CriticalPath critical_path(const WorkloadGraph& graph,
                           const std::map<int, std::vector<OpRecord>>& timelines);

// Per-node slack from a forward/backward longest-path pass over the global
// DAG with each collective merged into one vertex. A node with slack s can be
// inflated by up to s without moving the makespan.
std::map<std::pair<int, int>, double> slack_us(
    const WorkloadGraph& graph, const std::map<int, std::vector<OpRecord>>& timelines,
    double* critical_length = nullptr);

std::string export_report_json(const RunReport& report);
RunReport parse_report(const std::string& text);
RunReport load_report(const std::string& path);
// Chrome trace-event array: one complete ("X") event per OpRecord.
std::string export_trace_json(const RunReport& report);
// `iter,wall_us,min_busbw_GBps` rows.
std::string export_csv_iter(const RunReport& report);

struct Divergence {
  struct Entry {
    int64_t coll_id = 0;
    int iter = 0;
    double measured_us = 0;
    double predicted_us = 0;
    double ratio = 1.0;
    bool flagged = false;
  };
  std::vector<Entry> entries;
  bool any_flagged = false;
  int onset_iter = -1;  // first iteration with a flagged collective
  double threshold = 1.25;
};

// Per-collective measured/predicted duration ratios; ratios above the
// threshold are flagged as anomalies. Throws on mismatched workloads.
Divergence compare_runs(const RunReport& measured, const RunReport& predicted,
                        double threshold = 1.25);

std::string export_divergence_json(const Divergence& d);

}  // namespace loomnet
