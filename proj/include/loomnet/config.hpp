#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "loomnet/netmodel.hpp"
#include "loomnet/scheduler.hpp"
#include "loomnet/workload.hpp"

namespace loomnet {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class RunMode { Virtual, Real };
enum class TransportKind { Sim, Socket };

// Run configuration document. Unknown fields are rejected so typos in
// experiment sweeps fail loudly. Relative paths resolve against the config
// file's directory.
struct RunConfig {
  RunMode mode = RunMode::Virtual;
  TransportKind transport = TransportKind::Sim;
  WorkloadGraph workload;
  Topology topology;
  std::vector<AnomalyEvent> anomalies;
  std::vector<std::string> hosts;  // index = rank; SOCKET only
  std::string coordinator = "127.0.0.1:29500";
  std::map<CollType, std::string> algorithms;
  uint64_t seed = 0;
  std::string output_dir = ".";
  bool verification = false;
  std::optional<uint64_t> stub_comm_us;
  std::map<int64_t, double> coll_delay;
  int max_in_flight = 0;
  double quiescence_timeout_s = 60;
  // Original document, echoed into reports.
  nlohmann::ordered_json echo;

  EngineConfig engine() const;
};

// Builds a workload from a synthesizer spec object:
//   {"kind":"data_parallel","num_ranks":..,"layers":..,"fwd_us":..,
//    "bwd_us":..,"grad_bytes":..,"iterations":..}
//   {"kind":"pipeline","num_ranks":..,"microbatches":..,"compute_us":..,
//    "activation_bytes":..}
WorkloadGraph synth_from_spec(const nlohmann::json& spec);

// `base_dir` anchors relative paths; pass the config file's directory.
RunConfig parse_run_config(const std::string& text, const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

}  // namespace loomnet
