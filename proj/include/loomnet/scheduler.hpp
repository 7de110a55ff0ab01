#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "loomnet/collective.hpp"
#include "loomnet/collective_exec.hpp"
#include "loomnet/sim_transport.hpp"
#include "loomnet/workload.hpp"

namespace loomnet {

struct SchedulerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OpRecord {
  int rank = 0;
  int node_id = 0;
  OpKind kind = OpKind::Compute;
  double start_us = 0;
  double end_us = 0;

  bool operator==(const OpRecord&) const = default;
};

// Dependency bookkeeping for one rank. A node is in exactly one of: unready
// (pending_deps > 0), ready, in_flight, completed.
struct RankState {
  int rank = 0;
  const WorkloadGraph* graph = nullptr;
  std::unordered_map<int, int> pending_deps;
  std::unordered_map<int, std::vector<int>> dependents;
  std::set<int> ready;  // ordered: ties issue in ascending node id
  std::set<int> in_flight;
  std::set<int> completed;
  std::unordered_map<int, const OperatorNode*> by_id;
  std::vector<OpRecord> records;

  size_t total() const { return by_id.size(); }
  bool done() const { return completed.size() == total(); }
};

RankState init_rank(const WorkloadGraph& graph, int rank);

// Moves node_id from in_flight to completed and returns the dependents that
// became ready (also inserted into state.ready).
std::vector<int> on_complete(RankState& state, int node_id);

struct EngineConfig {
  bool verification = false;
  // Stub mode: communication operators become fixed local delays; the
  // transport is never touched. Used for critical-path studies.
  std::optional<uint64_t> stub_comm_us;
  // Extra completion delay per collective instance id (duration inflation).
  std::map<int64_t, double> coll_extra_us;
  // Per collective type: "RING", "TREE", "PAIRWISE", or "CUSTOM:<path>".
  std::map<CollType, std::string> algorithms;
  int max_in_flight = 0;  // per rank; 0 = unlimited
  uint64_t seed = 0;
};

// Plans the schedule for one COMM_COLL node under the configured algorithm.
// Broadcast roots default to the first group member.
CollectiveSchedule plan_collective(const OperatorNode& node, const CommGroup& group,
                                   const EngineConfig& cfg);

struct RunRecords {
  std::map<int, std::vector<OpRecord>> per_rank;
  double makespan_us = 0;
};

// Single-process deterministic executor: every rank of the graph runs over a
// shared simulated fabric on one virtual-time event loop. Completion events
// at equal timestamps are processed in insertion order; ready nodes are
// issued in ascending (rank, node id) order.
class VirtualDriver {
 public:
  VirtualDriver(const WorkloadGraph& graph, EngineConfig cfg, SimFabric* fabric);
  RunRecords run();

 private:
  struct PerRank;

  void issue_ready(PerRank& pr);
  void issue_node(PerRank& pr, int node_id);
  void complete_node(PerRank& pr, int node_id, double t);
  void schedule_timer(double t, std::function<void()> fn);
  void handle_completion(PerRank& pr, const Completion& c);

  const WorkloadGraph& graph_;
  EngineConfig cfg_;
  SimFabric* fabric_;  // null in stub mode
  double now_ = 0;

  struct TimerEvent {
    double time;
    uint64_t seq;
    std::function<void()> fn;
    bool operator>(const TimerEvent& o) const {
      return time != o.time ? time > o.time : seq > o.seq;
    }
  };
  std::vector<TimerEvent> timers_;  // min-heap
  uint64_t timer_seq_ = 0;

  struct PerRank {
    RankState state;
    // Active collective executors keyed by node id, and handle routing.
    std::map<int, std::unique_ptr<CollectiveExec>> execs;
    std::unordered_map<uint64_t, int> handle_to_coll_node;
    std::unordered_map<uint64_t, int> handle_to_p2p_node;
  };
  std::vector<PerRank> ranks_;
};

}  // namespace loomnet
