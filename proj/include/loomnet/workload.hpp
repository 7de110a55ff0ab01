#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace loomnet {

enum class OpKind { Compute, Memory, CommColl, CommSend, CommRecv };
enum class CollType { AllReduce, AllGather, ReduceScatter, AllToAll, Broadcast };

const char* to_string(OpKind k);
const char* to_string(CollType c);
OpKind op_kind_from_string(const std::string& s);
CollType coll_type_from_string(const std::string& s);

inline bool is_comm(OpKind k) {
  return k == OpKind::CommColl || k == OpKind::CommSend || k == OpKind::CommRecv;
}

// One operator in a rank's dependency graph. Communication fields are only
// meaningful for the communication kinds; duration_us only for Compute/Memory.
struct OperatorNode {
  int id = 0;
  int rank = 0;
  OpKind kind = OpKind::Compute;
  uint64_t duration_us = 0;
  CollType coll_type = CollType::AllReduce;
  uint64_t size_bytes = 0;
  int peer = -1;
  int group_id = -1;
  int64_t coll_id = -1;
  std::vector<int> deps;
  std::optional<int> iter;  // iteration marker, set on the first node of an iteration

  bool operator==(const OperatorNode&) const = default;
};

struct CommGroup {
  int group_id = 0;
  std::vector<int> members;

  bool operator==(const CommGroup&) const = default;
};

struct WorkloadGraph {
  int num_ranks = 1;
  std::vector<CommGroup> groups;
  std::map<int, std::vector<OperatorNode>> nodes;  // rank -> nodes

  const CommGroup* find_group(int group_id) const;
  const OperatorNode* find_node(int rank, int id) const;
  size_t total_nodes() const;

  bool operator==(const WorkloadGraph&) const = default;
};

struct WorkloadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Parses the structured-text workload document. Throws WorkloadError on
// syntax errors and on any validate() violation.
WorkloadGraph parse_workload(const std::string& text);
WorkloadGraph load_workload(const std::string& path);
std::string serialize_workload(const WorkloadGraph& graph);

// Returns every invariant violation; empty means the graph is valid.
std::vector<std::string> validate(const WorkloadGraph& graph);

// Topological order of one rank's nodes (deps first). Throws on cycles.
std::vector<int> topo_order(const WorkloadGraph& graph, int rank);

// Synthetic data-parallel workload: per iteration, a forward chain, a backward
// chain, and one allreduce per layer hanging off each backward layer. The
// next iteration's first forward op depends on all of this iteration's
// allreduces.
WorkloadGraph synth_data_parallel(int num_ranks, int num_layers, uint64_t fwd_us,
                                  uint64_t bwd_us, uint64_t grad_bytes, int iterations);

// Synthetic 1F pipeline: each rank computes per microbatch and forwards
// activations to the next rank.
WorkloadGraph synth_pipeline(int num_ranks, int microbatches, uint64_t stage_us,
                             uint64_t act_bytes);

}  // namespace loomnet
