#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "loomnet/workload.hpp"

namespace loomnet {

struct CollectiveError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 64-bit message tag: coll_id (low 32 bits of the instance id), step, chunk.
struct MessageTag {
  static uint64_t pack(int64_t coll_id, uint32_t step, uint32_t chunk);
  static void unpack(uint64_t tag, uint32_t* coll_id, uint32_t* step, uint32_t* chunk);
};

// One point-to-point message of a collective step. offset/combine describe
// where the bytes live in the collective buffer, used only in verification
// mode; planners fill them for the built-in algorithms.
struct CollMsg {
  int peer = -1;
  uint64_t bytes = 0;
  uint64_t tag = 0;
  uint64_t offset = 0;
  bool combine = false;  // recv side: reduce into buffer instead of overwrite
};

struct CollStep {
  std::vector<CollMsg> sends;
  std::vector<CollMsg> recvs;
};

struct CollectiveSchedule {
  int64_t coll_id = 0;
  int rank = -1;
  std::vector<CollStep> steps;

  uint64_t total_send_bytes() const;
  uint64_t total_recv_bytes() const;
};

// Balanced split of `units` items into n parts: the first units%n parts get
// one extra item. Returned in part order, scaled by granularity bytes.
std::vector<uint64_t> balanced_chunks(uint64_t size_bytes, int n, uint64_t granularity = 1);

// Ring allreduce: N-1 reduce-scatter steps followed by N-1 allgather steps.
// At reduce-scatter step s, the rank at ring position p sends chunk (p-s) mod N
// and receives chunk (p-s-1) mod N from its predecessor.
CollectiveSchedule plan_ring_allreduce(const CommGroup& group, int rank, int64_t coll_id,
                                       uint64_t size_bytes, uint64_t granularity = 1);

// Ring allgather of per-rank contributions of contrib_bytes; buffer offsets
// assume the result layout [contrib of position 0 | position 1 | ...].
CollectiveSchedule plan_ring_allgather(const CommGroup& group, int rank, int64_t coll_id,
                                       uint64_t contrib_bytes);

CollectiveSchedule plan_ring_reduce_scatter(const CommGroup& group, int rank, int64_t coll_id,
                                            uint64_t size_bytes, uint64_t granularity = 1);

// Pairwise exchange: at step k, position p sends its chunk for position
// (p+k) mod N and receives from (p-k) mod N.
CollectiveSchedule plan_pairwise_alltoall(const CommGroup& group, int rank, int64_t coll_id,
                                          uint64_t sendbuf_bytes, uint64_t granularity = 1);

// Binomial tree broadcast from root (a member rank id), ceil(log2 N) rounds.
CollectiveSchedule plan_binomial_broadcast(const CommGroup& group, int root, int rank,
                                           int64_t coll_id, uint64_t size_bytes);

// Parses and cross-validates a custom schedule document, returning the slice
// for `rank`. Every send must have a matching recv on the peer's slice with
// equal bytes and tag; step indices are dense from 0; document tags must fit
// in 16 bits (they are packed with the coll id on the wire).
CollectiveSchedule load_custom_schedule(const std::string& text, const CommGroup& group,
                                        int rank);

}  // namespace loomnet
