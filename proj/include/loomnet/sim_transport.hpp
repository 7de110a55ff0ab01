#pragma once

#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "loomnet/netmodel.hpp"
#include "loomnet/transport.hpp"

namespace loomnet {

// Deterministic in-process fabric: one FluidNetwork shared by all rank
// endpoints, driven in virtual time by the caller (the virtual-mode driver).
// Frames arriving before their recv is posted are buffered per (peer, tag).
class SimFabric {
 public:
  // rank_to_host maps rank -> host id; empty = identity.
  SimFabric(Topology topo, std::vector<AnomalyEvent> timeline, int num_ranks,
            std::vector<int> rank_to_host = {});
  ~SimFabric();

  int num_ranks() const { return num_ranks_; }
  TransportEndpoint& endpoint(int rank);

  double now_us() const { return net_.now_us(); }
  std::optional<double> next_event_time() const { return net_.next_event_time(); }
  // Advances virtual time, moving finished transfers into per-rank
  // completion queues.
  void advance_to(double t_us);

  // Aggregate bytes handed to the network per source rank, for tests.
  uint64_t bytes_sent(int rank) const;

 private:
  friend class SimEndpoint;
  struct SendOp {
    uint64_t handle;
    int src, dst;
    uint64_t tag;
    uint64_t bytes;
    std::vector<uint8_t> payload;  // empty in production mode
  };
  struct PostedRecv {
    uint64_t handle;
    int peer;
    uint64_t tag;
    uint64_t bytes;
    std::vector<uint8_t>* out;
  };
  struct BufferedFrame {
    double arrival_us;
    uint64_t bytes;
    std::vector<uint8_t> payload;
  };

  uint64_t post_send(int rank, int peer, uint64_t bytes, uint64_t tag, const uint8_t* payload);
  uint64_t post_recv(int rank, int peer, uint64_t bytes, uint64_t tag, std::vector<uint8_t>* out);
  std::vector<Completion> poll(int rank);
  void deliver(const SendOp& op, double t);
  void match(int rank, const PostedRecv& r, BufferedFrame&& f, double t);

  FluidNetwork net_;
  int num_ranks_;
  std::vector<int> rank_to_host_;
  uint64_t next_handle_ = 1;
  std::map<FlowId, SendOp> in_flight_;
  std::vector<std::set<std::pair<int, uint64_t>>> outstanding_send_tags_;  // per src rank
  // per rank: (peer, tag) -> FIFO of posted recvs / buffered frames
  std::vector<std::map<std::pair<int, uint64_t>, std::deque<PostedRecv>>> recvs_;
  std::vector<std::map<std::pair<int, uint64_t>, std::deque<BufferedFrame>>> unexpected_;
  std::vector<size_t> unexpected_bytes_;  // per rank
  std::vector<std::vector<Completion>> completions_;
  std::vector<uint64_t> bytes_sent_;
  std::vector<std::unique_ptr<TransportEndpoint>> endpoints_;

  static constexpr size_t kUnexpectedLimit = 64ull << 20;
};

}  // namespace loomnet
