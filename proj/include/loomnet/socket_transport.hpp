#pragma once

#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "loomnet/netmodel.hpp"
#include "loomnet/transport.hpp"

namespace loomnet {

struct SocketOptions {
  int rank = -1;
  int num_ranks = 0;
  // host:port of the rendezvous listener; rank 0 binds it, everyone else
  // connects to it.
  std::string coordinator;
  // Host id of this rank in the anomaly timeline ("nic:<host>" targets).
  int host_id = -1;
  // Egress shaping baseline. Shaping is active only when a timeline is given.
  double nic_gbps = 0;
  std::vector<AnomalyEvent> timeline;
  double connect_timeout_s = 30;
};

// TCP mesh endpoint for one rank of a multi-process run. Rendezvous through
// the coordinator distributes each rank's data-listener address and a shared
// epoch; all completion timestamps are CLOCK_MONOTONIC microseconds relative
// to that epoch (ranks on one machine share the clock). One receiver thread
// per peer feeds a single completion queue; one sender thread drains a FIFO
// through a token bucket when egress shaping is configured.
class SocketEndpoint : public TransportEndpoint {
 public:
  explicit SocketEndpoint(SocketOptions opts);
  ~SocketEndpoint() override;

  int rank() const override { return opts_.rank; }
  uint64_t post_send(int peer, uint64_t bytes, uint64_t tag,
                     const uint8_t* payload = nullptr) override;
  uint64_t post_recv(int peer, uint64_t bytes, uint64_t tag,
                     std::vector<uint8_t>* out = nullptr) override;
  std::vector<Completion> poll() override;

  // Blocks until at least one completion is queued; false on timeout.
  bool wait(double timeout_s);

  // Microseconds since the shared run epoch.
  double now_us() const;

 private:
  struct PostedRecv {
    uint64_t handle;
    int peer;
    uint64_t tag;
    uint64_t bytes;
    std::vector<uint8_t>* out;
  };
  struct ArrivedFrame {
    double time_us;
    uint64_t bytes;
    std::vector<uint8_t> payload;
  };
  struct SendJob {
    uint64_t handle;
    int peer;
    uint64_t tag;
    uint64_t bytes;
    std::vector<uint8_t> frame;
    double admit_us;  // earliest departure (added-latency anomalies)
  };

  void rendezvous();
  void connect_mesh();
  void receiver_loop(int peer);
  void sender_loop();
  void on_frame(int peer, WireFrame&& f, double t);
  void push_completion(Completion c);
  // Egress bytes/us allowed at time t; nullopt while the link is down.
  std::optional<double> egress_rate(double t) const;
  double added_latency(double t) const;
  bool link_down(double t) const;

  SocketOptions opts_;
  double epoch_us_ = 0;  // raw monotonic microseconds at run start
  int listen_fd_ = -1;
  std::vector<int> peer_fd_;
  std::vector<std::thread> receivers_;
  std::thread sender_;

  std::mutex mu_;
  std::condition_variable cv_;          // completions available
  std::condition_variable send_cv_;     // sender work available
  std::vector<Completion> completions_;
  std::deque<SendJob> sendq_;
  std::map<std::pair<int, uint64_t>, std::deque<PostedRecv>> recvs_;
  std::map<std::pair<int, uint64_t>, std::deque<ArrivedFrame>> unexpected_;
  size_t unexpected_bytes_ = 0;
  std::set<std::pair<int, uint64_t>> outstanding_send_tags_;
  uint64_t next_handle_ = 1;
  bool stopping_ = false;

  static constexpr size_t kUnexpectedLimit = 64ull << 20;
};

}  // namespace loomnet
