#pragma once

#include <cstdint>
#include <vector>

#include "loomnet/collective.hpp"
#include "loomnet/transport.hpp"

namespace loomnet {

// Drives one CollectiveSchedule over a transport with step-barrier semantics:
// all sends and recvs of a step are posted together, and step k+1 is posted
// only once every operation of step k completed locally. In verification mode
// the executor owns real element buffers (u64 little-endian, wrapping-add
// reduction); in production mode payloads are filler.
class CollectiveExec {
 public:
  CollectiveExec(CollectiveSchedule sched, TransportEndpoint* ep);

  // Verification mode. `initial` is the rank's input buffer. When
  // separate_recv_buf is set (alltoall), sends read from the initial buffer
  // while recvs land in a distinct result buffer primed with the local chunk.
  void enable_verification(std::vector<uint8_t> initial, bool separate_recv_buf = false);

  // Posts the first step. Returns the handles posted so the caller can route
  // completions back here; empty means the schedule finished immediately.
  std::vector<uint64_t> start();

  // Feeds one completion belonging to this collective. Any handles newly
  // posted (the next step) are appended to *new_handles*.
  void on_completion(const Completion& c, std::vector<uint64_t>* new_handles);

  bool done() const { return done_; }
  bool failed() const { return failed_; }
  const std::string& error() const { return error_; }
  double completion_time_us() const { return last_time_us_; }
  int64_t coll_id() const { return sched_.coll_id; }

  // Verification result buffer.
  const std::vector<uint8_t>& result() const;

 private:
  std::vector<uint64_t> post_step();
  void apply_step_recvs();

  CollectiveSchedule sched_;
  TransportEndpoint* ep_;
  size_t step_ = 0;
  size_t outstanding_ = 0;
  bool started_ = false;
  bool done_ = false;
  bool failed_ = false;
  std::string error_;
  double last_time_us_ = 0;

  bool verify_ = false;
  bool separate_ = false;
  std::vector<uint8_t> sendbuf_;  // separate mode only
  std::vector<uint8_t> buf_;
  std::vector<std::vector<uint8_t>> recv_data_;  // one slot per recv of current step
};

}  // namespace loomnet
