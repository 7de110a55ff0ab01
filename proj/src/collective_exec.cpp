#include "loomnet/collective_exec.hpp"

#include <cstring>

namespace loomnet {

CollectiveExec::CollectiveExec(CollectiveSchedule sched, TransportEndpoint* ep)
    : sched_(std::move(sched)), ep_(ep) {}

void CollectiveExec::enable_verification(std::vector<uint8_t> initial, bool separate_recv_buf) {
  verify_ = true;
  separate_ = separate_recv_buf;
  if (separate_) {
    sendbuf_ = std::move(initial);
    // Prime the result with the input so the chunk that stays local (own
    // position) is already in place; arriving chunks overwrite the rest.
    buf_ = sendbuf_;
  } else {
    buf_ = std::move(initial);
  }
}

const std::vector<uint8_t>& CollectiveExec::result() const { return buf_; }

std::vector<uint64_t> CollectiveExec::start() {
  started_ = true;
  while (step_ < sched_.steps.size()) {
    auto handles = post_step();
    if (!handles.empty()) return handles;
    step_++;  // step with no local operations
  }
  done_ = true;
  return {};
}

std::vector<uint64_t> CollectiveExec::post_step() {
  const CollStep& s = sched_.steps[step_];
  std::vector<uint64_t> handles;
  recv_data_.assign(s.recvs.size(), {});
  for (size_t i = 0; i < s.recvs.size(); i++) {
    const CollMsg& m = s.recvs[i];
    handles.push_back(ep_->post_recv(m.peer, m.bytes, m.tag, verify_ ? &recv_data_[i] : nullptr));
    outstanding_++;
  }
  for (const CollMsg& m : s.sends) {
    const uint8_t* payload = nullptr;
    if (verify_) {
      const std::vector<uint8_t>& src = separate_ ? sendbuf_ : buf_;
      if (m.offset + m.bytes > src.size())
        throw CollectiveError("send range exceeds collective buffer");
      payload = src.data() + m.offset;
    }
    handles.push_back(ep_->post_send(m.peer, m.bytes, m.tag, payload));
    outstanding_++;
  }
  return handles;
}

void CollectiveExec::apply_step_recvs() {
  if (!verify_) return;
  const CollStep& s = sched_.steps[step_];
  for (size_t i = 0; i < s.recvs.size(); i++) {
    const CollMsg& m = s.recvs[i];
    if (m.offset + m.bytes > buf_.size())
      throw CollectiveError("recv range exceeds collective buffer");
    const std::vector<uint8_t>& data = recv_data_[i];
    if (data.size() != m.bytes)
      throw CollectiveError("verification recv carried wrong byte count");
    if (m.combine) {
      if (m.bytes % 8 != 0 || m.offset % 8 != 0)
        throw CollectiveError("reduction chunk not 8-byte aligned");
      for (uint64_t off = 0; off < m.bytes; off += 8) {
        uint64_t a, b;
        std::memcpy(&a, buf_.data() + m.offset + off, 8);
        std::memcpy(&b, data.data() + off, 8);
        a += b;  // wrapping
        std::memcpy(buf_.data() + m.offset + off, &a, 8);
      }
    } else {
      std::memcpy(buf_.data() + m.offset, data.data(), m.bytes);
    }
  }
}

void CollectiveExec::on_completion(const Completion& c, std::vector<uint64_t>* new_handles) {
  if (done_ || failed_) return;
  if (!c.ok) {
    failed_ = true;
    error_ = c.error;
    return;
  }
  last_time_us_ = std::max(last_time_us_, c.time_us);
  if (outstanding_ == 0) throw CollectiveError("completion with no outstanding operation");
  if (--outstanding_ > 0) return;
  apply_step_recvs();
  step_++;
  // Empty steps (e.g. a non-participating broadcast round) complete in place.
  while (step_ < sched_.steps.size()) {
    auto handles = post_step();
    if (!handles.empty()) {
      if (new_handles) new_handles->insert(new_handles->end(), handles.begin(), handles.end());
      return;
    }
    step_++;
  }
  done_ = true;
}

}  // namespace loomnet
