#include "loomnet/sim_transport.hpp"

#include <algorithm>

namespace loomnet {

class SimEndpoint : public TransportEndpoint {
 public:
  SimEndpoint(SimFabric* fabric, int rank) : fabric_(fabric), rank_(rank) {}
  int rank() const override { return rank_; }
  uint64_t post_send(int peer, uint64_t bytes, uint64_t tag, const uint8_t* payload) override {
    return fabric_->post_send(rank_, peer, bytes, tag, payload);
  }
  uint64_t post_recv(int peer, uint64_t bytes, uint64_t tag, std::vector<uint8_t>* out) override {
    return fabric_->post_recv(rank_, peer, bytes, tag, out);
  }
  std::vector<Completion> poll() override { return fabric_->poll(rank_); }

 private:
  SimFabric* fabric_;
  int rank_;
};

SimFabric::SimFabric(Topology topo, std::vector<AnomalyEvent> timeline, int num_ranks,
                     std::vector<int> rank_to_host)
    : net_(std::move(topo), std::move(timeline)), num_ranks_(num_ranks) {
  if (rank_to_host.empty()) {
    for (int r = 0; r < num_ranks; r++) rank_to_host_.push_back(r);
  } else {
    rank_to_host_ = std::move(rank_to_host);
  }
  if (static_cast<int>(rank_to_host_.size()) != num_ranks)
    throw TransportError("rank_to_host size mismatch");
  outstanding_send_tags_.resize(num_ranks);
  recvs_.resize(num_ranks);
  unexpected_.resize(num_ranks);
  unexpected_bytes_.resize(num_ranks, 0);
  completions_.resize(num_ranks);
  bytes_sent_.resize(num_ranks, 0);
  for (int r = 0; r < num_ranks; r++)
    endpoints_.push_back(std::make_unique<SimEndpoint>(this, r));
}

SimFabric::~SimFabric() = default;

TransportEndpoint& SimFabric::endpoint(int rank) {
  if (rank < 0 || rank >= num_ranks_) throw TransportError("endpoint rank out of range");
  return *endpoints_[rank];
}

uint64_t SimFabric::bytes_sent(int rank) const { return bytes_sent_.at(rank); }

uint64_t SimFabric::post_send(int rank, int peer, uint64_t bytes, uint64_t tag,
                              const uint8_t* payload) {
  if (peer < 0 || peer >= num_ranks_ || peer == rank)
    throw TransportError("send to unconnected rank " + std::to_string(peer));
  auto key = std::make_pair(peer, tag);
  if (!outstanding_send_tags_[rank].insert(key).second)
    throw TransportError("tag " + std::to_string(tag) + " already in flight to rank " +
                         std::to_string(peer));
  uint64_t handle = next_handle_++;
  SendOp op{handle, rank, peer, tag, bytes, {}};
  if (payload && bytes > 0) op.payload.assign(payload, payload + bytes);
  FlowId fid = net_.add_flow(rank_to_host_[rank], rank_to_host_[peer], bytes);
  in_flight_.emplace(fid, std::move(op));
  bytes_sent_[rank] += bytes;
  return handle;
}

uint64_t SimFabric::post_recv(int rank, int peer, uint64_t bytes, uint64_t tag,
                              std::vector<uint8_t>* out) {
  if (peer < 0 || peer >= num_ranks_ || peer == rank)
    throw TransportError("recv from unconnected rank " + std::to_string(peer));
  uint64_t handle = next_handle_++;
  PostedRecv r{handle, peer, tag, bytes, out};
  auto key = std::make_pair(peer, tag);
  auto& uq = unexpected_[rank][key];
  if (!uq.empty()) {
    BufferedFrame f = std::move(uq.front());
    uq.pop_front();
    unexpected_bytes_[rank] -= f.payload.size();
    // Recv posted after arrival: completes now.
    match(rank, r, std::move(f), net_.now_us());
  } else {
    recvs_[rank][key].push_back(r);
  }
  return handle;
}

void SimFabric::match(int rank, const PostedRecv& r, BufferedFrame&& f, double t) {
  Completion c;
  c.handle = r.handle;
  c.time_us = t;
  c.is_send = false;
  c.peer = r.peer;
  c.tag = r.tag;
  c.bytes = f.bytes;
  if (f.bytes != r.bytes) {
    c.ok = false;
    c.error = "length mismatch tag " + std::to_string(r.tag) + ": posted " +
              std::to_string(r.bytes) + " got " + std::to_string(f.bytes);
  } else if (r.out) {
    *r.out = std::move(f.payload);
  }
  completions_[rank].push_back(std::move(c));
}

void SimFabric::deliver(const SendOp& op, double t) {
  // Sender side completes once the peer has the full frame.
  outstanding_send_tags_[op.src].erase({op.dst, op.tag});
  completions_[op.src].push_back(
      {op.handle, t, true, "", true, op.dst, op.tag, op.bytes});
  auto key = std::make_pair(op.src, op.tag);
  auto& rq = recvs_[op.dst][key];
  BufferedFrame f{t, op.bytes, op.payload};
  if (!rq.empty()) {
    PostedRecv r = rq.front();
    rq.pop_front();
    match(op.dst, r, std::move(f), t);
  } else {
    unexpected_bytes_[op.dst] += f.payload.size();
    if (unexpected_bytes_[op.dst] > kUnexpectedLimit)
      throw TransportError("unexpected-message buffer overflow on rank " +
                           std::to_string(op.dst));
    unexpected_[op.dst][key].push_back(std::move(f));
  }
}

void SimFabric::advance_to(double t) {
  for (const FlowDone& d : net_.advance_to(t)) {
    auto it = in_flight_.find(d.id);
    if (it == in_flight_.end()) continue;
    SendOp op = std::move(it->second);
    in_flight_.erase(it);
    if (d.ok) {
      deliver(op, d.time_us);
    } else {
      outstanding_send_tags_[op.src].erase({op.dst, op.tag});
      completions_[op.src].push_back(
          {op.handle, d.time_us, false, d.error, true, op.dst, op.tag, op.bytes});
    }
  }
}

std::vector<Completion> SimFabric::poll(int rank) {
  std::vector<Completion> out;
  out.swap(completions_[rank]);
  return out;
}

}  // namespace loomnet
