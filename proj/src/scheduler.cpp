#include "loomnet/scheduler.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace loomnet {

RankState init_rank(const WorkloadGraph& graph, int rank) {
  if (rank < 0 || rank >= graph.num_ranks)
    throw SchedulerError("rank " + std::to_string(rank) + " out of range");
  RankState st;
  st.rank = rank;
  st.graph = &graph;
  auto it = graph.nodes.find(rank);
  if (it == graph.nodes.end()) return st;
  for (const auto& n : it->second) {
    st.by_id[n.id] = &n;
    st.pending_deps[n.id] = static_cast<int>(n.deps.size());
    if (n.deps.empty()) st.ready.insert(n.id);
    for (int d : n.deps) st.dependents[d].push_back(n.id);
  }
  return st;
}

std::vector<int> on_complete(RankState& st, int node_id) {
  if (!st.in_flight.erase(node_id))
    throw SchedulerError("node " + std::to_string(node_id) + " not in flight on rank " +
                         std::to_string(st.rank));
  st.completed.insert(node_id);
  std::vector<int> newly;
  auto it = st.dependents.find(node_id);
  if (it != st.dependents.end()) {
    for (int dep : it->second) {
      if (--st.pending_deps[dep] == 0) {
        st.ready.insert(dep);
        newly.push_back(dep);
      }
    }
  }
  std::sort(newly.begin(), newly.end());
  return newly;
}

namespace {
std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchedulerError("cannot open custom schedule '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}
}  // namespace

CollectiveSchedule plan_collective(const OperatorNode& node, const CommGroup& group,
                                   const EngineConfig& cfg) {
  std::string algo;
  auto it = cfg.algorithms.find(node.coll_type);
  if (it != cfg.algorithms.end()) {
    algo = it->second;
  } else {
    switch (node.coll_type) {
      case CollType::AllReduce:
      case CollType::AllGather:
      case CollType::ReduceScatter:
        algo = "RING";
        break;
      case CollType::AllToAll:
        algo = "PAIRWISE";
        break;
      case CollType::Broadcast:
        algo = "TREE";
        break;
    }
  }
  if (algo.rfind("CUSTOM:", 0) == 0)
    return load_custom_schedule(read_file(algo.substr(7)), group, node.rank);
  uint64_t gran = cfg.verification ? 8 : 1;
  switch (node.coll_type) {
    case CollType::AllReduce:
      if (algo != "RING") throw SchedulerError("unsupported allreduce algorithm '" + algo + "'");
      return plan_ring_allreduce(group, node.rank, node.coll_id, node.size_bytes, gran);
    case CollType::AllGather:
      if (algo != "RING") throw SchedulerError("unsupported allgather algorithm '" + algo + "'");
      return plan_ring_allgather(group, node.rank, node.coll_id, node.size_bytes);
    case CollType::ReduceScatter:
      if (algo != "RING")
        throw SchedulerError("unsupported reduce-scatter algorithm '" + algo + "'");
      return plan_ring_reduce_scatter(group, node.rank, node.coll_id, node.size_bytes, gran);
    case CollType::AllToAll:
      if (algo != "PAIRWISE") throw SchedulerError("unsupported alltoall algorithm '" + algo + "'");
      return plan_pairwise_alltoall(group, node.rank, node.coll_id, node.size_bytes, gran);
    case CollType::Broadcast:
      if (algo != "TREE") throw SchedulerError("unsupported broadcast algorithm '" + algo + "'");
      return plan_binomial_broadcast(group, group.members[0], node.rank, node.coll_id,
                                     node.size_bytes);
  }
  throw SchedulerError("unreachable");
}

VirtualDriver::VirtualDriver(const WorkloadGraph& graph, EngineConfig cfg, SimFabric* fabric)
    : graph_(graph), cfg_(std::move(cfg)), fabric_(fabric) {
  if (!cfg_.stub_comm_us && !fabric_) {
    // Fabric-free runs are fine as long as no operator needs the network.
    for (const auto& [rank, nodes] : graph_.nodes)
      for (const auto& n : nodes)
        if (n.kind == OpKind::CommColl || n.kind == OpKind::CommSend ||
            n.kind == OpKind::CommRecv)
          throw SchedulerError("communication operators need a fabric or stub mode");
  }
}

void VirtualDriver::schedule_timer(double t, std::function<void()> fn) {
  timers_.push_back({t, timer_seq_++, std::move(fn)});
  std::push_heap(timers_.begin(), timers_.end(), std::greater<>{});
}

void VirtualDriver::complete_node(PerRank& pr, int node_id, double t) {
  auto it = std::find_if(pr.state.records.begin(), pr.state.records.end(),
                         [&](const OpRecord& r) { return r.node_id == node_id; });
  if (it == pr.state.records.end())
    throw SchedulerError("completing node without a start record");
  it->end_us = t;
  on_complete(pr.state, node_id);
  pr.execs.erase(node_id);
}

void VirtualDriver::issue_node(PerRank& pr, int node_id) {
  RankState& st = pr.state;
  const OperatorNode* n = st.by_id.at(node_id);
  st.ready.erase(node_id);
  st.in_flight.insert(node_id);
  st.records.push_back({st.rank, node_id, n->kind, now_, now_});

  double extra = 0;
  if (is_comm(n->kind)) {
    auto eit = cfg_.coll_extra_us.find(n->coll_id);
    if (eit != cfg_.coll_extra_us.end()) extra = eit->second;
  }

  if (n->kind == OpKind::Compute || n->kind == OpKind::Memory) {
    schedule_timer(now_ + static_cast<double>(n->duration_us),
                   [this, &pr, node_id] { complete_node(pr, node_id, now_); });
    return;
  }
  if (cfg_.stub_comm_us) {
    schedule_timer(now_ + static_cast<double>(*cfg_.stub_comm_us) + extra,
                   [this, &pr, node_id] { complete_node(pr, node_id, now_); });
    return;
  }

  TransportEndpoint& ep = fabric_->endpoint(st.rank);
  if (n->kind == OpKind::CommSend) {
    uint64_t h = ep.post_send(n->peer, n->size_bytes, MessageTag::pack(n->coll_id, 0, 0));
    pr.handle_to_p2p_node[h] = node_id;
    return;
  }
  if (n->kind == OpKind::CommRecv) {
    uint64_t h = ep.post_recv(n->peer, n->size_bytes, MessageTag::pack(n->coll_id, 0, 0));
    pr.handle_to_p2p_node[h] = node_id;
    return;
  }

  // COMM_COLL
  const CommGroup* group = graph_.find_group(n->group_id);
  if (!group) throw SchedulerError("unknown group at node " + std::to_string(node_id));
  auto sched = plan_collective(*n, *group, cfg_);
  auto exec = std::make_unique<CollectiveExec>(std::move(sched), &ep);
  if (cfg_.verification) {
    std::mt19937_64 rng(cfg_.seed ^ (static_cast<uint64_t>(n->coll_id) << 8) ^
                        static_cast<uint64_t>(st.rank));
    uint64_t sz = n->size_bytes;
    if (n->coll_type == CollType::AllGather)
      sz = n->size_bytes * group->members.size();
    std::vector<uint8_t> buf(sz);
    for (uint64_t i = 0; i + 8 <= sz; i += 8) {
      uint64_t v = rng();
      std::memcpy(buf.data() + i, &v, 8);
    }
    exec->enable_verification(std::move(buf), n->coll_type == CollType::AllToAll);
  }
  auto handles = exec->start();
  if (exec->done()) {
    double done_at = now_ + extra;
    schedule_timer(done_at, [this, &pr, node_id] { complete_node(pr, node_id, now_); });
    pr.execs[node_id] = std::move(exec);  // keep alive until completion
    return;
  }
  for (uint64_t h : handles) pr.handle_to_coll_node[h] = node_id;
  pr.execs[node_id] = std::move(exec);
}

void VirtualDriver::issue_ready(PerRank& pr) {
  RankState& st = pr.state;
  while (!st.ready.empty() &&
         (cfg_.max_in_flight <= 0 ||
          static_cast<int>(st.in_flight.size()) < cfg_.max_in_flight)) {
    issue_node(pr, *st.ready.begin());
  }
}

void VirtualDriver::handle_completion(PerRank& pr, const Completion& c) {
  auto pit = pr.handle_to_p2p_node.find(c.handle);
  if (pit != pr.handle_to_p2p_node.end()) {
    int node_id = pit->second;
    pr.handle_to_p2p_node.erase(pit);
    if (!c.ok)
      throw SchedulerError("transport failure at rank " + std::to_string(pr.state.rank) +
                           " node " + std::to_string(node_id) + ": " + c.error);
    complete_node(pr, node_id, c.time_us);
    return;
  }
  auto cit = pr.handle_to_coll_node.find(c.handle);
  if (cit == pr.handle_to_coll_node.end())
    throw SchedulerError("completion for unknown handle");
  int node_id = cit->second;
  pr.handle_to_coll_node.erase(cit);
  CollectiveExec* exec = pr.execs.at(node_id).get();
  std::vector<uint64_t> new_handles;
  exec->on_completion(c, &new_handles);
  if (exec->failed())
    throw SchedulerError("transport failure at rank " + std::to_string(pr.state.rank) +
                         " node " + std::to_string(node_id) + ": " + exec->error());
  for (uint64_t h : new_handles) pr.handle_to_coll_node[h] = node_id;
  if (exec->done()) {
    const OperatorNode* n = pr.state.by_id.at(node_id);
    double extra = 0;
    auto eit = cfg_.coll_extra_us.find(n->coll_id);
    if (eit != cfg_.coll_extra_us.end()) extra = eit->second;
    double t = exec->completion_time_us() + extra;
    if (extra > 0) {
      schedule_timer(t, [this, &pr, node_id, t] { complete_node(pr, node_id, t); });
    } else {
      complete_node(pr, node_id, t);
    }
  }
}

RunRecords VirtualDriver::run() {
  ranks_.clear();
  ranks_.resize(graph_.num_ranks);
  for (int r = 0; r < graph_.num_ranks; r++) ranks_[r].state = init_rank(graph_, r);
  for (auto& pr : ranks_) issue_ready(pr);

  auto all_done = [&] {
    for (const auto& pr : ranks_)
      if (!pr.state.done()) return false;
    return true;
  };

  while (!all_done()) {
    double next = std::numeric_limits<double>::infinity();
    if (!timers_.empty()) next = timers_.front().time;
    if (fabric_) {
      if (auto t = fabric_->next_event_time()) next = std::min(next, *t);
    }
    if (std::isinf(next)) {
      std::string msg = "deadlock detected:";
      for (const auto& pr : ranks_) {
        size_t left = pr.state.total() - pr.state.completed.size();
        if (left > 0)
          msg += " rank " + std::to_string(pr.state.rank) + " has " + std::to_string(left) +
                 " uncompleted nodes;";
      }
      throw SchedulerError(msg);
    }
    now_ = std::max(now_, next);
    if (fabric_) {
      fabric_->advance_to(now_);
      for (auto& pr : ranks_)
        for (const Completion& c : fabric_->endpoint(pr.state.rank).poll())
          handle_completion(pr, c);
    }
    while (!timers_.empty() && timers_.front().time <= now_ + 1e-9) {
      std::pop_heap(timers_.begin(), timers_.end(), std::greater<>{});
      auto ev = std::move(timers_.back());
      timers_.pop_back();
      ev.fn();
    }
    for (auto& pr : ranks_) issue_ready(pr);
  }

  RunRecords out;
  for (auto& pr : ranks_) {
    auto recs = pr.state.records;
    std::sort(recs.begin(), recs.end(), [](const OpRecord& a, const OpRecord& b) {
      return a.start_us != b.start_us ? a.start_us < b.start_us : a.node_id < b.node_id;
    });
    out.per_rank[pr.state.rank] = std::move(recs);
    for (const auto& r : out.per_rank[pr.state.rank])
      out.makespan_us = std::max(out.makespan_us, r.end_us);
  }
  return out;
}

}  // namespace loomnet
