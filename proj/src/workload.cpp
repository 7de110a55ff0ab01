#include "loomnet/workload.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace loomnet {

using ordered_json = nlohmann::ordered_json;

const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::Compute: return "COMPUTE";
    case OpKind::Memory: return "MEMORY";
    case OpKind::CommColl: return "COMM_COLL";
    case OpKind::CommSend: return "COMM_SEND";
    case OpKind::CommRecv: return "COMM_RECV";
  }
  return "?";
}

const char* to_string(CollType c) {
  switch (c) {
    case CollType::AllReduce: return "ALLREDUCE";
    case CollType::AllGather: return "ALLGATHER";
    case CollType::ReduceScatter: return "REDUCESCATTER";
    case CollType::AllToAll: return "ALLTOALL";
    case CollType::Broadcast: return "BROADCAST";
  }
  return "?";
}

OpKind op_kind_from_string(const std::string& s) {
  if (s == "COMPUTE") return OpKind::Compute;
  if (s == "MEMORY") return OpKind::Memory;
  if (s == "COMM_COLL") return OpKind::CommColl;
  if (s == "COMM_SEND") return OpKind::CommSend;
  if (s == "COMM_RECV") return OpKind::CommRecv;
  throw WorkloadError("unknown operator kind '" + s + "'");
}

CollType coll_type_from_string(const std::string& s) {
  if (s == "ALLREDUCE") return CollType::AllReduce;
  if (s == "ALLGATHER") return CollType::AllGather;
  if (s == "REDUCESCATTER") return CollType::ReduceScatter;
  if (s == "ALLTOALL") return CollType::AllToAll;
  if (s == "BROADCAST") return CollType::Broadcast;
  throw WorkloadError("unknown collective type '" + s + "'");
}

const CommGroup* WorkloadGraph::find_group(int group_id) const {
  for (const auto& g : groups)
    if (g.group_id == group_id) return &g;
  return nullptr;
}

const OperatorNode* WorkloadGraph::find_node(int rank, int id) const {
  auto it = nodes.find(rank);
  if (it == nodes.end()) return nullptr;
  for (const auto& n : it->second)
    if (n.id == id) return &n;
  return nullptr;
}

size_t WorkloadGraph::total_nodes() const {
  size_t n = 0;
  for (const auto& [r, v] : nodes) n += v.size();
  return n;
}

namespace {

std::string node_tag(int rank, int id) {
  return "rank " + std::to_string(rank) + " node " + std::to_string(id);
}

// Allowed keys per kind; id/rank/kind/deps are always required, iter optional.
void check_node_fields(const ordered_json& j, OpKind kind, int rank) {
  static const std::set<std::string> common = {"id", "rank", "kind", "deps", "iter"};
  std::set<std::string> allowed = common;
  switch (kind) {
    case OpKind::Compute:
    case OpKind::Memory:
      allowed.insert("duration_us");
      break;
    case OpKind::CommColl:
      allowed.insert({"coll_type", "size_bytes", "group_id", "coll_id"});
      break;
    case OpKind::CommSend:
    case OpKind::CommRecv:
      allowed.insert({"size_bytes", "peer", "group_id", "coll_id"});
      break;
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw WorkloadError("field '" + it.key() + "' not allowed for kind " +
                          std::string(to_string(kind)) + " (rank " + std::to_string(rank) +
                          ")");
  }
  std::set<std::string> required = {"id", "rank", "kind", "deps"};
  switch (kind) {
    case OpKind::Compute:
    case OpKind::Memory:
      required.insert("duration_us");
      break;
    case OpKind::CommColl:
      required.insert({"coll_type", "size_bytes", "group_id", "coll_id"});
      break;
    case OpKind::CommSend:
    case OpKind::CommRecv:
      required.insert({"size_bytes", "peer", "group_id", "coll_id"});
      break;
  }
  for (const auto& k : required)
    if (!j.contains(k))
      throw WorkloadError("missing field '" + k + "' for kind " +
                          std::string(to_string(kind)) + " (rank " + std::to_string(rank) +
                          ")");
}

OperatorNode parse_node(const ordered_json& j, int rank) {
  if (!j.is_object()) throw WorkloadError("node must be an object (rank " + std::to_string(rank) + ")");
  if (!j.contains("kind")) throw WorkloadError("node missing 'kind' (rank " + std::to_string(rank) + ")");
  OperatorNode n;
  n.kind = op_kind_from_string(j.at("kind").get<std::string>());
  check_node_fields(j, n.kind, rank);
  n.id = j.at("id").get<int>();
  n.rank = j.at("rank").get<int>();
  n.deps = j.at("deps").get<std::vector<int>>();
  if (j.contains("iter")) n.iter = j.at("iter").get<int>();
  switch (n.kind) {
    case OpKind::Compute:
    case OpKind::Memory:
      n.duration_us = j.at("duration_us").get<uint64_t>();
      break;
    case OpKind::CommColl:
      n.coll_type = coll_type_from_string(j.at("coll_type").get<std::string>());
      n.size_bytes = j.at("size_bytes").get<uint64_t>();
      n.group_id = j.at("group_id").get<int>();
      n.coll_id = j.at("coll_id").get<int64_t>();
      break;
    case OpKind::CommSend:
    case OpKind::CommRecv:
      n.size_bytes = j.at("size_bytes").get<uint64_t>();
      n.peer = j.at("peer").get<int>();
      n.group_id = j.at("group_id").get<int>();
      n.coll_id = j.at("coll_id").get<int64_t>();
      break;
  }
  return n;
}

ordered_json node_to_json(const OperatorNode& n) {
  ordered_json j;
  j["id"] = n.id;
  j["rank"] = n.rank;
  j["kind"] = to_string(n.kind);
  switch (n.kind) {
    case OpKind::Compute:
    case OpKind::Memory:
      j["duration_us"] = n.duration_us;
      break;
    case OpKind::CommColl:
      j["coll_type"] = to_string(n.coll_type);
      j["size_bytes"] = n.size_bytes;
      j["group_id"] = n.group_id;
      j["coll_id"] = n.coll_id;
      break;
    case OpKind::CommSend:
    case OpKind::CommRecv:
      j["size_bytes"] = n.size_bytes;
      j["peer"] = n.peer;
      j["group_id"] = n.group_id;
      j["coll_id"] = n.coll_id;
      break;
  }
  j["deps"] = n.deps;
  if (n.iter) j["iter"] = *n.iter;
  return j;
}

}  // namespace

WorkloadGraph parse_workload(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw WorkloadError(std::string("workload syntax error: ") + e.what());
  }
  WorkloadGraph g;
  try {
    if (!j.is_object()) throw WorkloadError("workload document must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k != "version" && k != "num_ranks" && k != "groups" && k != "nodes")
        throw WorkloadError("unknown top-level field '" + k + "'");
    }
    if (j.at("version").get<int>() != 1) throw WorkloadError("unsupported workload version");
    g.num_ranks = j.at("num_ranks").get<int>();
    if (g.num_ranks < 1) throw WorkloadError("num_ranks must be >= 1");
    for (const auto& gj : j.at("groups")) {
      CommGroup grp;
      grp.group_id = gj.at("group_id").get<int>();
      grp.members = gj.at("members").get<std::vector<int>>();
      g.groups.push_back(std::move(grp));
    }
    for (auto it = j.at("nodes").begin(); it != j.at("nodes").end(); ++it) {
      int rank = std::stoi(it.key());
      std::vector<OperatorNode> v;
      for (const auto& nj : it.value()) v.push_back(parse_node(nj, rank));
      g.nodes[rank] = std::move(v);
    }
  } catch (const nlohmann::json::exception& e) {
    throw WorkloadError(std::string("workload schema error: ") + e.what());
  }
  auto violations = validate(g);
  if (!violations.empty()) {
    std::string msg = "invalid workload:";
    for (const auto& v : violations) msg += "\n  " + v;
    throw WorkloadError(msg);
  }
  return g;
}

WorkloadGraph load_workload(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw WorkloadError("cannot open workload file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_workload(ss.str());
}

std::string serialize_workload(const WorkloadGraph& g) {
  ordered_json j;
  j["version"] = 1;
  j["num_ranks"] = g.num_ranks;
  j["groups"] = ordered_json::array();
  for (const auto& grp : g.groups)
    j["groups"].push_back({{"group_id", grp.group_id}, {"members", grp.members}});
  ordered_json nodes = ordered_json::object();
  for (const auto& [rank, v] : g.nodes) {
    ordered_json arr = ordered_json::array();
    for (const auto& n : v) arr.push_back(node_to_json(n));
    nodes[std::to_string(rank)] = std::move(arr);
  }
  j["nodes"] = std::move(nodes);
  return j.dump(2) + "\n";
}

std::vector<std::string> validate(const WorkloadGraph& g) {
  std::vector<std::string> out;
  if (g.num_ranks < 1) out.push_back("num_ranks must be >= 1");

  std::set<int> group_ids;
  for (const auto& grp : g.groups) {
    if (!group_ids.insert(grp.group_id).second)
      out.push_back("duplicate group id " + std::to_string(grp.group_id));
    if (grp.members.empty())
      out.push_back("group " + std::to_string(grp.group_id) + " has no members");
    std::set<int> seen;
    for (int m : grp.members) {
      if (m < 0 || m >= g.num_ranks)
        out.push_back("group " + std::to_string(grp.group_id) + " member " +
                      std::to_string(m) + " out of range");
      if (!seen.insert(m).second)
        out.push_back("group " + std::to_string(grp.group_id) + " member " +
                      std::to_string(m) + " repeated");
    }
  }

  for (const auto& [rank, v] : g.nodes) {
    if (rank < 0 || rank >= g.num_ranks) {
      out.push_back("node list for out-of-range rank " + std::to_string(rank));
      continue;
    }
    std::unordered_map<int, const OperatorNode*> by_id;
    for (const auto& n : v) {
      if (!by_id.emplace(n.id, &n).second)
        out.push_back("duplicate node id " + node_tag(rank, n.id));
      if (n.rank != rank)
        out.push_back("rank field mismatch " + node_tag(rank, n.id));
      if (is_comm(n.kind)) {
        if (!g.find_group(n.group_id))
          out.push_back("unknown group " + std::to_string(n.group_id) + " " +
                        node_tag(rank, n.id));
      }
      if (n.kind == OpKind::CommSend || n.kind == OpKind::CommRecv) {
        if (n.peer == rank) out.push_back("peer equals own rank " + node_tag(rank, n.id));
        if (n.peer < 0 || n.peer >= g.num_ranks)
          out.push_back("peer out of range " + node_tag(rank, n.id));
      }
    }
    for (const auto& n : v) {
      for (int d : n.deps) {
        if (d == n.id) out.push_back("self-dependency " + node_tag(rank, n.id));
        else if (!by_id.count(d))
          out.push_back("dangling dep " + std::to_string(d) + " " + node_tag(rank, n.id));
      }
    }
    // Cycle check by iterative DFS (Kahn's algorithm is kept as the test oracle).
    std::unordered_map<int, int> color;  // 0 white, 1 gray, 2 black
    bool cyclic = false;
    for (const auto& start : v) {
      if (color[start.id] != 0) continue;
      std::vector<std::pair<int, size_t>> stack{{start.id, 0}};
      color[start.id] = 1;
      while (!stack.empty() && !cyclic) {
        auto& [id, di] = stack.back();
        const OperatorNode* n = by_id.count(id) ? by_id[id] : nullptr;
        if (!n || di >= n->deps.size()) {
          color[id] = 2;
          stack.pop_back();
          continue;
        }
        int d = n->deps[di++];
        if (d == id || !by_id.count(d)) continue;  // reported above
        if (color[d] == 1) { cyclic = true; break; }
        if (color[d] == 0) {
          color[d] = 1;
          stack.push_back({d, 0});
        }
      }
      if (cyclic) break;
    }
    if (cyclic) out.push_back("cycle detected rank " + std::to_string(rank));
  }

  // Cross-rank collective multiplicity.
  struct CollInfo { CollType type; int group_id; uint64_t size; std::map<int, int> per_rank; };
  std::map<int64_t, CollInfo> colls;
  for (const auto& [rank, v] : g.nodes) {
    for (const auto& n : v) {
      if (n.kind != OpKind::CommColl) continue;
      auto it = colls.find(n.coll_id);
      if (it == colls.end()) {
        colls[n.coll_id] = {n.coll_type, n.group_id, n.size_bytes, {{rank, 1}}};
      } else {
        CollInfo& ci = it->second;
        if (ci.type != n.coll_type || ci.group_id != n.group_id || ci.size != n.size_bytes)
          out.push_back("inconsistent collective " + std::to_string(n.coll_id) + " " +
                        node_tag(rank, n.id));
        ci.per_rank[rank]++;
      }
    }
  }
  for (const auto& [cid, ci] : colls) {
    const CommGroup* grp = g.find_group(ci.group_id);
    if (!grp) continue;  // reported per-node above
    for (int m : grp->members) {
      auto it = ci.per_rank.find(m);
      int cnt = it == ci.per_rank.end() ? 0 : it->second;
      if (cnt != 1)
        out.push_back("unmatched collective " + std::to_string(cid) + " rank " +
                      std::to_string(m) + (cnt == 0 ? " missing" : " repeated"));
    }
    for (const auto& [r, cnt] : ci.per_rank) {
      if (std::find(grp->members.begin(), grp->members.end(), r) == grp->members.end())
        out.push_back("collective " + std::to_string(cid) + " appears on non-member rank " +
                      std::to_string(r));
    }
  }

  // Send/recv pairing: multiset match on (src, dst, coll_id) with equal sizes.
  std::map<std::tuple<int, int, int64_t>, std::deque<const OperatorNode*>> sends, recvs;
  for (const auto& [rank, v] : g.nodes) {
    for (const auto& n : v) {
      if (n.kind == OpKind::CommSend) sends[{rank, n.peer, n.coll_id}].push_back(&n);
      if (n.kind == OpKind::CommRecv) recvs[{n.peer, rank, n.coll_id}].push_back(&n);
    }
  }
  for (const auto& [key, sq] : sends) {
    auto [src, dst, cid] = key;
    auto rit = recvs.find(key);
    size_t nr = rit == recvs.end() ? 0 : rit->second.size();
    if (sq.size() != nr) {
      out.push_back("unmatched send/recv coll_id " + std::to_string(cid) + " between rank " +
                    std::to_string(src) + " and rank " + std::to_string(dst));
      continue;
    }
    for (size_t i = 0; i < sq.size(); i++) {
      if (sq[i]->size_bytes != rit->second[i]->size_bytes)
        out.push_back("send/recv size mismatch coll_id " + std::to_string(cid) + " " +
                      node_tag(src, sq[i]->id));
    }
  }
  for (const auto& [key, rq] : recvs) {
    if (!sends.count(key)) {
      auto [src, dst, cid] = key;
      out.push_back("recv without matching send coll_id " + std::to_string(cid) + " rank " +
                    std::to_string(dst));
    }
  }
  return out;
}

std::vector<int> topo_order(const WorkloadGraph& g, int rank) {
  auto it = g.nodes.find(rank);
  if (it == g.nodes.end()) return {};
  const auto& v = it->second;
  std::unordered_map<int, int> indeg;
  std::unordered_map<int, std::vector<int>> dependents;
  for (const auto& n : v) indeg[n.id] = static_cast<int>(n.deps.size());
  for (const auto& n : v)
    for (int d : n.deps) dependents[d].push_back(n.id);
  // Ascending-id tie break for determinism.
  std::set<int> ready;
  for (const auto& n : v)
    if (indeg[n.id] == 0) ready.insert(n.id);
  std::vector<int> order;
  while (!ready.empty()) {
    int id = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(id);
    for (int dep : dependents[id])
      if (--indeg[dep] == 0) ready.insert(dep);
  }
  if (order.size() != v.size())
    throw WorkloadError("cycle detected rank " + std::to_string(rank));
  return order;
}

WorkloadGraph synth_data_parallel(int num_ranks, int num_layers, uint64_t fwd_us,
                                  uint64_t bwd_us, uint64_t grad_bytes, int iterations) {
  if (num_ranks < 1 || num_layers < 1 || iterations < 1)
    throw WorkloadError("synth_data_parallel: counts must be >= 1");
  WorkloadGraph g;
  g.num_ranks = num_ranks;
  CommGroup world{0, {}};
  for (int r = 0; r < num_ranks; r++) world.members.push_back(r);
  g.groups.push_back(world);
  uint64_t ar_bytes = grad_bytes / static_cast<uint64_t>(num_layers);
  for (int r = 0; r < num_ranks; r++) {
    std::vector<OperatorNode> v;
    int next_id = 0;
    std::vector<int> prev_allreduces;
    for (int it = 0; it < iterations; it++) {
      std::vector<int> fwd_ids, bwd_ids, ar_ids;
      for (int l = 0; l < num_layers; l++) {
        OperatorNode n;
        n.id = next_id++;
        n.rank = r;
        n.kind = OpKind::Compute;
        n.duration_us = fwd_us;
        if (l > 0) n.deps = {fwd_ids.back()};
        else {
          n.deps = prev_allreduces;
          n.iter = it;
        }
        fwd_ids.push_back(n.id);
        v.push_back(std::move(n));
      }
      for (int l = num_layers - 1; l >= 0; l--) {
        OperatorNode b;
        b.id = next_id++;
        b.rank = r;
        b.kind = OpKind::Compute;
        b.duration_us = bwd_us;
        b.deps = bwd_ids.empty() ? std::vector<int>{fwd_ids.back()}
                                 : std::vector<int>{bwd_ids.back()};
        bwd_ids.push_back(b.id);
        v.push_back(std::move(b));

        OperatorNode a;
        a.id = next_id++;
        a.rank = r;
        a.kind = OpKind::CommColl;
        a.coll_type = CollType::AllReduce;
        a.size_bytes = ar_bytes;
        a.group_id = 0;
        a.coll_id = static_cast<int64_t>(it) * num_layers + l;
        a.deps = {b.id};
        ar_ids.push_back(a.id);
        v.push_back(std::move(a));
      }
      prev_allreduces = ar_ids;
    }
    g.nodes[r] = std::move(v);
  }
  return g;
}

WorkloadGraph synth_pipeline(int num_ranks, int microbatches, uint64_t stage_us,
                             uint64_t act_bytes) {
  if (num_ranks < 2) throw WorkloadError("synth_pipeline: num_ranks must be >= 2");
  if (microbatches < 1) throw WorkloadError("synth_pipeline: microbatches must be >= 1");
  WorkloadGraph g;
  g.num_ranks = num_ranks;
  CommGroup world{0, {}};
  for (int r = 0; r < num_ranks; r++) world.members.push_back(r);
  g.groups.push_back(world);
  for (int r = 0; r < num_ranks; r++) {
    std::vector<OperatorNode> v;
    int next_id = 0;
    int prev_compute = -1;
    for (int m = 0; m < microbatches; m++) {
      int recv_id = -1;
      if (r > 0) {
        OperatorNode rv;
        rv.id = next_id++;
        rv.rank = r;
        rv.kind = OpKind::CommRecv;
        rv.size_bytes = act_bytes;
        rv.peer = r - 1;
        rv.group_id = 0;
        rv.coll_id = static_cast<int64_t>(m) * num_ranks + (r - 1);
        recv_id = rv.id;
        v.push_back(std::move(rv));
      }
      OperatorNode c;
      c.id = next_id++;
      c.rank = r;
      c.kind = OpKind::Compute;
      c.duration_us = stage_us;
      if (recv_id >= 0) c.deps.push_back(recv_id);
      if (prev_compute >= 0) c.deps.push_back(prev_compute);
      prev_compute = c.id;
      v.push_back(std::move(c));
      if (r < num_ranks - 1) {
        OperatorNode s;
        s.id = next_id++;
        s.rank = r;
        s.kind = OpKind::CommSend;
        s.size_bytes = act_bytes;
        s.peer = r + 1;
        s.group_id = 0;
        s.coll_id = static_cast<int64_t>(m) * num_ranks + r;
        s.deps = {prev_compute};
        v.push_back(std::move(s));
      }
    }
    g.nodes[r] = std::move(v);
  }
  return g;
}

}  // namespace loomnet
