#include "loomnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace loomnet {

using ordered_json = nlohmann::ordered_json;

double busbw_factor(CollType type, int nranks) {
  double n = nranks;
  switch (type) {
    case CollType::AllReduce: return 2.0 * (n - 1) / n;
    case CollType::AllGather:
    case CollType::ReduceScatter:
    case CollType::AllToAll: return (n - 1) / n;
    case CollType::Broadcast: return 1.0;
  }
  return 1.0;
}

Bandwidth compute_bandwidth(CollType type, int nranks, uint64_t size_bytes, double duration_us) {
  if (size_bytes == 0) return {0, 0};
  if (duration_us <= 0) throw MetricsError("zero duration with nonzero size");
  double algbw = static_cast<double>(size_bytes) / duration_us / 1000.0;  // GB/s decimal
  return {algbw, algbw * busbw_factor(type, nranks)};
}

namespace {

struct RecKey {
  int rank, id;
  bool operator<(const RecKey& o) const { return std::tie(rank, id) < std::tie(o.rank, o.id); }
};

std::map<std::pair<int, int>, const OpRecord*> index_records(
    const std::map<int, std::vector<OpRecord>>& timelines) {
  std::map<std::pair<int, int>, const OpRecord*> idx;
  for (const auto& [rank, recs] : timelines)
    for (const auto& r : recs) idx[{rank, r.node_id}] = &r;
  return idx;
}

void check_consistency(const WorkloadGraph& graph,
                       const std::map<std::pair<int, int>, const OpRecord*>& idx) {
  for (const auto& [rank, nodes] : graph.nodes) {
    for (const auto& n : nodes) {
      auto it = idx.find({rank, n.id});
      if (it == idx.end())
        throw MetricsError("missing record rank " + std::to_string(rank) + " node " +
                           std::to_string(n.id));
      for (int d : n.deps) {
        auto dit = idx.find({rank, d});
        if (dit == idx.end()) continue;
        if (dit->second->end_us > it->second->start_us + 1e-6)
          throw MetricsError("record integrity: dep " + std::to_string(d) +
                             " ends after node " + std::to_string(n.id) + " starts (rank " +
                             std::to_string(rank) + ")");
      }
    }
  }
}

}  // namespace

CriticalPath critical_path(const WorkloadGraph& graph,
                           const std::map<int, std::vector<OpRecord>>& timelines) {
  auto idx = index_records(timelines);
  check_consistency(graph, idx);
  if (idx.empty()) return {};

  // Co-participant records per collective instance.
  std::map<int64_t, std::vector<std::pair<int, int>>> coll_members;
  for (const auto& [rank, nodes] : graph.nodes)
    for (const auto& n : nodes)
      if (n.kind == OpKind::CommColl && idx.count({rank, n.id}))
        coll_members[n.coll_id].push_back({rank, n.id});

  // Walk back from the record with the latest end, at each step following the
  // causal predecessor (intra-rank dep, or co-participant of a collective)
  // with the latest end time.
  std::pair<int, int> cur{-1, -1};
  double best_end = -1;
  for (const auto& [key, r] : idx) {
    if (r->end_us > best_end) {
      best_end = r->end_us;
      cur = key;
    }
  }
  std::vector<std::pair<int, int>> rev;
  std::set<std::pair<int, int>> visited;
  while (cur.first >= 0 && visited.insert(cur).second) {
    rev.push_back(cur);
    const OperatorNode* n = graph.find_node(cur.first, cur.second);
    std::pair<int, int> next{-1, -1};
    double next_end = -1;
    auto consider = [&](std::pair<int, int> key) {
      if (visited.count(key)) return;
      auto it = idx.find(key);
      if (it == idx.end()) return;
      if (it->second->end_us > next_end) {
        next_end = it->second->end_us;
        next = key;
      }
    };
    if (n) {
      for (int d : n->deps) consider({cur.first, d});
      if (n->kind == OpKind::CommColl)
        for (const auto& key : coll_members[n->coll_id]) consider(key);
    }
    cur = next;
  }
  std::reverse(rev.begin(), rev.end());

  // Length: non-overlapping contribution of each record along the chain.
  double length = 0, prev_end = 0;
  for (const auto& key : rev) {
    const OpRecord* r = idx.at(key);
    double seg = r->end_us - std::max(r->start_us, prev_end);
    if (seg > 0) length += seg;
    prev_end = std::max(prev_end, r->end_us);
  }
  return {rev, length};
}

std::map<std::pair<int, int>, double> slack_us(
    const WorkloadGraph& graph, const std::map<int, std::vector<OpRecord>>& timelines,
    double* critical_length) {
  auto idx = index_records(timelines);
  check_consistency(graph, idx);

  // Merge every collective instance into one vertex. Vertex weight is the
  // measured duration; for a merged collective it is the span from the last
  // participant joining to the first participant finishing (clamped at 0),
  // which is the portion that actually blocks dependents on every rank.
  struct Vertex {
    double weight = 0;
    std::vector<int> preds, succs;
  };
  std::map<std::pair<int, int>, int> vid;           // (rank, node) -> vertex
  std::map<int64_t, int> coll_vid;                  // coll_id -> vertex
  std::vector<Vertex> verts;

  struct CollAgg {
    double max_start = 0, min_end = std::numeric_limits<double>::infinity();
  };
  std::map<int64_t, CollAgg> coll_agg;
  for (const auto& [rank, nodes] : graph.nodes) {
    for (const auto& n : nodes) {
      auto rit = idx.find({rank, n.id});
      if (rit == idx.end()) continue;
      if (n.kind == OpKind::CommColl) {
        auto& a = coll_agg[n.coll_id];
        a.max_start = std::max(a.max_start, rit->second->start_us);
        a.min_end = std::min(a.min_end, rit->second->end_us);
      }
    }
  }
  for (const auto& [rank, nodes] : graph.nodes) {
    for (const auto& n : nodes) {
      auto rit = idx.find({rank, n.id});
      if (rit == idx.end()) continue;
      if (n.kind == OpKind::CommColl) {
        auto cit = coll_vid.find(n.coll_id);
        if (cit == coll_vid.end()) {
          const auto& a = coll_agg[n.coll_id];
          verts.push_back({std::max(0.0, a.min_end - a.max_start), {}, {}});
          cit = coll_vid.emplace(n.coll_id, static_cast<int>(verts.size()) - 1).first;
        }
        vid[{rank, n.id}] = cit->second;
      } else {
        verts.push_back({rit->second->end_us - rit->second->start_us, {}, {}});
        vid[{rank, n.id}] = static_cast<int>(verts.size()) - 1;
      }
    }
  }
  for (const auto& [rank, nodes] : graph.nodes) {
    for (const auto& n : nodes) {
      auto vit = vid.find({rank, n.id});
      if (vit == vid.end()) continue;
      for (int d : n.deps) {
        auto dit = vid.find({rank, d});
        if (dit == vid.end() || dit->second == vit->second) continue;
        verts[vit->second].preds.push_back(dit->second);
        verts[dit->second].succs.push_back(vit->second);
      }
    }
  }

  // Forward/backward longest path (graph is a DAG; iterate in topo order via
  // Kahn over the merged vertices).
  size_t nv = verts.size();
  std::vector<int> indeg(nv, 0);
  for (size_t v = 0; v < nv; v++)
    for (int p : verts[v].preds) { (void)p; indeg[v]++; }
  std::vector<int> order;
  std::vector<int> q;
  for (size_t v = 0; v < nv; v++)
    if (indeg[v] == 0) q.push_back(static_cast<int>(v));
  while (!q.empty()) {
    int v = q.back();
    q.pop_back();
    order.push_back(v);
    for (int s : verts[v].succs)
      if (--indeg[s] == 0) q.push_back(s);
  }
  if (order.size() != nv) throw MetricsError("merged collective DAG has a cycle");
  std::vector<double> fwd(nv, 0), bwd(nv, 0);
  for (int v : order) {
    double m = 0;
    for (int p : verts[v].preds) m = std::max(m, fwd[p]);
    fwd[v] = m + verts[v].weight;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    double m = 0;
    for (int s : verts[*it].succs) m = std::max(m, bwd[s]);
    bwd[*it] = m + verts[*it].weight;
  }
  double L = 0;
  for (size_t v = 0; v < nv; v++) L = std::max(L, fwd[v]);
  if (critical_length) *critical_length = L;

  std::map<std::pair<int, int>, double> out;
  for (const auto& [key, v] : vid)
    out[key] = L - (fwd[v] + bwd[v] - verts[v].weight);
  return out;
}

RunReport build_report(const WorkloadGraph& graph, const RunRecords& records,
                       ordered_json config_echo, const std::string& mode) {
  RunReport rep;
  rep.mode = mode;
  rep.config_echo = std::move(config_echo);
  rep.timelines = records.per_rank;
  rep.makespan_us = records.makespan_us;

  auto idx = index_records(rep.timelines);

  // Iteration boundaries from marker nodes.
  std::map<int, double> iter_start;
  for (const auto& [rank, nodes] : graph.nodes) {
    for (const auto& n : nodes) {
      if (!n.iter) continue;
      auto it = idx.find({rank, n.id});
      if (it == idx.end()) continue;
      auto [sit, inserted] = iter_start.emplace(*n.iter, it->second->start_us);
      if (!inserted) sit->second = std::min(sit->second, it->second->start_us);
    }
  }
  if (iter_start.empty()) iter_start[0] = 0;
  std::vector<std::pair<int, double>> iters(iter_start.begin(), iter_start.end());
  auto iter_of = [&](double t) {
    int best = iters.front().first;
    for (const auto& [i, s] : iters)
      if (s <= t + 1e-9) best = i;
    return best;
  };

  // Collective records, one per instance, global across ranks.
  struct Agg {
    CollType type;
    int group_id;
    uint64_t size;
    double start = std::numeric_limits<double>::infinity();
    double end = 0;
  };
  std::map<int64_t, Agg> aggs;
  for (const auto& [rank, nodes] : graph.nodes) {
    for (const auto& n : nodes) {
      if (n.kind != OpKind::CommColl) continue;
      auto rit = idx.find({rank, n.id});
      if (rit == idx.end()) continue;
      auto [ait, inserted] = aggs.emplace(n.coll_id, Agg{n.coll_type, n.group_id, n.size_bytes});
      ait->second.start = std::min(ait->second.start, rit->second->start_us);
      ait->second.end = std::max(ait->second.end, rit->second->end_us);
    }
  }
  for (const auto& [cid, a] : aggs) {
    const CommGroup* grp = graph.find_group(a.group_id);
    int n = grp ? static_cast<int>(grp->members.size()) : 1;
    CollectiveRecord cr;
    cr.coll_id = cid;
    cr.coll_type = a.type;
    cr.nranks = n;
    cr.size_bytes = a.size;
    cr.start_us = a.start;
    cr.end_us = a.end;
    cr.duration_us = a.end - a.start;
    if (cr.size_bytes > 0 && cr.duration_us > 0) {
      Bandwidth bw = compute_bandwidth(a.type, n, a.size, cr.duration_us);
      cr.algbw_GBps = bw.algbw_GBps;
      cr.busbw_GBps = bw.busbw_GBps;
    }
    cr.iter = iter_of(cr.start_us);
    rep.collectives.push_back(cr);
  }

  for (size_t i = 0; i < iters.size(); i++) {
    IterationStat st;
    st.iter = iters[i].first;
    st.start_us = iters[i].second;
    double end = i + 1 < iters.size() ? iters[i + 1].second : rep.makespan_us;
    st.wall_us = end - st.start_us;
    double mn = std::numeric_limits<double>::infinity();
    for (const auto& cr : rep.collectives)
      if (cr.iter == st.iter && cr.busbw_GBps > 0) mn = std::min(mn, cr.busbw_GBps);
    st.min_busbw_GBps = std::isinf(mn) ? 0 : mn;
    rep.iterations.push_back(st);
  }

  CriticalPath cp = critical_path(graph, rep.timelines);
  rep.critical_path = cp.nodes;
  rep.critical_path_us = cp.length_us;
  return rep;
}

std::string export_report_json(const RunReport& rep) {
  ordered_json j;
  j["format"] = "loomnet-report";
  j["version"] = 1;
  j["units"] = {{"time", "us"}, {"bandwidth", "GB/s (1e9 bytes/s)"}};
  j["mode"] = rep.mode;
  j["config"] = rep.config_echo;
  j["makespan_us"] = rep.makespan_us;
  j["iterations"] = ordered_json::array();
  for (const auto& it : rep.iterations)
    j["iterations"].push_back({{"iter", it.iter},
                               {"start_us", it.start_us},
                               {"wall_us", it.wall_us},
                               {"min_busbw_GBps", it.min_busbw_GBps}});
  j["collectives"] = ordered_json::array();
  for (const auto& c : rep.collectives)
    j["collectives"].push_back({{"coll_id", c.coll_id},
                                {"coll_type", to_string(c.coll_type)},
                                {"nranks", c.nranks},
                                {"size_bytes", c.size_bytes},
                                {"start_us", c.start_us},
                                {"end_us", c.end_us},
                                {"duration_us", c.duration_us},
                                {"algbw_GBps", c.algbw_GBps},
                                {"busbw_GBps", c.busbw_GBps},
                                {"iter", c.iter}});
  ordered_json tl = ordered_json::object();
  for (const auto& [rank, recs] : rep.timelines) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : recs)
      arr.push_back({{"node_id", r.node_id},
                     {"kind", to_string(r.kind)},
                     {"start_us", r.start_us},
                     {"end_us", r.end_us}});
    tl[std::to_string(rank)] = std::move(arr);
  }
  j["timelines"] = std::move(tl);
  ordered_json cp = ordered_json::array();
  for (const auto& [rank, id] : rep.critical_path)
    cp.push_back({{"rank", rank}, {"node_id", id}});
  j["critical_path"] = {{"nodes", std::move(cp)}, {"length_us", rep.critical_path_us}};
  return j.dump(2) + "\n";
}

RunReport parse_report(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw MetricsError(std::string("report syntax error: ") + e.what());
  }
  RunReport rep;
  try {
    if (j.at("format").get<std::string>() != "loomnet-report")
      throw MetricsError("not a loomnet report");
    rep.mode = j.at("mode").get<std::string>();
    rep.config_echo = j.at("config");
    rep.makespan_us = j.at("makespan_us").get<double>();
    for (const auto& it : j.at("iterations"))
      rep.iterations.push_back({it.at("iter").get<int>(), it.at("start_us").get<double>(),
                                it.at("wall_us").get<double>(),
                                it.at("min_busbw_GBps").get<double>()});
    for (const auto& c : j.at("collectives")) {
      CollectiveRecord cr;
      cr.coll_id = c.at("coll_id").get<int64_t>();
      cr.coll_type = coll_type_from_string(c.at("coll_type").get<std::string>());
      cr.nranks = c.at("nranks").get<int>();
      cr.size_bytes = c.at("size_bytes").get<uint64_t>();
      cr.start_us = c.at("start_us").get<double>();
      cr.end_us = c.at("end_us").get<double>();
      cr.duration_us = c.at("duration_us").get<double>();
      cr.algbw_GBps = c.at("algbw_GBps").get<double>();
      cr.busbw_GBps = c.at("busbw_GBps").get<double>();
      cr.iter = c.at("iter").get<int>();
      rep.collectives.push_back(cr);
    }
    for (auto it = j.at("timelines").begin(); it != j.at("timelines").end(); ++it) {
      int rank = std::stoi(it.key());
      std::vector<OpRecord> recs;
      for (const auto& r : it.value())
        recs.push_back({rank, r.at("node_id").get<int>(),
                        op_kind_from_string(r.at("kind").get<std::string>()),
                        r.at("start_us").get<double>(), r.at("end_us").get<double>()});
      rep.timelines[rank] = std::move(recs);
    }
    for (const auto& n : j.at("critical_path").at("nodes"))
      rep.critical_path.push_back({n.at("rank").get<int>(), n.at("node_id").get<int>()});
    rep.critical_path_us = j.at("critical_path").at("length_us").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw MetricsError(std::string("report schema error: ") + e.what());
  }
  return rep;
}

RunReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MetricsError("cannot open report '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_report(ss.str());
}

std::string export_trace_json(const RunReport& rep) {
  ordered_json arr = ordered_json::array();
  for (const auto& [rank, recs] : rep.timelines) {
    for (const auto& r : recs) {
      arr.push_back({{"name", to_string(r.kind)},
                     {"ph", "X"},
                     {"pid", rank},
                     {"tid", rank},
                     {"ts", r.start_us},
                     {"dur", r.end_us - r.start_us},
                     {"args", {{"node_id", r.node_id}}}});
    }
  }
  return arr.dump(2) + "\n";
}

std::string export_csv_iter(const RunReport& rep) {
  std::ostringstream os;
  os << "iter,wall_us,min_busbw_GBps\n";
  for (const auto& it : rep.iterations)
    os << it.iter << "," << it.wall_us << "," << it.min_busbw_GBps << "\n";
  return os.str();
}

Divergence compare_runs(const RunReport& measured, const RunReport& predicted,
                        double threshold) {
  std::map<int64_t, const CollectiveRecord*> m, p;
  for (const auto& c : measured.collectives) m[c.coll_id] = &c;
  for (const auto& c : predicted.collectives) p[c.coll_id] = &c;
  if (m.size() != p.size())
    throw MetricsError("workload mismatch: different collective counts");
  Divergence d;
  d.threshold = threshold;
  for (const auto& [cid, mc] : m) {
    auto pit = p.find(cid);
    if (pit == p.end()) throw MetricsError("workload mismatch: collective " +
                                           std::to_string(cid) + " missing from prediction");
    const CollectiveRecord* pc = pit->second;
    Divergence::Entry e;
    e.coll_id = cid;
    e.iter = mc->iter;
    e.measured_us = mc->duration_us;
    e.predicted_us = pc->duration_us;
    if (pc->duration_us > 0) {
      e.ratio = mc->duration_us / pc->duration_us;
    } else {
      e.ratio = mc->duration_us > 0 ? std::numeric_limits<double>::infinity() : 1.0;
    }
    e.flagged = e.ratio > threshold;
    if (e.flagged) {
      d.any_flagged = true;
      if (d.onset_iter < 0 || e.iter < d.onset_iter) d.onset_iter = e.iter;
    }
    d.entries.push_back(e);
  }
  return d;
}

std::string export_divergence_json(const Divergence& d) {
  ordered_json j;
  j["format"] = "loomnet-divergence";
  j["threshold"] = d.threshold;
  j["any_flagged"] = d.any_flagged;
  j["onset_iter"] = d.onset_iter;
  j["collectives"] = ordered_json::array();
  for (const auto& e : d.entries)
    j["collectives"].push_back({{"coll_id", e.coll_id},
                                {"iter", e.iter},
                                {"measured_us", e.measured_us},
                                {"predicted_us", e.predicted_us},
                                {"ratio", e.ratio},
                                {"flagged", e.flagged}});
  return j.dump(2) + "\n";
}

}  // namespace loomnet
