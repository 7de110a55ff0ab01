#include "loomnet/netmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

namespace loomnet {

using ordered_json = nlohmann::ordered_json;

const HostSpec& Topology::host(int id) const {
  for (const auto& h : hosts)
    if (h.id == id) return h;
  throw NetError("unknown host " + std::to_string(id));
}

Topology Topology::parse(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw NetError(std::string("topology syntax error: ") + e.what());
  }
  Topology t;
  try {
    for (const auto& hj : j.at("hosts")) {
      HostSpec h;
      h.id = hj.at("id").get<int>();
      h.nic_gbps = hj.at("nic_gbps").get<double>();
      h.latency_us = hj.at("latency_us").get<double>();
      if (hj.contains("leaf")) h.leaf = hj.at("leaf").get<int>();
      if (h.nic_gbps <= 0) throw NetError("host " + std::to_string(h.id) + ": nic_gbps must be > 0");
      if (h.latency_us < 0) throw NetError("host " + std::to_string(h.id) + ": latency_us must be >= 0");
      t.hosts.push_back(h);
    }
    const auto& fj = j.at("fabric");
    std::string kind = fj.at("kind").get<std::string>();
    if (kind == "FULL_MESH") {
      t.fabric = FabricKind::FullMesh;
    } else if (kind == "TWO_TIER") {
      t.fabric = FabricKind::TwoTier;
      t.uplink_gbps = fj.at("uplink_gbps").get<double>();
      if (t.uplink_gbps <= 0) throw NetError("uplink_gbps must be > 0");
    } else {
      throw NetError("unknown fabric kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw NetError(std::string("topology schema error: ") + e.what());
  }
  std::set<int> ids;
  for (const auto& h : t.hosts)
    if (!ids.insert(h.id).second) throw NetError("duplicate host id " + std::to_string(h.id));
  if (t.hosts.empty()) throw NetError("topology has no hosts");
  return t;
}

Topology Topology::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NetError("cannot open topology file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

Topology Topology::uniform(int num_hosts, double nic_gbps, double latency_us) {
  Topology t;
  for (int i = 0; i < num_hosts; i++) t.hosts.push_back({i, nic_gbps, latency_us, 0});
  return t;
}

AnomalyTarget AnomalyTarget::parse(const std::string& s) {
  AnomalyTarget t;
  if (s.rfind("nic:", 0) == 0) {
    t.kind = Nic;
    t.host = std::stoi(s.substr(4));
    return t;
  }
  if (s.rfind("uplink:", 0) == 0) {
    t.kind = Uplink;
    auto rest = s.substr(7);
    auto colon = rest.find(':');
    if (colon == std::string::npos) throw NetError("bad uplink target '" + s + "'");
    t.src_leaf = std::stoi(rest.substr(0, colon));
    t.dst_leaf = std::stoi(rest.substr(colon + 1));
    return t;
  }
  throw NetError("unknown anomaly target '" + s + "'");
}

std::string AnomalyTarget::str() const {
  if (kind == Nic) return "nic:" + std::to_string(host);
  return "uplink:" + std::to_string(src_leaf) + ":" + std::to_string(dst_leaf);
}

std::vector<AnomalyEvent> parse_anomalies(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw NetError(std::string("anomaly syntax error: ") + e.what());
  }
  std::vector<AnomalyEvent> out;
  try {
    for (const auto& ej : j) {
      AnomalyEvent e;
      e.at_us = ej.at("at_us").get<double>();
      e.duration_us = ej.at("duration_us").get<double>();
      e.target = AnomalyTarget::parse(ej.at("target").get<std::string>());
      std::string eff = ej.at("effect").get<std::string>();
      if (eff == "BANDWIDTH_SCALE") {
        e.effect = AnomalyEffect::BandwidthScale;
        e.scale = ej.at("scale").get<double>();
        if (e.scale <= 0 || e.scale > 1) throw NetError("scale must be in (0,1]");
      } else if (eff == "ADDED_LATENCY") {
        e.effect = AnomalyEffect::AddedLatency;
        e.latency_us = ej.at("latency_us").get<double>();
      } else if (eff == "LINK_DOWN") {
        e.effect = AnomalyEffect::LinkDown;
      } else {
        throw NetError("unknown anomaly effect '" + eff + "'");
      }
      if (e.at_us < 0) throw NetError("at_us must be >= 0");
      out.push_back(e);
    }
  } catch (const nlohmann::json::exception& e) {
    throw NetError(std::string("anomaly schema error: ") + e.what());
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const AnomalyEvent& a, const AnomalyEvent& b) { return a.at_us < b.at_us; });
  return out;
}

std::vector<AnomalyEvent> load_anomalies(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NetError("cannot open anomaly file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_anomalies(ss.str());
}

FluidNetwork::FluidNetwork(Topology topo, std::vector<AnomalyEvent> timeline)
    : topo_(std::move(topo)), timeline_(std::move(timeline)) {
  for (const auto& e : timeline_) {
    if (e.target.kind == AnomalyTarget::Nic) {
      topo_.host(e.target.host);  // throws on unknown target id
    } else if (topo_.fabric != FabricKind::TwoTier) {
      throw NetError("uplink anomaly target on a FULL_MESH fabric: " + e.target.str());
    }
  }
}

bool FluidNetwork::anomaly_active(const AnomalyEvent& e) const {
  if (now_ < e.at_us) return false;
  if (e.duration_us <= 0) return true;  // permanent
  return now_ < e.at_us + e.duration_us;
}

double FluidNetwork::nic_scale(int host) const {
  double s = 1.0;
  for (const auto& e : timeline_)
    if (e.effect == AnomalyEffect::BandwidthScale && e.target.kind == AnomalyTarget::Nic &&
        e.target.host == host && anomaly_active(e))
      s *= e.scale;
  return s;
}

double FluidNetwork::uplink_scale(int src_leaf, int dst_leaf) const {
  double s = 1.0;
  for (const auto& e : timeline_)
    if (e.effect == AnomalyEffect::BandwidthScale && e.target.kind == AnomalyTarget::Uplink &&
        e.target.src_leaf == src_leaf && e.target.dst_leaf == dst_leaf && anomaly_active(e))
      s *= e.scale;
  return s;
}

bool FluidNetwork::link_down(int src, int dst) const {
  for (const auto& e : timeline_) {
    if (e.effect != AnomalyEffect::LinkDown || !anomaly_active(e)) continue;
    if (e.target.kind == AnomalyTarget::Nic &&
        (e.target.host == src || e.target.host == dst))
      return true;
    if (e.target.kind == AnomalyTarget::Uplink && topo_.fabric == FabricKind::TwoTier &&
        e.target.src_leaf == topo_.host(src).leaf && e.target.dst_leaf == topo_.host(dst).leaf &&
        topo_.host(src).leaf != topo_.host(dst).leaf)
      return true;
  }
  return false;
}

double FluidNetwork::path_latency(int src, int dst) const {
  double lat = topo_.host(src).latency_us + topo_.host(dst).latency_us;
  for (const auto& e : timeline_) {
    if (e.effect != AnomalyEffect::AddedLatency || !anomaly_active(e)) continue;
    if (e.target.kind == AnomalyTarget::Nic &&
        (e.target.host == src || e.target.host == dst))
      lat += e.latency_us;
    if (e.target.kind == AnomalyTarget::Uplink && topo_.fabric == FabricKind::TwoTier &&
        e.target.src_leaf == topo_.host(src).leaf && e.target.dst_leaf == topo_.host(dst).leaf)
      lat += e.latency_us;
  }
  return lat;
}

double FluidNetwork::egress_cap(int host) const {
  double down = 1.0;
  for (const auto& e : timeline_)
    if (e.effect == AnomalyEffect::LinkDown && e.target.kind == AnomalyTarget::Nic &&
        e.target.host == host && anomaly_active(e))
      down = 0.0;
  return gbps_to_bytes_per_us(topo_.host(host).nic_gbps) * nic_scale(host) * down;
}

double FluidNetwork::ingress_cap(int host) const { return egress_cap(host); }

double FluidNetwork::uplink_cap(int src_leaf, int dst_leaf) const {
  double down = 1.0;
  for (const auto& e : timeline_)
    if (e.effect == AnomalyEffect::LinkDown && e.target.kind == AnomalyTarget::Uplink &&
        e.target.src_leaf == src_leaf && e.target.dst_leaf == dst_leaf && anomaly_active(e))
      down = 0.0;
  return gbps_to_bytes_per_us(topo_.uplink_gbps) * uplink_scale(src_leaf, dst_leaf) * down;
}

FlowId FluidNetwork::add_flow(int src_host, int dst_host, uint64_t bytes) {
  topo_.host(src_host);
  topo_.host(dst_host);
  FlowId id = next_id_++;
  if (link_down(src_host, dst_host)) {
    pending_.push_back({id, now_, false, "link down"});
    return id;
  }
  double latency = path_latency(src_host, dst_host);
  if (bytes == 0) {
    pending_.push_back({id, now_ + latency, true, ""});
    return id;
  }
  flows_.push_back({id, src_host, dst_host, static_cast<double>(bytes), 0.0, now_, latency});
  recompute_rates();
  return id;
}

void FluidNetwork::recompute_rates() {
  // Water-filling max-min fair share.
  // Resource keys: (0, host, -) egress, (1, host, -) ingress, (2, srcleaf, dstleaf) uplink.
  struct Res {
    double cap;
    std::vector<size_t> flow_idx;
  };
  std::map<std::tuple<int, int, int>, Res> res;
  auto touch = [&](std::tuple<int, int, int> key, double cap, size_t fi) {
    auto it = res.find(key);
    if (it == res.end()) it = res.emplace(key, Res{cap, {}}).first;
    it->second.flow_idx.push_back(fi);
  };
  for (size_t i = 0; i < flows_.size(); i++) {
    auto& f = flows_[i];
    f.rate = 0;
    touch({0, f.src, -1}, egress_cap(f.src), i);
    touch({1, f.dst, -1}, ingress_cap(f.dst), i);
    if (topo_.fabric == FabricKind::TwoTier) {
      int sl = topo_.host(f.src).leaf, dl = topo_.host(f.dst).leaf;
      if (sl != dl) touch({2, sl, dl}, uplink_cap(sl, dl), i);
    }
  }
  std::vector<bool> frozen(flows_.size(), false);
  size_t left = flows_.size();
  while (left > 0) {
    // Find the bottleneck: smallest fair share among resources with unfrozen flows.
    double best_share = std::numeric_limits<double>::infinity();
    const std::tuple<int, int, int>* best_key = nullptr;
    for (const auto& [key, r] : res) {
      int n = 0;
      for (size_t fi : r.flow_idx)
        if (!frozen[fi]) n++;
      if (n == 0) continue;
      double share = std::max(0.0, r.cap) / n;
      if (share < best_share) {
        best_share = share;
        best_key = &key;
      }
    }
    if (!best_key) break;  // no capacitated resource left (cannot happen: NICs always touched)
    for (size_t fi : res[*best_key].flow_idx) {
      if (frozen[fi]) continue;
      flows_[fi].rate = best_share;
      frozen[fi] = true;
      left--;
      // Subtract this flow's rate from every resource it crosses.
      for (auto& [key, r] : res) {
        if (std::find(r.flow_idx.begin(), r.flow_idx.end(), fi) != r.flow_idx.end())
          r.cap -= best_share;
      }
    }
  }
}

std::optional<double> FluidNetwork::next_anomaly_boundary() const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : timeline_) {
    if (e.at_us > now_) best = std::min(best, e.at_us);
    if (e.duration_us > 0) {
      double end = e.at_us + e.duration_us;
      if (end > now_) best = std::min(best, end);
    }
  }
  if (std::isinf(best)) return std::nullopt;
  return best;
}

std::optional<double> FluidNetwork::next_event_time() const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : pending_) best = std::min(best, std::max(p.time_us, now_));
  for (const auto& f : flows_)
    if (f.rate > 0) best = std::min(best, now_ + f.remaining / f.rate);
  if (auto b = next_anomaly_boundary()) {
    if (!flows_.empty() || !pending_.empty()) best = std::min(best, *b);
  }
  if (std::isinf(best)) return std::nullopt;
  return best;
}

std::vector<FlowDone> FluidNetwork::advance_to(double t) {
  if (t < now_ - 1e-9) throw NetError("advance_to into the past");
  std::vector<FlowDone> done;
  // Step through internal events (flow completions, anomaly boundaries) so
  // that rates are never integrated across a rate change.
  while (true) {
    double u = std::max(t, now_);
    if (auto b = next_anomaly_boundary(); b && *b < u) u = std::max(*b, now_);
    for (const auto& f : flows_)
      if (f.rate > 0) u = std::min(u, now_ + f.remaining / f.rate);
    for (const auto& p : pending_) u = std::min(u, std::max(p.time_us, now_));
    u = std::max(u, now_);
    double dt = u - now_;
    for (auto& f : flows_) f.remaining -= f.rate * dt;
    now_ = u;

    for (auto it = flows_.begin(); it != flows_.end();) {
      // A residual whose transfer time cannot move the double-precision clock
      // would stall the integration loop forever; treat it as delivered.
      bool finished = it->remaining <= 1e-9 ||
                      (it->rate > 0 && now_ + it->remaining / it->rate <= now_);
      if (finished) {
        // Transfer finished; the completion surfaces after the path latency.
        pending_.push_back({it->id, now_ + it->latency_us, true, ""});
        it = flows_.erase(it);
      } else {
        ++it;
      }
    }
    for (auto it = pending_.begin(); it != pending_.end();) {
      if (it->time_us <= now_ + 1e-9) {
        done.push_back({it->id, it->time_us, it->ok, it->error});
        it = pending_.erase(it);
      } else {
        ++it;
      }
    }
    // Anomaly boundaries and flow completions both change the assignment.
    recompute_rates();
    if (now_ >= t - 1e-9) break;
  }
  std::sort(done.begin(), done.end(), [](const FlowDone& a, const FlowDone& b) {
    return a.time_us != b.time_us ? a.time_us < b.time_us : a.id < b.id;
  });
  return done;
}

std::map<FlowId, double> FluidNetwork::current_rates() const {
  std::map<FlowId, double> out;
  for (const auto& f : flows_) out[f.id] = f.rate;
  return out;
}

}  // namespace loomnet
