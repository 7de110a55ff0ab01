#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace loomnet {

struct NetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct HostSpec {
  int id = 0;
  double nic_gbps = 100.0;
  double latency_us = 0.0;
  int leaf = 0;
};

enum class FabricKind { FullMesh, TwoTier };

struct Topology {
  std::vector<HostSpec> hosts;
  FabricKind fabric = FabricKind::FullMesh;
  double uplink_gbps = 0.0;  // per leaf-pair direction, TWO_TIER only

  const HostSpec& host(int id) const;
  static Topology parse(const std::string& text);
  static Topology load(const std::string& path);
  static Topology uniform(int num_hosts, double nic_gbps, double latency_us);
};

enum class AnomalyEffect { BandwidthScale, AddedLatency, LinkDown };

struct AnomalyTarget {
  enum Kind { Nic, Uplink } kind = Nic;
  int host = -1;      // Nic
  int src_leaf = -1;  // Uplink
  int dst_leaf = -1;

  // "nic:<host>" or "uplink:<src_leaf>:<dst_leaf>"
  static AnomalyTarget parse(const std::string& s);
  std::string str() const;
};

struct AnomalyEvent {
  double at_us = 0;
  double duration_us = 0;  // 0 = permanent
  AnomalyTarget target;
  AnomalyEffect effect = AnomalyEffect::BandwidthScale;
  double scale = 1.0;      // BANDWIDTH_SCALE
  double latency_us = 0;   // ADDED_LATENCY
};

std::vector<AnomalyEvent> parse_anomalies(const std::string& text);
std::vector<AnomalyEvent> load_anomalies(const std::string& path);

using FlowId = uint64_t;

struct FlowDone {
  FlowId id;
  double time_us;
  bool ok;
  std::string error;
};

// Event-driven fluid-flow model. Active flows share capacities by max-min
// fairness over source NIC egress, destination NIC ingress, and (TWO_TIER)
// the directed leaf-pair uplink. The caller drives virtual time:
//
//   while (auto t = net.next_event_time()) net.advance_to(*t);
//
// Completed flows (transfer finished plus start-of-flow latency) come back
// through advance_to(). Rates are recomputed at every flow start/finish and
// at every anomaly boundary.
class FluidNetwork {
 public:
  FluidNetwork(Topology topo, std::vector<AnomalyEvent> timeline = {});

  // Starts a flow at the current time. On a downed path the returned FlowDone
  // is produced immediately at the next advance_to() with ok = false.
  FlowId add_flow(int src_host, int dst_host, uint64_t bytes);

  double now_us() const { return now_; }
  std::optional<double> next_event_time() const;
  std::vector<FlowDone> advance_to(double t_us);

  // Current max-min rate assignment, flow id -> bytes/us. Exposed for tests.
  std::map<FlowId, double> current_rates() const;

  size_t active_flows() const { return flows_.size(); }

 private:
  struct Flow {
    FlowId id;
    int src, dst;
    double remaining;    // bytes
    double rate = 0;     // bytes/us
    double start_us;
    double latency_us;   // applied after the last byte is delivered
  };
  struct PendingDone {
    FlowId id;
    double time_us;
    bool ok;
    std::string error;
  };

  void recompute_rates();
  bool link_down(int src, int dst) const;
  double path_latency(int src, int dst) const;
  double egress_cap(int host) const;   // bytes/us after anomalies
  double ingress_cap(int host) const;
  double uplink_cap(int src_leaf, int dst_leaf) const;
  double nic_scale(int host) const;
  double uplink_scale(int src_leaf, int dst_leaf) const;
  bool anomaly_active(const AnomalyEvent& e) const;
  std::optional<double> next_anomaly_boundary() const;

  Topology topo_;
  std::vector<AnomalyEvent> timeline_;
  double now_ = 0;
  FlowId next_id_ = 1;
  std::vector<Flow> flows_;
  std::vector<PendingDone> pending_;  // latency stage + immediate errors
};

// bytes/us for a Gb/s figure (decimal: 1 Gb/s = 1e9 bits/s).
inline double gbps_to_bytes_per_us(double gbps) { return gbps * 1e9 / 8.0 / 1e6; }

}  // namespace loomnet
