#include <doctest.h>

#include <algorithm>
#include <map>
#include <queue>
#include <set>

#include "loomnet/workload.hpp"

using namespace loomnet;

namespace {

// Independent Kahn's-algorithm oracle: returns false if a cycle prevents a
// full topological order.
bool kahn_has_topo_order(const std::vector<OperatorNode>& nodes) {
  std::map<int, int> indeg;
  std::map<int, std::vector<int>> dependents;
  for (const auto& n : nodes) indeg[n.id] = static_cast<int>(n.deps.size());
  for (const auto& n : nodes)
    for (int d : n.deps) dependents[d].push_back(n.id);
  std::queue<int> q;
  for (const auto& [id, deg] : indeg)
    if (deg == 0) q.push(id);
  size_t seen = 0;
  while (!q.empty()) {
    int id = q.front();
    q.pop();
    seen++;
    for (int dep : dependents[id])
      if (--indeg[dep] == 0) q.push(dep);
  }
  return seen == nodes.size();
}

OperatorNode compute(int rank, int id, uint64_t us, std::vector<int> deps = {}) {
  OperatorNode n;
  n.rank = rank;
  n.id = id;
  n.kind = OpKind::Compute;
  n.duration_us = us;
  n.deps = std::move(deps);
  return n;
}

OperatorNode allreduce(int rank, int id, int64_t cid, uint64_t bytes,
                       std::vector<int> deps = {}) {
  OperatorNode n;
  n.rank = rank;
  n.id = id;
  n.kind = OpKind::CommColl;
  n.coll_type = CollType::AllReduce;
  n.size_bytes = bytes;
  n.group_id = 0;
  n.coll_id = cid;
  n.deps = std::move(deps);
  return n;
}

WorkloadGraph two_rank_world() {
  WorkloadGraph g;
  g.num_ranks = 2;
  g.groups.push_back({0, {0, 1}});
  g.nodes[0] = {};
  g.nodes[1] = {};
  return g;
}

}  // namespace

TEST_CASE("parse empty graph") {
  auto g = parse_workload(R"({"version":1,"num_ranks":1,"groups":[],"nodes":{"0":[]}})");
  CHECK(g.num_ranks == 1);
  CHECK(g.total_nodes() == 0);
}

TEST_CASE("parse one-rank chain keeps topological order") {
  auto g = parse_workload(R"({
    "version":1,"num_ranks":1,"groups":[],
    "nodes":{"0":[
      {"id":0,"rank":0,"kind":"COMPUTE","duration_us":100,"deps":[]},
      {"id":1,"rank":0,"kind":"COMPUTE","duration_us":50,"deps":[0]}]}})");
  auto order = topo_order(g, 0);
  CHECK(order == std::vector<int>{0, 1});
}

TEST_CASE("unmatched collective across ranks is rejected") {
  auto g = two_rank_world();
  g.nodes[0] = {allreduce(0, 0, 7, 1024)};
  auto v = validate(g);
  REQUIRE(v.size() >= 1);
  CHECK(v[0].find("unmatched collective 7") != std::string::npos);
  CHECK_THROWS_AS(parse_workload(serialize_workload(g)), WorkloadError);
}

TEST_CASE("validate accepts a matched allreduce pair") {
  auto g = two_rank_world();
  g.nodes[0] = {allreduce(0, 0, 1, 512)};
  g.nodes[1] = {allreduce(1, 0, 1, 512)};
  CHECK(validate(g).empty());
}

TEST_CASE("self-dependency reported with rank and node") {
  WorkloadGraph g;
  g.num_ranks = 1;
  auto n = compute(0, 3, 10, {3});
  g.nodes[0] = {n};
  auto v = validate(g);
  REQUIRE(!v.empty());
  CHECK(v[0] == "self-dependency rank 0 node 3");
}

TEST_CASE("cycle detected, confirmed by Kahn oracle") {
  WorkloadGraph g;
  g.num_ranks = 1;
  g.nodes[0] = {compute(0, 0, 1, {1}), compute(0, 1, 1, {0})};
  auto v = validate(g);
  bool found = false;
  for (const auto& s : v) found |= s.find("cycle detected rank 0") != std::string::npos;
  CHECK(found);
  CHECK(!kahn_has_topo_order(g.nodes[0]));
}

TEST_CASE("dangling dep and peer errors") {
  WorkloadGraph g;
  g.num_ranks = 1;
  g.nodes[0] = {compute(0, 0, 1, {42})};
  auto v = validate(g);
  REQUIRE(!v.empty());
  CHECK(v[0].find("dangling dep 42") != std::string::npos);
}

TEST_CASE("send without matching recv is a violation") {
  auto g = two_rank_world();
  OperatorNode s;
  s.rank = 0;
  s.id = 0;
  s.kind = OpKind::CommSend;
  s.size_bytes = 64;
  s.peer = 1;
  s.group_id = 0;
  s.coll_id = 9;
  g.nodes[0] = {s};
  auto v = validate(g);
  REQUIRE(!v.empty());
  CHECK(v[0].find("unmatched send/recv") != std::string::npos);
}

TEST_CASE("schema rejects fields not allowed for the kind") {
  CHECK_THROWS_WITH_AS(
      parse_workload(R"({"version":1,"num_ranks":1,"groups":[],
        "nodes":{"0":[{"id":0,"rank":0,"kind":"COMPUTE","duration_us":1,
                       "size_bytes":8,"deps":[]}]}})"),
      doctest::Contains("not allowed"), WorkloadError);
  CHECK_THROWS_AS(parse_workload(R"({"version":1,"num_ranks":1,"groups":[],
        "nodes":{"0":[{"id":0,"rank":0,"kind":"COMPUTE","deps":[]}]}})"),
                  WorkloadError);
}

TEST_CASE("synth_data_parallel smallest instance") {
  auto g = synth_data_parallel(2, 1, 10, 20, 1024, 1);
  REQUIRE(g.nodes[0].size() == 3);
  REQUIRE(g.nodes[1].size() == 3);
  const auto& v = g.nodes[0];
  CHECK(v[0].kind == OpKind::Compute);
  CHECK(v[0].duration_us == 10);
  CHECK(v[1].kind == OpKind::Compute);
  CHECK(v[1].duration_us == 20);
  CHECK(v[2].kind == OpKind::CommColl);
  CHECK(v[2].size_bytes == 1024);
  CHECK(v[2].deps == std::vector<int>{1});
  CHECK(validate(g).empty());
}

TEST_CASE("synth_data_parallel node count = iterations*(2*layers + layers)") {
  auto g = synth_data_parallel(4, 2, 10, 20, 4096, 2);
  for (int r = 0; r < 4; r++) CHECK(g.nodes[r].size() == 12);
  CHECK(validate(g).empty());
}

TEST_CASE("synth_data_parallel zero grad bytes is legal") {
  auto g = synth_data_parallel(2, 2, 1, 1, 0, 1);
  CHECK(validate(g).empty());
  for (const auto& n : g.nodes[0])
    if (n.kind == OpKind::CommColl) CHECK(n.size_bytes == 0);
}

TEST_CASE("synth_pipeline smallest instance") {
  auto g = synth_pipeline(2, 1, 10, 512);
  REQUIRE(g.nodes[0].size() == 2);  // compute, send
  REQUIRE(g.nodes[1].size() == 2);  // recv, compute
  CHECK(g.nodes[0][1].kind == OpKind::CommSend);
  CHECK(g.nodes[0][1].size_bytes == 512);
  CHECK(g.nodes[0][1].peer == 1);
  CHECK(g.nodes[1][0].kind == OpKind::CommRecv);
  CHECK(g.nodes[1][0].peer == 0);
  CHECK(validate(g).empty());
}

TEST_CASE("synth_pipeline rejects a single rank") {
  CHECK_THROWS_AS(synth_pipeline(1, 1, 10, 512), WorkloadError);
}

TEST_CASE("synthesizer outputs validate over the parameter grid") {
  for (int ranks = 2; ranks <= 8; ranks++) {
    for (int k = 1; k <= 4; k++) {
      CHECK(validate(synth_data_parallel(ranks, k, 5, 7, 1000, 2)).empty());
      CHECK(validate(synth_pipeline(ranks, k, 5, 256)).empty());
    }
  }
}

TEST_CASE("round-trip: parse(serialize(g)) == g") {
  auto g = synth_data_parallel(3, 2, 10, 20, 999, 2);
  auto g2 = parse_workload(serialize_workload(g));
  CHECK(g2 == g);
  auto p = synth_pipeline(4, 3, 5, 128);
  CHECK(parse_workload(serialize_workload(p)) == p);
  // Byte-stable golden form
  CHECK(serialize_workload(g2) == serialize_workload(g));
}

TEST_CASE("every validate()-accepted graph admits a topo order (Kahn oracle)") {
  for (int ranks = 2; ranks <= 5; ranks++) {
    auto g = synth_data_parallel(ranks, 3, 1, 1, 300, 2);
    REQUIRE(validate(g).empty());
    for (int r = 0; r < ranks; r++) {
      CHECK(kahn_has_topo_order(g.nodes[r]));
      CHECK(topo_order(g, r).size() == g.nodes[r].size());
    }
  }
}
