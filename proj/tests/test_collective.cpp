#include <doctest.h>

#include <cstring>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <tuple>

#include "loomnet/collective.hpp"
#include "loomnet/collective_exec.hpp"
#include "loomnet/sim_transport.hpp"

using namespace loomnet;

namespace {

CommGroup group_of(int n) {
  CommGroup g;
  g.group_id = 0;
  g.members.resize(n);
  std::iota(g.members.begin(), g.members.end(), 0);
  return g;
}

using Msg = std::tuple<int, int, uint64_t, uint64_t>;  // src, dst, bytes, tag

// All-plan pairing oracle: every send must be mirrored by exactly one recv
// with the same bytes and tag on the destination rank.
void check_matched(const std::vector<CollectiveSchedule>& plans) {
  std::multiset<Msg> sends, recvs;
  for (const auto& p : plans) {
    for (const auto& st : p.steps) {
      for (const auto& m : st.sends) sends.insert({p.rank, m.peer, m.bytes, m.tag});
      for (const auto& m : st.recvs) recvs.insert({m.peer, p.rank, m.bytes, m.tag});
    }
  }
  CHECK(sends == recvs);
}

// No rank may reuse a (peer, tag) pair across its sends: the transport keys
// in-flight messages on exactly that pair.
void check_tags_unique(const std::vector<CollectiveSchedule>& plans) {
  for (const auto& p : plans) {
    std::set<std::pair<int, uint64_t>> seen;
    for (const auto& st : p.steps)
      for (const auto& m : st.sends) CHECK(seen.insert({m.peer, m.tag}).second);
  }
}

std::vector<uint8_t> random_u64_buf(uint64_t bytes, std::mt19937_64& rng) {
  std::vector<uint8_t> b(bytes);
  for (size_t i = 0; i + 8 <= b.size(); i += 8) {
    uint64_t v = rng();
    std::memcpy(&b[i], &v, 8);
  }
  return b;
}

uint64_t load_u64(const std::vector<uint8_t>& b, size_t off) {
  uint64_t v;
  std::memcpy(&v, &b[off], 8);
  return v;
}

// Drives one executor per rank over a loopback fabric until all finish.
void run_group(SimFabric& fabric, std::vector<std::unique_ptr<CollectiveExec>>& execs) {
  std::map<uint64_t, CollectiveExec*> route;
  for (auto& e : execs)
    for (uint64_t h : e->start()) route[h] = e.get();
  auto all_done = [&] {
    for (auto& e : execs)
      if (!e->done()) return false;
    return true;
  };
  while (!all_done()) {
    auto t = fabric.next_event_time();
    REQUIRE(t.has_value());
    fabric.advance_to(*t);
    for (int r = 0; r < fabric.num_ranks(); r++) {
      for (const auto& c : fabric.endpoint(r).poll()) {
        std::vector<uint64_t> fresh;
        route.at(c.handle)->on_completion(c, &fresh);
        for (uint64_t h : fresh) route[h] = route.at(c.handle);
      }
    }
  }
  for (auto& e : execs) {
    CHECK(!e->failed());
    if (e->failed()) MESSAGE(e->error());
  }
}

}  // namespace

TEST_CASE("balanced_chunks splits 10 into (4,3,3)") {
  CHECK(balanced_chunks(10, 3) == std::vector<uint64_t>{4, 3, 3});
  CHECK(balanced_chunks(0, 4) == std::vector<uint64_t>{0, 0, 0, 0});
  CHECK(balanced_chunks(7, 1) == std::vector<uint64_t>{7});
  // granularity scales units of 8 bytes: 80 bytes over 3 = (32,24,24)
  CHECK(balanced_chunks(80, 3, 8) == std::vector<uint64_t>{32, 24, 24});
  CHECK_THROWS_AS(balanced_chunks(81, 3, 8), CollectiveError);
}

TEST_CASE("balanced_chunks always sums to the total and spreads within 1") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; trial++) {
    int n = 1 + static_cast<int>(rng() % 16);
    uint64_t s = rng() % 100000;
    auto c = balanced_chunks(s, n);
    CHECK(std::accumulate(c.begin(), c.end(), uint64_t{0}) == s);
    auto [mn, mx] = std::minmax_element(c.begin(), c.end());
    CHECK(*mx - *mn <= 1);
    CHECK(std::is_sorted(c.begin(), c.end(), std::greater<>()));
  }
}

TEST_CASE("ring allreduce step count and per-rank byte totals") {
  for (int n : {2, 4, 8, 16}) {
    auto g = group_of(n);
    for (uint64_t s : {uint64_t(n) * 64, uint64_t(n) * 4096}) {
      for (int r = 0; r < n; r++) {
        auto p = plan_ring_allreduce(g, r, 1, s);
        CHECK(p.steps.size() == size_t(2 * (n - 1)));
        // Divisible case: exactly 2*S*(N-1)/N bytes each way per rank.
        CHECK(p.total_send_bytes() == 2 * s * uint64_t(n - 1) / uint64_t(n));
        CHECK(p.total_recv_bytes() == 2 * s * uint64_t(n - 1) / uint64_t(n));
        for (const auto& st : p.steps) {
          CHECK(st.sends.size() == 1);
          CHECK(st.recvs.size() == 1);
        }
      }
    }
  }
}

TEST_CASE("ring allreduce with uneven chunks still moves the chunk schedule") {
  // N=3, S=10: chunks (4,3,3). Enumerate the reduce-scatter phase by hand:
  // step s, position p sends chunk (p-s) mod 3, receives chunk (p-s-1) mod 3.
  auto g = group_of(3);
  uint64_t chunk[3] = {4, 3, 3};
  for (int r = 0; r < 3; r++) {
    auto p = plan_ring_allreduce(g, r, 5, 10);
    REQUIRE(p.steps.size() == 4);
    for (int s = 0; s < 2; s++) {
      int send_chunk = ((r - s) % 3 + 3) % 3;
      int recv_chunk = ((r - s - 1) % 3 + 3) % 3;
      CHECK(p.steps[s].sends[0].bytes == chunk[send_chunk]);
      CHECK(p.steps[s].recvs[0].bytes == chunk[recv_chunk]);
      CHECK(p.steps[s].recvs[0].combine);
      CHECK(p.steps[s].sends[0].peer == (r + 1) % 3);
      CHECK(p.steps[s].recvs[0].peer == (r + 2) % 3);
    }
    for (int s = 0; s < 2; s++) {
      CHECK(p.steps[2 + s].sends[0].bytes == chunk[((r + 1 - s) % 3 + 3) % 3]);
      CHECK(!p.steps[2 + s].recvs[0].combine);
    }
  }
}

TEST_CASE("allgather, reduce-scatter, alltoall, broadcast byte totals") {
  for (int n : {2, 4, 8, 16}) {
    auto g = group_of(n);
    uint64_t contrib = 4096;
    uint64_t s = uint64_t(n) * 4096;
    uint64_t root_sends = 0, bcast_recv_total = 0;
    for (int r = 0; r < n; r++) {
      auto ag = plan_ring_allgather(g, r, 1, contrib);
      CHECK(ag.total_send_bytes() == uint64_t(n - 1) * contrib);
      CHECK(ag.total_recv_bytes() == uint64_t(n - 1) * contrib);

      auto rs = plan_ring_reduce_scatter(g, r, 2, s);
      CHECK(rs.total_send_bytes() == s * uint64_t(n - 1) / uint64_t(n));

      auto a2a = plan_pairwise_alltoall(g, r, 3, s);
      CHECK(a2a.total_send_bytes() == s * uint64_t(n - 1) / uint64_t(n));
      CHECK(a2a.total_recv_bytes() == s * uint64_t(n - 1) / uint64_t(n));

      auto bc = plan_binomial_broadcast(g, 0, r, 4, s);
      if (r == 0) {
        root_sends = bc.total_send_bytes();
        CHECK(bc.total_recv_bytes() == 0);
      } else {
        CHECK(bc.total_recv_bytes() == s);
        bcast_recv_total += bc.total_recv_bytes();
      }
    }
    CHECK(bcast_recv_total == uint64_t(n - 1) * s);
    // Root sends ceil(log2 n) full copies in a binomial tree of power-of-two n.
    CHECK(root_sends / s >= 1);
  }
}

TEST_CASE("broadcast round count is ceil(log2 N)") {
  for (int n : {2, 3, 5, 8, 9, 16}) {
    auto g = group_of(n);
    size_t rounds = 0;
    for (int r = 0; r < n; r++)
      rounds = std::max(rounds, plan_binomial_broadcast(g, 0, r, 1, 64).steps.size());
    size_t expect = 0;
    while ((1u << expect) < unsigned(n)) expect++;
    CHECK(rounds == expect);
  }
}

TEST_CASE("all planners produce matched message multisets and unique tags") {
  std::mt19937_64 rng(7);
  for (int n = 1; n <= 16; n++) {
    auto g = group_of(n);
    uint64_t s = (1 + rng() % 64) * 8 * uint64_t(n);
    std::vector<CollectiveSchedule> ar, ag, rs, a2a, bc;
    for (int r = 0; r < n; r++) {
      ar.push_back(plan_ring_allreduce(g, r, 10, s, 8));
      ag.push_back(plan_ring_allgather(g, r, 11, s / n));
      rs.push_back(plan_ring_reduce_scatter(g, r, 12, s, 8));
      a2a.push_back(plan_pairwise_alltoall(g, r, 13, s, 8));
      bc.push_back(plan_binomial_broadcast(g, n / 2, r, 14, s));
    }
    for (auto* fam : {&ar, &ag, &rs, &a2a, &bc}) {
      check_matched(*fam);
      check_tags_unique(*fam);
    }
  }
}

TEST_CASE("message tag pack/unpack is lossless") {
  uint64_t t = MessageTag::pack(0x12345678, 0xABCD, 0xEF01);
  uint32_t cid, step, chunk;
  MessageTag::unpack(t, &cid, &step, &chunk);
  CHECK(cid == 0x12345678u);
  CHECK(step == 0xABCDu);
  CHECK(chunk == 0xEF01u);
  // Distinct coll ids never collide even with equal step/chunk.
  CHECK(MessageTag::pack(1, 0, 0) != MessageTag::pack(2, 0, 0));
}

TEST_CASE("verification: ring allreduce equals elementwise wrapping sum") {
  std::mt19937_64 rng(21);
  for (int n : {2, 3, 4, 8}) {
    auto g = group_of(n);
    uint64_t s = 8 * uint64_t(n) * 3;  // uneven element split across n
    SimFabric fabric(Topology::uniform(n, 100.0, 1.0), {}, n);
    std::vector<std::vector<uint8_t>> inputs;
    std::vector<std::unique_ptr<CollectiveExec>> execs;
    for (int r = 0; r < n; r++) {
      inputs.push_back(random_u64_buf(s, rng));
      execs.push_back(std::make_unique<CollectiveExec>(
          plan_ring_allreduce(g, r, 1, s, 8), &fabric.endpoint(r)));
      execs.back()->enable_verification(inputs.back());
    }
    run_group(fabric, execs);
    for (size_t off = 0; off + 8 <= s; off += 8) {
      uint64_t expect = 0;
      for (int r = 0; r < n; r++) expect += load_u64(inputs[r], off);
      for (int r = 0; r < n; r++) CHECK(load_u64(execs[r]->result(), off) == expect);
    }
  }
}

TEST_CASE("verification: allgather concatenates contributions in rank order") {
  std::mt19937_64 rng(22);
  int n = 4;
  auto g = group_of(n);
  uint64_t contrib = 48;
  SimFabric fabric(Topology::uniform(n, 100.0, 1.0), {}, n);
  std::vector<std::vector<uint8_t>> inputs;
  std::vector<std::unique_ptr<CollectiveExec>> execs;
  for (int r = 0; r < n; r++) {
    inputs.push_back(random_u64_buf(contrib, rng));
    auto plan = plan_ring_allgather(g, r, 2, contrib);
    execs.push_back(std::make_unique<CollectiveExec>(plan, &fabric.endpoint(r)));
    // Initial buffer: full result size with own contribution in place.
    std::vector<uint8_t> init(contrib * n, 0);
    std::memcpy(&init[r * contrib], inputs[r].data(), contrib);
    execs.back()->enable_verification(std::move(init));
  }
  run_group(fabric, execs);
  for (int r = 0; r < n; r++)
    for (int src = 0; src < n; src++)
      CHECK(std::memcmp(&execs[r]->result()[src * contrib], inputs[src].data(), contrib) == 0);
}

TEST_CASE("verification: reduce-scatter leaves the reduced chunk at own offset") {
  std::mt19937_64 rng(23);
  int n = 4;
  auto g = group_of(n);
  uint64_t s = 8 * 4 * n;
  SimFabric fabric(Topology::uniform(n, 100.0, 1.0), {}, n);
  std::vector<std::vector<uint8_t>> inputs;
  std::vector<std::unique_ptr<CollectiveExec>> execs;
  for (int r = 0; r < n; r++) {
    inputs.push_back(random_u64_buf(s, rng));
    execs.push_back(std::make_unique<CollectiveExec>(
        plan_ring_reduce_scatter(g, r, 3, s, 8), &fabric.endpoint(r)));
    execs.back()->enable_verification(inputs[r]);
  }
  run_group(fabric, execs);
  uint64_t chunk = s / n;
  for (int r = 0; r < n; r++) {
    // The ring leaves position p's fully reduced chunk at index (p+1) mod N.
    uint64_t own = uint64_t((r + 1) % n);
    for (uint64_t off = own * chunk; off < (own + 1) * chunk; off += 8) {
      uint64_t expect = 0;
      for (int src = 0; src < n; src++) expect += load_u64(inputs[src], off);
      CHECK(load_u64(execs[r]->result(), off) == expect);
    }
  }
}

TEST_CASE("verification: alltoall transposes chunks") {
  std::mt19937_64 rng(24);
  int n = 4;
  auto g = group_of(n);
  uint64_t s = 8 * 2 * n;
  uint64_t chunk = s / n;
  SimFabric fabric(Topology::uniform(n, 100.0, 1.0), {}, n);
  std::vector<std::vector<uint8_t>> inputs;
  std::vector<std::unique_ptr<CollectiveExec>> execs;
  for (int r = 0; r < n; r++) {
    inputs.push_back(random_u64_buf(s, rng));
    execs.push_back(std::make_unique<CollectiveExec>(
        plan_pairwise_alltoall(g, r, 4, s, 8), &fabric.endpoint(r)));
    execs.back()->enable_verification(inputs[r], /*separate_recv_buf=*/true);
  }
  run_group(fabric, execs);
  // result[r] chunk j == input[j] chunk r
  for (int r = 0; r < n; r++)
    for (int j = 0; j < n; j++)
      CHECK(std::memcmp(&execs[r]->result()[j * chunk], &inputs[j][r * chunk], chunk) == 0);
}

TEST_CASE("verification: broadcast replicates the root buffer") {
  std::mt19937_64 rng(25);
  for (int n : {2, 5, 8}) {
    auto g = group_of(n);
    uint64_t s = 8 * 9;
    int root = n - 1;
    SimFabric fabric(Topology::uniform(n, 100.0, 1.0), {}, n);
    auto root_buf = random_u64_buf(s, rng);
    std::vector<std::unique_ptr<CollectiveExec>> execs;
    for (int r = 0; r < n; r++) {
      execs.push_back(std::make_unique<CollectiveExec>(
          plan_binomial_broadcast(g, root, r, 5, s), &fabric.endpoint(r)));
      execs.back()->enable_verification(r == root ? root_buf
                                                  : std::vector<uint8_t>(s, 0));
    }
    run_group(fabric, execs);
    for (int r = 0; r < n; r++) CHECK(execs[r]->result() == root_buf);
  }
}

TEST_CASE("custom schedule: valid two-rank exchange loads and matches") {
  CommGroup g{0, {0, 1}};
  std::string doc = R"({
    "coll_id": 9, "group_id": 0,
    "ranks": {
      "0": {"steps": [{"sends": [{"peer":1,"bytes":64,"tag":1}],
                       "recvs": [{"peer":1,"bytes":32,"tag":2}]}]},
      "1": {"steps": [{"sends": [{"peer":0,"bytes":32,"tag":2}],
                       "recvs": [{"peer":0,"bytes":64,"tag":1}]}]}
    }})";
  auto p0 = load_custom_schedule(doc, g, 0);
  auto p1 = load_custom_schedule(doc, g, 1);
  CHECK(p0.coll_id == 9);
  CHECK(p0.total_send_bytes() == 64);
  CHECK(p1.total_send_bytes() == 32);
  check_matched({p0, p1});
}

TEST_CASE("custom schedule: unmatched message is rejected") {
  CommGroup g{0, {0, 1}};
  std::string doc = R"({
    "coll_id": 9, "group_id": 0,
    "ranks": {
      "0": {"steps": [{"sends": [{"peer":1,"bytes":64,"tag":1}], "recvs": []}]},
      "1": {"steps": [{"sends": [], "recvs": [{"peer":0,"bytes":63,"tag":1}]}]}
    }})";
  CHECK_THROWS_AS(load_custom_schedule(doc, g, 0), CollectiveError);
}

TEST_CASE("custom schedule: peer outside the group is rejected") {
  CommGroup g{0, {0, 1}};
  std::string doc = R"({
    "coll_id": 1, "group_id": 0,
    "ranks": {
      "0": {"steps": [{"sends": [{"peer":5,"bytes":8,"tag":1}], "recvs": []}]},
      "1": {"steps": []}
    }})";
  CHECK_THROWS_AS(load_custom_schedule(doc, g, 0), CollectiveError);
}

TEST_CASE("custom schedule: duplicate (peer,tag) send is rejected") {
  CommGroup g{0, {0, 1}};
  std::string doc = R"({
    "coll_id": 1, "group_id": 0,
    "ranks": {
      "0": {"steps": [{"sends": [{"peer":1,"bytes":8,"tag":1},
                                 {"peer":1,"bytes":8,"tag":1}], "recvs": []}]},
      "1": {"steps": [{"sends": [], "recvs": [{"peer":0,"bytes":8,"tag":1},
                                              {"peer":0,"bytes":8,"tag":1}]}]}
    }})";
  CHECK_THROWS_AS(load_custom_schedule(doc, g, 0), CollectiveError);
}
