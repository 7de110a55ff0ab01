#include "loomnet/collective.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <json.hpp>

namespace loomnet {

uint64_t MessageTag::pack(int64_t coll_id, uint32_t step, uint32_t chunk) {
  if (step > 0xffff) throw CollectiveError("step index exceeds 16 bits");
  if (chunk > 0xffff) throw CollectiveError("chunk index exceeds 16 bits");
  return (static_cast<uint64_t>(coll_id) & 0xffffffffull) << 32 |
         static_cast<uint64_t>(step) << 16 | chunk;
}

void MessageTag::unpack(uint64_t tag, uint32_t* coll_id, uint32_t* step, uint32_t* chunk) {
  if (coll_id) *coll_id = static_cast<uint32_t>(tag >> 32);
  if (step) *step = static_cast<uint32_t>((tag >> 16) & 0xffff);
  if (chunk) *chunk = static_cast<uint32_t>(tag & 0xffff);
}

uint64_t CollectiveSchedule::total_send_bytes() const {
  uint64_t n = 0;
  for (const auto& s : steps)
    for (const auto& m : s.sends) n += m.bytes;
  return n;
}

uint64_t CollectiveSchedule::total_recv_bytes() const {
  uint64_t n = 0;
  for (const auto& s : steps)
    for (const auto& m : s.recvs) n += m.bytes;
  return n;
}

std::vector<uint64_t> balanced_chunks(uint64_t size_bytes, int n, uint64_t granularity) {
  if (n <= 0) throw CollectiveError("chunk count must be positive");
  if (granularity == 0) throw CollectiveError("granularity must be positive");
  if (size_bytes % granularity != 0)
    throw CollectiveError("size not a multiple of granularity");
  uint64_t units = size_bytes / granularity;
  uint64_t base = units / n, extra = units % n;
  std::vector<uint64_t> out(n);
  for (int i = 0; i < n; i++)
    out[i] = (base + (static_cast<uint64_t>(i) < extra ? 1 : 0)) * granularity;
  return out;
}

namespace {

int position_of(const CommGroup& group, int rank) {
  auto it = std::find(group.members.begin(), group.members.end(), rank);
  if (it == group.members.end())
    throw CollectiveError("rank " + std::to_string(rank) + " not in group " +
                          std::to_string(group.group_id));
  return static_cast<int>(it - group.members.begin());
}

std::vector<uint64_t> prefix_offsets(const std::vector<uint64_t>& chunks) {
  std::vector<uint64_t> off(chunks.size(), 0);
  for (size_t i = 1; i < chunks.size(); i++) off[i] = off[i - 1] + chunks[i - 1];
  return off;
}

int mod(int a, int n) { return ((a % n) + n) % n; }

}  // namespace

CollectiveSchedule plan_ring_allreduce(const CommGroup& group, int rank, int64_t coll_id,
                                       uint64_t size_bytes, uint64_t granularity) {
  int p = position_of(group, rank);
  int n = static_cast<int>(group.members.size());
  CollectiveSchedule sched{coll_id, rank, {}};
  if (n == 1) return sched;
  auto chunks = balanced_chunks(size_bytes, n, granularity);
  auto offs = prefix_offsets(chunks);
  int succ = group.members[mod(p + 1, n)];
  int pred = group.members[mod(p - 1, n)];
  // Reduce-scatter phase.
  for (int s = 0; s < n - 1; s++) {
    int cs = mod(p - s, n), cr = mod(p - s - 1, n);
    CollStep step;
    step.sends.push_back({succ, chunks[cs], MessageTag::pack(coll_id, s, cs), offs[cs], false});
    step.recvs.push_back({pred, chunks[cr], MessageTag::pack(coll_id, s, cr), offs[cr], true});
    sched.steps.push_back(std::move(step));
  }
  // Allgather phase.
  for (int s = 0; s < n - 1; s++) {
    int cs = mod(p + 1 - s, n), cr = mod(p - s, n);
    uint32_t gstep = static_cast<uint32_t>(n - 1 + s);
    CollStep step;
    step.sends.push_back({succ, chunks[cs], MessageTag::pack(coll_id, gstep, cs), offs[cs], false});
    step.recvs.push_back({pred, chunks[cr], MessageTag::pack(coll_id, gstep, cr), offs[cr], false});
    sched.steps.push_back(std::move(step));
  }
  return sched;
}

CollectiveSchedule plan_ring_allgather(const CommGroup& group, int rank, int64_t coll_id,
                                       uint64_t contrib_bytes) {
  int p = position_of(group, rank);
  int n = static_cast<int>(group.members.size());
  CollectiveSchedule sched{coll_id, rank, {}};
  if (n == 1) return sched;
  int succ = group.members[mod(p + 1, n)];
  int pred = group.members[mod(p - 1, n)];
  for (int s = 0; s < n - 1; s++) {
    int cs = mod(p - s, n), cr = mod(p - s - 1, n);
    CollStep step;
    step.sends.push_back({succ, contrib_bytes, MessageTag::pack(coll_id, s, cs),
                          static_cast<uint64_t>(cs) * contrib_bytes, false});
    step.recvs.push_back({pred, contrib_bytes, MessageTag::pack(coll_id, s, cr),
                          static_cast<uint64_t>(cr) * contrib_bytes, false});
    sched.steps.push_back(std::move(step));
  }
  return sched;
}

CollectiveSchedule plan_ring_reduce_scatter(const CommGroup& group, int rank, int64_t coll_id,
                                            uint64_t size_bytes, uint64_t granularity) {
  int p = position_of(group, rank);
  int n = static_cast<int>(group.members.size());
  CollectiveSchedule sched{coll_id, rank, {}};
  if (n == 1) return sched;
  auto chunks = balanced_chunks(size_bytes, n, granularity);
  auto offs = prefix_offsets(chunks);
  int succ = group.members[mod(p + 1, n)];
  int pred = group.members[mod(p - 1, n)];
  for (int s = 0; s < n - 1; s++) {
    int cs = mod(p - s, n), cr = mod(p - s - 1, n);
    CollStep step;
    step.sends.push_back({succ, chunks[cs], MessageTag::pack(coll_id, s, cs), offs[cs], false});
    step.recvs.push_back({pred, chunks[cr], MessageTag::pack(coll_id, s, cr), offs[cr], true});
    sched.steps.push_back(std::move(step));
  }
  return sched;
}

CollectiveSchedule plan_pairwise_alltoall(const CommGroup& group, int rank, int64_t coll_id,
                                          uint64_t sendbuf_bytes, uint64_t granularity) {
  int p = position_of(group, rank);
  int n = static_cast<int>(group.members.size());
  CollectiveSchedule sched{coll_id, rank, {}};
  if (n == 1) return sched;
  auto chunks = balanced_chunks(sendbuf_bytes, n, granularity);
  auto offs = prefix_offsets(chunks);
  for (int k = 1; k < n; k++) {
    int dst = mod(p + k, n), src = mod(p - k, n);
    CollStep step;
    // Tag chunk index is the destination position, which is globally unique
    // per (step, chunk) since only one rank targets it each step.
    step.sends.push_back({group.members[dst], chunks[dst],
                          MessageTag::pack(coll_id, k - 1, dst), offs[dst], false});
    step.recvs.push_back({group.members[src], chunks[p],
                          MessageTag::pack(coll_id, k - 1, p), offs[src], false});
    sched.steps.push_back(std::move(step));
  }
  return sched;
}

CollectiveSchedule plan_binomial_broadcast(const CommGroup& group, int root, int rank,
                                           int64_t coll_id, uint64_t size_bytes) {
  int p = position_of(group, rank);
  int root_pos = position_of(group, root);
  int n = static_cast<int>(group.members.size());
  CollectiveSchedule sched{coll_id, rank, {}};
  if (n == 1) return sched;
  int rel = mod(p - root_pos, n);
  int rounds = 0;
  while ((1 << rounds) < n) rounds++;
  for (int k = 0; k < rounds; k++) {
    CollStep step;
    int bit = 1 << k;
    if (rel < bit && rel + bit < n) {
      int dst_pos = mod(root_pos + rel + bit, n);
      step.sends.push_back({group.members[dst_pos], size_bytes,
                            MessageTag::pack(coll_id, k, static_cast<uint32_t>(rel + bit)), 0,
                            false});
    } else if (rel >= bit && rel < 2 * bit) {
      int src_pos = mod(root_pos + rel - bit, n);
      step.recvs.push_back({group.members[src_pos], size_bytes,
                            MessageTag::pack(coll_id, k, static_cast<uint32_t>(rel)), 0, false});
    }
    sched.steps.push_back(std::move(step));
  }
  return sched;
}

CollectiveSchedule load_custom_schedule(const std::string& text, const CommGroup& group,
                                        int rank) {
  position_of(group, rank);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CollectiveError(std::string("custom schedule syntax error: ") + e.what());
  }
  int64_t coll_id;
  std::map<int, std::vector<CollStep>> slices;
  try {
    coll_id = j.at("coll_id").get<int64_t>();
    if (j.at("group_id").get<int>() != group.group_id)
      throw CollectiveError("custom schedule group_id mismatch");
    for (auto it = j.at("ranks").begin(); it != j.at("ranks").end(); ++it) {
      int r = std::stoi(it.key());
      if (std::find(group.members.begin(), group.members.end(), r) == group.members.end())
        throw CollectiveError("custom schedule names non-member rank " + std::to_string(r));
      std::vector<CollStep> steps;
      for (const auto& sj : it.value().at("steps")) {
        CollStep step;
        auto read_msgs = [&](const char* key, std::vector<CollMsg>* out) {
          if (!sj.contains(key)) return;
          for (const auto& mj : sj.at(key)) {
            CollMsg m;
            m.peer = mj.at("peer").get<int>();
            m.bytes = mj.at("bytes").get<uint64_t>();
            uint64_t user_tag = mj.at("tag").get<uint64_t>();
            if (user_tag > 0xffffffffull)
              throw CollectiveError("custom schedule tag exceeds 32 bits");
            m.tag = (static_cast<uint64_t>(coll_id) & 0xffffffffull) << 32 | user_tag;
            if (std::find(group.members.begin(), group.members.end(), m.peer) ==
                group.members.end())
              throw CollectiveError("unknown peer " + std::to_string(m.peer) +
                                    " in custom schedule");
            out->push_back(m);
          }
        };
        read_msgs("sends", &step.sends);
        read_msgs("recvs", &step.recvs);
        steps.push_back(std::move(step));
      }
      slices[r] = std::move(steps);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CollectiveError(std::string("custom schedule schema error: ") + e.what());
  }

  // Cross-validate: multiset of sends must equal multiset of recvs, keyed by
  // (src, dst, bytes, tag); (src, dst, tag) must be unique.
  std::map<std::tuple<int, int, uint64_t, uint64_t>, int> sends, recvs;
  std::set<std::tuple<int, int, uint64_t>> seen_tags;
  for (const auto& [r, steps] : slices) {
    for (const auto& step : steps) {
      for (const auto& m : step.sends) {
        if (!seen_tags.insert({r, m.peer, m.tag}).second)
          throw CollectiveError("duplicate tag in custom schedule rank " + std::to_string(r));
        sends[{r, m.peer, m.bytes, m.tag}]++;
      }
      for (const auto& m : step.recvs) recvs[{m.peer, r, m.bytes, m.tag}]++;
    }
  }
  if (sends != recvs) {
    for (const auto& [k, cnt] : sends) {
      auto it = recvs.find(k);
      if (it == recvs.end() || it->second != cnt) {
        auto [src, dst, bytes, tag] = k;
        throw CollectiveError("unmatched message: rank " + std::to_string(src) + " -> rank " +
                              std::to_string(dst) + " tag " + std::to_string(tag & 0xffffffffull));
      }
    }
    throw CollectiveError("unmatched message: recv without send");
  }

  CollectiveSchedule sched{coll_id, rank, {}};
  auto it = slices.find(rank);
  if (it != slices.end()) sched.steps = std::move(it->second);
  return sched;
}

}  // namespace loomnet
