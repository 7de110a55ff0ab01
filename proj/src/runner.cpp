#include "loomnet/runner.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <queue>
#include <random>
#include <sstream>

#include "loomnet/socket_transport.hpp"

namespace loomnet {

namespace {

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RunnerError("cannot write '" + path + "'");
  out << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunnerError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string kind_name(OpKind k) {
  switch (k) {
    case OpKind::Compute: return "COMPUTE";
    case OpKind::Memory: return "MEMORY";
    case OpKind::CommColl: return "COMM_COLL";
    case OpKind::CommSend: return "COMM_SEND";
    case OpKind::CommRecv: return "COMM_RECV";
  }
  return "?";
}

OpKind kind_from(const std::string& s) {
  if (s == "COMPUTE") return OpKind::Compute;
  if (s == "MEMORY") return OpKind::Memory;
  if (s == "COMM_COLL") return OpKind::CommColl;
  if (s == "COMM_SEND") return OpKind::CommSend;
  if (s == "COMM_RECV") return OpKind::CommRecv;
  throw RunnerError("unknown op kind '" + s + "'");
}

std::string rank_records_path(const std::string& dir, int rank) {
  return (std::filesystem::path(dir) / ("rank_" + std::to_string(rank) + ".records.json"))
      .string();
}

// Executes one rank's dependency graph against a live endpoint: compute and
// memory operators are timed sleeps (a local deadline heap), communication
// operators go through the transport, collectives through CollectiveExec.
class RealRankDriver {
 public:
  RealRankDriver(const RunConfig& cfg, int rank, SocketEndpoint& ep)
      : cfg_(cfg), eng_(cfg.engine()), rank_(rank), ep_(ep) {}

  std::vector<OpRecord> run() {
    st_ = init_rank(cfg_.workload, rank_);
    issue_ready();
    double idle_since = ep_.now_us();
    while (!st_.done()) {
      double now = ep_.now_us();
      bool progressed = false;
      while (!deadlines_.empty() && deadlines_.top().first <= now) {
        int node_id = deadlines_.top().second;
        deadlines_.pop();
        complete_node(node_id, ep_.now_us());
        progressed = true;
      }
      for (const Completion& c : ep_.poll()) {
        handle_completion(c);
        progressed = true;
      }
      if (progressed) {
        issue_ready();
        idle_since = ep_.now_us();
        continue;
      }
      if (deadlines_.empty() && handle_to_node_.empty() && coll_handles_.empty()) {
        size_t left = st_.total() - st_.completed.size();
        throw RunnerError("deadlock detected: rank " + std::to_string(rank_) + " has " +
                          std::to_string(left) + " uncompleted nodes;");
      }
      double wait_s = cfg_.quiescence_timeout_s;
      if (!deadlines_.empty())
        wait_s = std::min(wait_s, (deadlines_.top().first - now) / 1e6);
      if (wait_s > 0) ep_.wait(wait_s);
      if (deadlines_.empty() && ep_.now_us() - idle_since > cfg_.quiescence_timeout_s * 1e6)
        throw RunnerError("quiescence timeout on rank " + std::to_string(rank_));
    }
    std::sort(st_.records.begin(), st_.records.end(), [](const OpRecord& a, const OpRecord& b) {
      return a.start_us != b.start_us ? a.start_us < b.start_us : a.node_id < b.node_id;
    });
    return st_.records;
  }

 private:
  void issue_ready() {
    while (!st_.ready.empty() &&
           (eng_.max_in_flight <= 0 ||
            static_cast<int>(st_.in_flight.size()) < eng_.max_in_flight)) {
      issue_node(*st_.ready.begin());
    }
  }

  void issue_node(int node_id) {
    const OperatorNode* n = st_.by_id.at(node_id);
    st_.ready.erase(node_id);
    st_.in_flight.insert(node_id);
    double now = ep_.now_us();
    st_.records.push_back({rank_, node_id, n->kind, now, now});

    if (n->kind == OpKind::Compute || n->kind == OpKind::Memory) {
      deadlines_.push({now + double(n->duration_us), node_id});
      return;
    }
    if (n->kind == OpKind::CommSend) {
      handle_to_node_[ep_.post_send(n->peer, n->size_bytes,
                                    MessageTag::pack(n->coll_id, 0, 0))] = node_id;
      return;
    }
    if (n->kind == OpKind::CommRecv) {
      handle_to_node_[ep_.post_recv(n->peer, n->size_bytes,
                                    MessageTag::pack(n->coll_id, 0, 0))] = node_id;
      return;
    }

    const CommGroup* group = cfg_.workload.find_group(n->group_id);
    if (!group) throw RunnerError("unknown group at node " + std::to_string(node_id));
    auto exec = std::make_unique<CollectiveExec>(plan_collective(*n, *group, eng_), &ep_);
    if (eng_.verification) {
      std::mt19937_64 rng(eng_.seed ^ (uint64_t(n->coll_id) << 8) ^ uint64_t(rank_));
      uint64_t sz = n->size_bytes;
      if (n->coll_type == CollType::AllGather) sz = n->size_bytes * group->members.size();
      std::vector<uint8_t> buf(sz);
      for (uint64_t i = 0; i + 8 <= sz; i += 8) {
        uint64_t v = rng();
        std::memcpy(buf.data() + i, &v, 8);
      }
      exec->enable_verification(std::move(buf), n->coll_type == CollType::AllToAll);
    }
    auto handles = exec->start();
    if (exec->done()) {
      deadlines_.push({ep_.now_us(), node_id});
    } else {
      for (uint64_t h : handles) coll_handles_[h] = node_id;
    }
    execs_[node_id] = std::move(exec);
  }

  void complete_node(int node_id, double t) {
    auto it = std::find_if(st_.records.begin(), st_.records.end(),
                           [&](const OpRecord& r) { return r.node_id == node_id; });
    if (it == st_.records.end()) throw RunnerError("completing node without a start record");
    it->end_us = t;
    on_complete(st_, node_id);
    execs_.erase(node_id);
  }

  void handle_completion(const Completion& c) {
    if (!c.ok && c.handle == 0)
      throw RunnerError("transport failure on rank " + std::to_string(rank_) + ": " + c.error);
    auto pit = handle_to_node_.find(c.handle);
    if (pit != handle_to_node_.end()) {
      int node_id = pit->second;
      handle_to_node_.erase(pit);
      if (!c.ok)
        throw RunnerError("transport failure on rank " + std::to_string(rank_) + " node " +
                          std::to_string(node_id) + ": " + c.error);
      complete_node(node_id, c.time_us);
      return;
    }
    auto cit = coll_handles_.find(c.handle);
    if (cit == coll_handles_.end()) throw RunnerError("completion for unknown handle");
    int node_id = cit->second;
    coll_handles_.erase(cit);
    CollectiveExec* exec = execs_.at(node_id).get();
    std::vector<uint64_t> fresh;
    exec->on_completion(c, &fresh);
    if (exec->failed())
      throw RunnerError("transport failure on rank " + std::to_string(rank_) + " node " +
                        std::to_string(node_id) + ": " + exec->error());
    for (uint64_t h : fresh) coll_handles_[h] = node_id;
    if (exec->done()) complete_node(node_id, exec->completion_time_us());
  }

  const RunConfig& cfg_;
  EngineConfig eng_;
  int rank_;
  SocketEndpoint& ep_;
  RankState st_;
  // (deadline_us, node_id) min-heap for locally timed operators.
  std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>,
                      std::greater<>>
      deadlines_;
  std::map<int, std::unique_ptr<CollectiveExec>> execs_;
  std::map<uint64_t, int> handle_to_node_;
  std::map<uint64_t, int> coll_handles_;
};

}  // namespace

RunOutputs write_outputs(RunReport report, const std::string& output_dir) {
  std::filesystem::create_directories(output_dir);
  RunOutputs out;
  out.report_path = (std::filesystem::path(output_dir) / "report.json").string();
  out.trace_path = (std::filesystem::path(output_dir) / "trace.json").string();
  out.csv_path = (std::filesystem::path(output_dir) / "iterations.csv").string();
  write_file(out.report_path, export_report_json(report));
  write_file(out.trace_path, export_trace_json(report));
  write_file(out.csv_path, export_csv_iter(report));
  out.report = std::move(report);
  return out;
}

RunOutputs run_virtual(const RunConfig& cfg) {
  SimFabric fabric(cfg.topology, cfg.anomalies, cfg.workload.num_ranks);
  VirtualDriver driver(cfg.workload, cfg.engine(), &fabric);
  RunRecords records = driver.run();
  return write_outputs(build_report(cfg.workload, records, cfg.echo, "VIRTUAL"),
                       cfg.output_dir);
}

void run_real_rank(const RunConfig& cfg, int rank, const std::string& coordinator_override) {
  if (rank < 0 || rank >= cfg.workload.num_ranks)
    throw RunnerError("rank " + std::to_string(rank) + " out of range");
  SocketOptions opts;
  opts.rank = rank;
  opts.num_ranks = cfg.workload.num_ranks;
  opts.coordinator = coordinator_override.empty() ? cfg.coordinator : coordinator_override;
  opts.host_id = rank;
  opts.nic_gbps = cfg.topology.hosts[rank].nic_gbps;
  opts.timeline = cfg.anomalies;
  SocketEndpoint ep(opts);
  RealRankDriver driver(cfg, rank, ep);
  auto records = driver.run();

  nlohmann::ordered_json j;
  j["rank"] = rank;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    arr.push_back({{"node_id", r.node_id},
                   {"kind", kind_name(r.kind)},
                   {"start_us", r.start_us},
                   {"end_us", r.end_us}});
  }
  j["records"] = std::move(arr);
  std::filesystem::create_directories(cfg.output_dir);
  write_file(rank_records_path(cfg.output_dir, rank), j.dump(2) + "\n");
}

RunOutputs run_real_parent(const RunConfig& cfg, const std::string& argv0,
                           const std::string& config_path) {
  std::filesystem::create_directories(cfg.output_dir);
  int n = cfg.workload.num_ranks;
  std::vector<pid_t> pids(n, -1);
  for (int r = 0; r < n; r++) {
    pid_t pid = fork();
    if (pid < 0) throw RunnerError("fork: " + std::string(strerror(errno)));
    if (pid == 0) {
      std::string rank_str = std::to_string(r);
      execl(argv0.c_str(), argv0.c_str(), "run", "-c", config_path.c_str(), "--rank",
            rank_str.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    pids[r] = pid;
  }
  std::string failure;
  for (int r = 0; r < n; r++) {
    int status = 0;
    waitpid(pids[r], &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
      failure = "rank " + std::to_string(r) + " exited with status " +
                std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1);
  }
  if (!failure.empty()) throw RunnerError(failure);

  RunRecords records;
  double min_start = std::numeric_limits<double>::infinity();
  for (int r = 0; r < n; r++) {
    auto j = nlohmann::json::parse(read_file(rank_records_path(cfg.output_dir, r)));
    for (const auto& e : j.at("records")) {
      OpRecord rec{r, e.at("node_id").get<int>(), kind_from(e.at("kind").get<std::string>()),
                   e.at("start_us").get<double>(), e.at("end_us").get<double>()};
      min_start = std::min(min_start, rec.start_us);
      records.per_rank[r].push_back(rec);
    }
  }
  // All ranks share one monotonic epoch; shift so the earliest op starts at 0.
  if (std::isinf(min_start)) min_start = 0;
  for (auto& [rank, recs] : records.per_rank) {
    for (auto& rec : recs) {
      rec.start_us -= min_start;
      rec.end_us -= min_start;
      records.makespan_us = std::max(records.makespan_us, rec.end_us);
    }
  }
  return write_outputs(build_report(cfg.workload, records, cfg.echo, "REAL"), cfg.output_dir);
}

}  // namespace loomnet
