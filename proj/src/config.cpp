#include "loomnet/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace loomnet {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string resolve(const std::string& base_dir, const std::string& path) {
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(base_dir) / p).string();
}

void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                const std::string& where) {
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw ConfigError("unknown field '" + key + "' in " + where);
}

CollType coll_type_from(const std::string& s) {
  if (s == "ALLREDUCE") return CollType::AllReduce;
  if (s == "ALLGATHER") return CollType::AllGather;
  if (s == "REDUCESCATTER") return CollType::ReduceScatter;
  if (s == "ALLTOALL") return CollType::AllToAll;
  if (s == "BROADCAST") return CollType::Broadcast;
  throw ConfigError("unknown collective type '" + s + "'");
}

}  // namespace

WorkloadGraph synth_from_spec(const nlohmann::json& spec) {
  if (!spec.is_object() || !spec.contains("kind"))
    throw ConfigError("synthesizer spec needs a 'kind' field");
  std::string kind = spec.at("kind").get<std::string>();
  try {
    if (kind == "data_parallel") {
      check_keys(spec,
                 {"kind", "num_ranks", "layers", "fwd_us", "bwd_us", "grad_bytes",
                  "iterations"},
                 "data_parallel spec");
      return synth_data_parallel(
          spec.at("num_ranks").get<int>(), spec.at("layers").get<int>(),
          spec.at("fwd_us").get<uint64_t>(), spec.at("bwd_us").get<uint64_t>(),
          spec.at("grad_bytes").get<uint64_t>(), spec.at("iterations").get<int>());
    }
    if (kind == "pipeline") {
      check_keys(spec, {"kind", "num_ranks", "microbatches", "compute_us", "activation_bytes"},
                 "pipeline spec");
      return synth_pipeline(spec.at("num_ranks").get<int>(),
                            spec.at("microbatches").get<int>(),
                            spec.at("compute_us").get<uint64_t>(),
                            spec.at("activation_bytes").get<uint64_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad synthesizer spec: ") + e.what());
  } catch (const WorkloadError& e) {
    throw ConfigError(std::string("bad synthesizer spec: ") + e.what());
  }
  throw ConfigError("unknown synthesizer kind '" + kind + "'");
}

EngineConfig RunConfig::engine() const {
  EngineConfig cfg;
  cfg.verification = verification;
  cfg.stub_comm_us = stub_comm_us;
  cfg.coll_extra_us = coll_delay;
  cfg.algorithms = algorithms;
  cfg.max_in_flight = max_in_flight;
  cfg.seed = seed;
  return cfg;
}

RunConfig parse_run_config(const std::string& text, const std::string& base_dir) {
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(doc,
             {"workload", "mode", "transport", "topology", "anomalies", "hosts",
              "coordinator", "collective_algorithm", "seed", "output_dir", "iterations",
              "verification", "stub_comm_us", "coll_delay", "max_in_flight",
              "quiescence_timeout_s"},
             "run config");

  RunConfig cfg;
  cfg.echo = doc;
  try {
    if (!doc.contains("workload")) throw ConfigError("config needs 'workload'");
    if (doc.at("workload").is_string()) {
      if (doc.contains("iterations"))
        throw ConfigError("'iterations' override applies only to synthesizer specs");
      cfg.workload = load_workload(resolve(base_dir, doc.at("workload").get<std::string>()));
    } else {
      nlohmann::json spec = doc.at("workload");
      if (doc.contains("iterations")) spec["iterations"] = doc.at("iterations").get<int>();
      cfg.workload = synth_from_spec(spec);
    }

    if (doc.contains("mode")) {
      std::string m = doc.at("mode").get<std::string>();
      if (m == "VIRTUAL")
        cfg.mode = RunMode::Virtual;
      else if (m == "REAL")
        cfg.mode = RunMode::Real;
      else
        throw ConfigError("mode must be VIRTUAL or REAL, got '" + m + "'");
    }
    if (doc.contains("transport")) {
      std::string t = doc.at("transport").get<std::string>();
      if (t == "SIM")
        cfg.transport = TransportKind::Sim;
      else if (t == "SOCKET")
        cfg.transport = TransportKind::Socket;
      else
        throw ConfigError("transport must be SIM or SOCKET, got '" + t + "'");
    }

    if (doc.contains("topology"))
      cfg.topology = Topology::load(resolve(base_dir, doc.at("topology").get<std::string>()));
    else
      cfg.topology = Topology::uniform(cfg.workload.num_ranks, 100.0, 1.0);
    if (doc.contains("anomalies"))
      cfg.anomalies =
          load_anomalies(resolve(base_dir, doc.at("anomalies").get<std::string>()));
    if (doc.contains("hosts")) cfg.hosts = doc.at("hosts").get<std::vector<std::string>>();
    if (doc.contains("coordinator"))
      cfg.coordinator = doc.at("coordinator").get<std::string>();
    if (doc.contains("collective_algorithm"))
      for (const auto& [key, value] : doc.at("collective_algorithm").items())
        cfg.algorithms[coll_type_from(key)] = value.get<std::string>();
    if (doc.contains("seed")) cfg.seed = doc.at("seed").get<uint64_t>();
    if (doc.contains("output_dir"))
      cfg.output_dir = resolve(base_dir, doc.at("output_dir").get<std::string>());
    if (doc.contains("verification")) cfg.verification = doc.at("verification").get<bool>();
    if (doc.contains("stub_comm_us"))
      cfg.stub_comm_us = doc.at("stub_comm_us").get<uint64_t>();
    if (doc.contains("coll_delay"))
      for (const auto& [key, value] : doc.at("coll_delay").items())
        cfg.coll_delay[std::stoll(key)] = value.get<double>();
    if (doc.contains("max_in_flight")) cfg.max_in_flight = doc.at("max_in_flight").get<int>();
    if (doc.contains("quiescence_timeout_s"))
      cfg.quiescence_timeout_s = doc.at("quiescence_timeout_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const WorkloadError& e) {
    throw ConfigError(e.what());
  } catch (const NetError& e) {
    throw ConfigError(e.what());
  }

  auto violations = validate(cfg.workload);
  if (!violations.empty()) throw ConfigError("invalid workload: " + violations.front());
  if (cfg.mode == RunMode::Virtual && cfg.transport != TransportKind::Sim)
    throw ConfigError("VIRTUAL mode requires the SIM transport");
  if (cfg.mode == RunMode::Real && cfg.transport != TransportKind::Socket)
    throw ConfigError("REAL mode requires the SOCKET transport");
  if (cfg.stub_comm_us && cfg.mode != RunMode::Virtual)
    throw ConfigError("stub_comm_us applies only to VIRTUAL runs");
  if (cfg.transport == TransportKind::Socket &&
      static_cast<int>(cfg.hosts.size()) != cfg.workload.num_ranks)
    throw ConfigError("SOCKET transport needs one host entry per rank (" +
                      std::to_string(cfg.workload.num_ranks) + " ranks, " +
                      std::to_string(cfg.hosts.size()) + " hosts)");
  if (static_cast<int>(cfg.topology.hosts.size()) < cfg.workload.num_ranks)
    throw ConfigError("topology has fewer hosts than the workload has ranks");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_file(path),
                          std::filesystem::path(path).parent_path().string().empty()
                              ? "."
                              : std::filesystem::path(path).parent_path().string());
}

}  // namespace loomnet
