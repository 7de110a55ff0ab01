#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "loomnet/config.hpp"
#include "loomnet/metrics.hpp"
#include "loomnet/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitAnomaly = 2;
constexpr int kExitRuntime = 3;

bool log_enabled() {
  const char* v = std::getenv("LOOMNET_LOG");
  return v && *v && std::string(v) != "0" && std::string(v) != "off";
}

void log_line(const std::string& msg) {
  if (log_enabled()) std::cerr << "[loomnet] " << msg << "\n";
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw loomnet::ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw loomnet::ConfigError("cannot write '" + path + "'");
  out << text;
}

int cmd_validate(const std::string& path) {
  loomnet::WorkloadGraph g;
  try {
    g = loomnet::load_workload(path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  auto violations = loomnet::validate(g);
  for (const auto& v : violations) std::cout << v << "\n";
  if (!violations.empty()) return kExitUsage;
  std::cout << "ok: " << g.num_ranks << " ranks, " << g.total_nodes() << " nodes\n";
  return kExitOk;
}

int cmd_synth(const std::string& spec_path, const std::string& out_path) {
  try {
    auto spec = nlohmann::json::parse(read_file(spec_path));
    auto g = loomnet::synth_from_spec(spec);
    write_file(out_path, loomnet::serialize_workload(g));
    log_line("wrote workload to " + out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

int cmd_run(const std::string& config_path, int rank, const std::string& coordinator,
            const char* argv0) {
  loomnet::RunConfig cfg;
  try {
    cfg = loomnet::load_run_config(config_path);
    if (!coordinator.empty()) cfg.coordinator = coordinator;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    if (cfg.mode == loomnet::RunMode::Virtual) {
      if (rank >= 0) {
        std::cerr << "config error: --rank applies only to REAL runs\n";
        return kExitUsage;
      }
      auto out = loomnet::run_virtual(cfg);
      log_line("virtual run complete, makespan " + std::to_string(out.report.makespan_us) +
               " us");
      std::cout << out.report_path << "\n" << out.trace_path << "\n" << out.csv_path << "\n";
    } else if (rank >= 0) {
      loomnet::run_real_rank(cfg, rank, coordinator);
      log_line("rank " + std::to_string(rank) + " finished");
    } else {
      auto out = loomnet::run_real_parent(cfg, argv0, config_path);
      log_line("real run complete, makespan " + std::to_string(out.report.makespan_us) +
               " us");
      std::cout << out.report_path << "\n" << out.trace_path << "\n" << out.csv_path << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_compare(const std::string& measured_path, const std::string& predicted_path,
                const std::string& out_path, double threshold) {
  loomnet::Divergence d;
  try {
    auto measured = loomnet::load_report(measured_path);
    auto predicted = loomnet::load_report(predicted_path);
    d = loomnet::compare_runs(measured, predicted, threshold);
    write_file(out_path, loomnet::export_divergence_json(d));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (d.any_flagged) {
    std::cout << "anomaly flagged, onset iteration " << d.onset_iter << "\n";
    return kExitAnomaly;
  }
  std::cout << "no anomaly flagged\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"workload-graph replay and network emulation toolkit"};
  app.require_subcommand(1);

  std::string workload_path;
  auto* validate = app.add_subcommand("validate", "check a workload file");
  validate->add_option("file", workload_path, "workload JSON")->required();

  std::string spec_path, synth_out;
  auto* synth = app.add_subcommand("synth", "generate a workload from a synthesizer spec");
  synth->add_option("spec", spec_path, "synthesizer spec JSON")->required();
  synth->add_option("-o,--output", synth_out, "output workload path")->required();

  std::string config_path, coordinator;
  int rank = -1;
  auto* run = app.add_subcommand("run", "execute a configured run");
  run->add_option("-c,--config", config_path, "run config JSON")->required();
  run->add_option("--rank", rank, "run a single rank of a REAL run");
  run->add_option("--coordinator", coordinator, "rendezvous address override");

  std::string measured_path, predicted_path, compare_out = "divergence.json";
  double threshold = 1.25;
  auto* compare = app.add_subcommand("compare", "compare measured vs predicted reports");
  compare->add_option("measured", measured_path, "measured report")->required();
  compare->add_option("predicted", predicted_path, "predicted report")->required();
  compare->add_option("-o,--output", compare_out, "divergence output path");
  compare->add_option("--threshold", threshold, "flagging ratio threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  if (validate->parsed()) return cmd_validate(workload_path);
  if (synth->parsed()) return cmd_synth(spec_path, synth_out);
  if (run->parsed()) return cmd_run(config_path, rank, coordinator, argv[0]);
  if (compare->parsed()) return cmd_compare(measured_path, predicted_path, compare_out, threshold);
  return kExitUsage;
}
