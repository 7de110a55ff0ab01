#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

std::string bin() {
  const char* b = std::getenv("LOOMNET_BIN");
  REQUIRE_MESSAGE(b != nullptr, "LOOMNET_BIN must point at the CLI binary");
  return b;
}

int run_cmd(const std::string& args) {
  std::string cmd = bin() + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("loomnet_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSynthSpec =
    R"({"kind":"data_parallel","num_ranks":4,"layers":2,"fwd_us":50,"bwd_us":100,
        "grad_bytes":1048576,"iterations":2})";

}  // namespace

TEST_CASE("validate: good file exits 0, bad graph and missing file do not") {
  auto d = fresh_dir("validate");
  write(d / "spec.json", kSynthSpec);
  REQUIRE(run_cmd("synth " + (d / "spec.json").string() + " -o " + (d / "w.json").string()) ==
          0);
  CHECK(run_cmd("validate " + (d / "w.json").string()) == 0);
  CHECK(run_cmd("validate " + (d / "nonexistent.json").string()) == 1);
  // A cycle: node 0 depends on 1 and vice versa.
  write(d / "cycle.json", R"({"version":1,"num_ranks":1,"groups":[],
    "nodes":{"0":[{"id":0,"rank":0,"kind":"COMPUTE","duration_us":1,"deps":[1]},
                  {"id":1,"rank":0,"kind":"COMPUTE","duration_us":1,"deps":[0]}]}})");
  CHECK(run_cmd("validate " + (d / "cycle.json").string()) == 1);
}

TEST_CASE("synth: pipeline with one rank is a usage error") {
  auto d = fresh_dir("synth");
  write(d / "bad.json", R"({"kind":"pipeline","num_ranks":1,"microbatches":1,
                            "compute_us":10,"activation_bytes":64})");
  CHECK(run_cmd("synth " + (d / "bad.json").string() + " -o " + (d / "w.json").string()) == 1);
  write(d / "typo.json", R"({"kind":"data_parallel","num_ranks":2,"layers":1,"fwd_us":1,
                             "bwd_us":1,"grad_bytes":64,"iterations":1,"extra_field":1})");
  CHECK(run_cmd("synth " + (d / "typo.json").string() + " -o " + (d / "w.json").string()) == 1);
}

TEST_CASE("run: virtual run writes the three outputs and exits 0") {
  auto d = fresh_dir("run");
  write(d / "config.json", std::string(R"({"workload":)") + kSynthSpec +
                               R"(,"mode":"VIRTUAL","transport":"SIM","seed":7,
                                  "output_dir":"out"})");
  CHECK(run_cmd("run -c " + (d / "config.json").string()) == 0);
  CHECK(fs::exists(d / "out" / "report.json"));
  CHECK(fs::exists(d / "out" / "trace.json"));
  CHECK(fs::exists(d / "out" / "iterations.csv"));
}

TEST_CASE("run: unknown config field is a config error (exit 1)") {
  auto d = fresh_dir("badcfg");
  write(d / "config.json", std::string(R"({"workload":)") + kSynthSpec +
                               R"(,"mode":"VIRTUAL","transport":"SIM","sead":7})");
  CHECK(run_cmd("run -c " + (d / "config.json").string()) == 1);
  // VIRTUAL over SOCKET violates the mode invariant.
  write(d / "config2.json", std::string(R"({"workload":)") + kSynthSpec +
                                R"(,"mode":"VIRTUAL","transport":"SOCKET"})");
  CHECK(run_cmd("run -c " + (d / "config2.json").string()) == 1);
  // REAL without a host per rank.
  write(d / "config3.json", std::string(R"({"workload":)") + kSynthSpec +
                                R"(,"mode":"REAL","transport":"SOCKET",
                                   "hosts":["127.0.0.1"]})");
  CHECK(run_cmd("run -c " + (d / "config3.json").string()) == 1);
}

TEST_CASE("run: identical seeds give byte-identical reports") {
  auto d = fresh_dir("seed");
  write(d / "config.json", std::string(R"({"workload":)") + kSynthSpec +
                               R"(,"mode":"VIRTUAL","transport":"SIM","seed":99,
                                  "output_dir":"out"})");
  REQUIRE(run_cmd("run -c " + (d / "config.json").string()) == 0);
  auto a = slurp(d / "out" / "report.json");
  CHECK(!a.empty());
  REQUIRE(run_cmd("run -c " + (d / "config.json").string()) == 0);
  CHECK(a == slurp(d / "out" / "report.json"));
}

TEST_CASE("compare: clean vs doctored vs mismatched") {
  auto d = fresh_dir("compare");
  write(d / "config.json", std::string(R"({"workload":)") + kSynthSpec +
                               R"(,"mode":"VIRTUAL","transport":"SIM","seed":1,
                                  "output_dir":"out"})");
  REQUIRE(run_cmd("run -c " + (d / "config.json").string()) == 0);
  auto report = slurp(d / "out" / "report.json");

  // Identical reports: exit 0.
  CHECK(run_cmd("compare " + (d / "out" / "report.json").string() + " " +
                (d / "out" / "report.json").string() + " -o " +
                (d / "div.json").string()) == 0);
  CHECK(fs::exists(d / "div.json"));

  // Doctor one collective duration 2x: exit 2.
  auto pos = report.find("\"duration_us\":");
  REQUIRE(pos != std::string::npos);
  auto end = report.find_first_of(",\n", pos + 15);
  double v = std::stod(report.substr(pos + 15, end - pos - 15));
  std::string doctored = report.substr(0, pos + 15) + " " + std::to_string(v * 2.0) +
                         report.substr(end);
  write(d / "doctored.json", doctored);
  CHECK(run_cmd("compare " + (d / "doctored.json").string() + " " +
                (d / "out" / "report.json").string() + " -o " +
                (d / "div2.json").string()) == 2);

  // Different workload: exit 1.
  write(d / "config2.json",
        R"({"workload":{"kind":"data_parallel","num_ranks":2,"layers":1,"fwd_us":5,
            "bwd_us":5,"grad_bytes":1024,"iterations":1},
            "mode":"VIRTUAL","transport":"SIM","output_dir":"out2"})");
  REQUIRE(run_cmd("run -c " + (d / "config2.json").string()) == 0);
  CHECK(run_cmd("compare " + (d / "out" / "report.json").string() + " " +
                (d / "out2" / "report.json").string() + " -o " +
                (d / "div3.json").string()) == 1);
}

TEST_CASE("usage errors exit 1") {
  CHECK(run_cmd("") == 1);
  CHECK(run_cmd("frobnicate") == 1);
  CHECK(run_cmd("run") == 1);
}
