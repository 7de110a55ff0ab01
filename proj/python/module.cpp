#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "loomnet/config.hpp"
#include "loomnet/metrics.hpp"
#include "loomnet/runner.hpp"
#include "loomnet/workload.hpp"

namespace py = pybind11;
using namespace loomnet;

PYBIND11_MODULE(_loomnet, m) {
  m.doc() = "workload-graph replay and network emulation toolkit";

  py::register_exception<WorkloadError>(m, "WorkloadError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<MetricsError>(m, "MetricsError", PyExc_ValueError);

  // Returns every invariant violation; parse failures come back as a
  // single-element list so callers get one uniform shape.
  m.def(
      "validate_workload",
      [](const std::string& text) -> std::vector<std::string> {
        try {
          return validate(parse_workload(text));
        } catch (const WorkloadError& e) {
          return {e.what()};
        }
      },
      py::arg("text"));

  m.def(
      "synth_workload",
      [](const std::string& spec_json) {
        return serialize_workload(synth_from_spec(nlohmann::json::parse(spec_json)));
      },
      py::arg("spec_json"));

  // Canonical serialization round-trip (parses, validates, re-serializes).
  m.def(
      "normalize_workload",
      [](const std::string& text) { return serialize_workload(parse_workload(text)); },
      py::arg("text"));

  m.def(
      "compute_bandwidth",
      [](const std::string& coll_type, int nranks, uint64_t size_bytes, double duration_us) {
        auto b = compute_bandwidth(coll_type_from_string(coll_type), nranks, size_bytes,
                                   duration_us);
        return py::make_tuple(b.algbw_GBps, b.busbw_GBps);
      },
      py::arg("coll_type"), py::arg("nranks"), py::arg("size_bytes"), py::arg("duration_us"));

  // Runs a VIRTUAL config and returns the report JSON; report/trace/csv files
  // are also written into the configured output_dir.
  m.def(
      "run_virtual",
      [](const std::string& config_json, const std::string& base_dir) {
        auto cfg = parse_run_config(config_json, base_dir);
        if (cfg.mode != RunMode::Virtual)
          throw ConfigError("run_virtual only executes VIRTUAL configs");
        py::gil_scoped_release release;
        auto out = run_virtual(cfg);
        return export_report_json(out.report);
      },
      py::arg("config_json"), py::arg("base_dir") = ".");

  m.def(
      "compare_reports",
      [](const std::string& measured_json, const std::string& predicted_json,
         double threshold) {
        auto d = compare_runs(parse_report(measured_json), parse_report(predicted_json),
                              threshold);
        return export_divergence_json(d);
      },
      py::arg("measured_json"), py::arg("predicted_json"), py::arg("threshold") = 1.25);
}
