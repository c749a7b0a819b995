#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "far/cli.hpp"
#include "far/config.hpp"
#include "far/verify.hpp"

namespace py = pybind11;

namespace {

std::string summary_json(const std::string& config_path, const std::vector<std::string>& overrides) {
  const far::RunConfig config = far::load_run_config(config_path, overrides);
  const far::Dataset data = far::load_dataset(config);
  far::RunResult result;
  {
    py::gil_scoped_release release;
    result = far::run_experiment(config.model, data, config.train);
  }
  return far::to_json(result).dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Freeze-and-reconfigure fine-tuning core";

  auto base = py::register_exception<far::Error>(m, "FarError");
  py::register_exception<far::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<far::InputError>(m, "InputError", base.ptr());
  py::register_exception<far::FormatError>(m, "FormatError", base.ptr());
  py::register_exception<far::NumericError>(m, "NumericError", base.ptr());
  py::register_exception<far::StateError>(m, "StateError", base.ptr());
  py::register_exception<far::GenerationError>(m, "GenerationError", base.ptr());

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = far::run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns (exit code, stdout, stderr).");

  m.def("train_summary", &summary_json, py::arg("config_path"), py::arg("overrides") = std::vector<std::string>{},
        "Trains every seed of a config file and returns the run summary as JSON text.");

  m.def(
      "verify",
      [](const std::string& fault) {
        far::VerifyOptions options;
        options.fault = far::parse_fault(fault);
        far::VerifyReport report;
        {
          py::gil_scoped_release release;
          report = far::run_verification(options);
        }
        py::list out;
        for (const auto& c : report.checks) out.append(py::make_tuple(c.name, c.passed, c.detail));
        return out;
      },
      py::arg("fault") = "none", "Runs the invariant suite; returns (name, passed, detail) tuples.");

  m.def("select_count", &far::select_count, py::arg("retention_percent"), py::arg("nodes"));

  m.def(
      "parameter_counts",
      [](const std::string& model_json) {
        const far::ModelConfig c = model_json.empty() ? far::ModelConfig::paper_scale()
                                                      : far::model_config_from_json(far::Json::parse(model_json));
        const far::ParameterCounts p = far::count_parameters(c);
        py::dict d;
        d["total"] = p.total;
        d["embedding"] = p.embedding;
        d["attention"] = p.attention;
        d["layer_norm"] = p.layer_norm;
        d["ffn_weights"] = p.ffn_weights;
        d["ffn_biases"] = p.ffn_biases;
        d["classifier"] = p.classifier;
        return d;
      },
      py::arg("model_json") = "", "Closed-form parameter counts; an empty string selects the paper-scale model.");

  m.def(
      "frozen_share",
      [](const std::string& model_json, double retention_percent) {
        const far::ModelConfig c = model_json.empty() ? far::ModelConfig::paper_scale()
                                                      : far::model_config_from_json(far::Json::parse(model_json));
        const auto inv = far::planned_inventory(c, far::SelectionMode::metric, retention_percent);
        const auto counts = far::count_parameters(c);
        return double(far::total_parameters(inv) - far::trainable_parameters(inv)) / double(counts.non_embedding());
      },
      py::arg("model_json"), py::arg("retention_percent"),
      "Frozen share of non-embedding parameters after selection at the given retention.");
}
