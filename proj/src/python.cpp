#include "fmash/cli.hpp"
#include "fmash/config.hpp"
#include "fmash/errors.hpp"
#include "fmash/evalkit.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace fmash;

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the fmash C++ core";

  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "run",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "fmash");
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::execute_command(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a CLI subcommand; returns (exit_code, stdout, stderr).");

  m.def(
      "topk_metrics",
      [](const std::vector<int>& ranked, const std::vector<int>& truth, int k) {
        auto t = eval::topk_metrics(ranked, truth, k);
        return py::make_tuple(t.precision, t.recall, t.f1);
      },
      py::arg("ranked"), py::arg("truth"), py::arg("k"));

  m.def(
      "bmp_at_k",
      [](const std::vector<int>& prediction, const std::vector<std::vector<int>>& truths, int k) {
        return eval::bmp_at_k(prediction, truths, k);
      },
      py::arg("prediction"), py::arg("truths"), py::arg("k"));

  m.def("default_config", [] { return serialize_config(RunConfig{}); });
  m.def("validate_config", [](const std::string& text) { return serialize_config(parse_config_text(text)); },
        py::arg("text"), "Parse and validate a config; returns it with defaults filled in.");
  m.def("report_json", [](const std::string& path) { return eval::report_to_string(eval::load_report(path)); },
        py::arg("path"));
}
