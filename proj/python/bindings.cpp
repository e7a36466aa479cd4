#include "umf/config.hpp"
#include "umf/errors.hpp"
#include "umf/evaluation.hpp"
#include "umf/flow_paths.hpp"
#include "umf/resampling.hpp"
#include "umf/sampling.hpp"
#include "umf/schedule.hpp"
#include "umf/toy_data.hpp"
#include "umf/verify.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace umf;

namespace {

py::dict report_dict(const EvalReport& r) {
  py::dict metrics;
  for (const auto& m : r.metrics) {
    py::dict d;
    d["value"] = m.value;
    d["n"] = m.n;
    d["checked"] = m.checked();
    d["pass"] = m.pass();
    metrics[py::str(m.name)] = d;
  }
  py::dict out;
  out["name"] = r.name;
  out["passed"] = r.passed();
  out["metrics"] = metrics;
  out["text"] = r.text();
  return out;
}

py::list scenes_list(const std::vector<Scene>& scenes) {
  py::list out;
  for (const auto& s : scenes) out.append(py::make_tuple(s.agents, s.label));
  return out;
}

}  // namespace

PYBIND11_MODULE(_umf, m) {
  m.doc() = "Unified motion flow core";
  m.attr("__version__") = UMF_VERSION;

  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<MissingArtifact>(m, "MissingArtifact", PyExc_FileNotFoundError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  py::class_<StageWindow>(m, "StageWindow")
      .def_readonly("start", &StageWindow::start)
      .def_readonly("end", &StageWindow::end)
      .def("__repr__", [](const StageWindow& w) {
        return "StageWindow(" + std::to_string(w.start) + ", " + std::to_string(w.end) + ")";
      });

  py::class_<JumpCoefficients>(m, "JumpCoefficients")
      .def_readonly("scale", &JumpCoefficients::scale)
      .def_readonly("alpha", &JumpCoefficients::alpha);

  py::class_<PyramidSchedule>(m, "PyramidSchedule")
      .def_static("build", &PyramidSchedule::build, py::arg("stages"), py::arg("base_length"),
                  py::arg("steps"), py::arg("full_res_start"))
      .def_static("from_json", &PyramidSchedule::from_json)
      .def_property_readonly("stages", &PyramidSchedule::stages)
      .def_property_readonly("base_length", &PyramidSchedule::base_length)
      .def("window", &PyramidSchedule::window, py::arg("k"))
      .def("steps", &PyramidSchedule::steps, py::arg("k"))
      .def("length", &PyramidSchedule::length, py::arg("k"))
      .def("factor", &PyramidSchedule::factor, py::arg("k"))
      .def("total_steps", &PyramidSchedule::total_steps)
      .def("to_json", &PyramidSchedule::to_json);

  m.def("chained_end", &chained_end, py::arg("next_start"));
  m.def("jump_coefficients", &jump_coefficients, py::arg("s_next"));

  m.def("downsample", &downsample, py::arg("seq"), py::arg("factor"));
  m.def("upsample", &upsample, py::arg("seq"), py::arg("factor"));
  m.def("block_covariance", &block_covariance, py::arg("block_size"));
  m.def(
      "sample_correlated_noise",
      [](int length, int dim, int block, std::uint64_t seed) {
        Rng rng(seed);
        return sample_correlated_noise(length, dim, block, rng);
      },
      py::arg("length"), py::arg("dim"), py::arg("block_size"), py::arg("seed"));
  m.def(
      "jump_update",
      [](const Mat& end, double s_next, double e_k, std::uint64_t seed) {
        Rng rng(seed);
        return jump_update(end, s_next, e_k, rng);
      },
      py::arg("end"), py::arg("s_next"), py::arg("e_k"), py::arg("seed"));

  m.def(
      "euler_solve",
      [](const std::function<Mat(const Mat&, double)>& field, const Mat& x, double t0, double t1,
         int steps) { return euler_solve(field, x, t0, t1, steps); },
      py::arg("field"), py::arg("x"), py::arg("t_start"), py::arg("t_end"), py::arg("steps"));

  py::class_<ToyDataConfig>(m, "ToyDataConfig")
      .def(py::init<>())
      .def_readwrite("frames", &ToyDataConfig::frames)
      .def_readwrite("joints", &ToyDataConfig::joints)
      .def_readwrite("delay", &ToyDataConfig::delay)
      .def_readwrite("offset_x", &ToyDataConfig::offset_x)
      .def_readwrite("offset_y", &ToyDataConfig::offset_y)
      .def_readwrite("noise", &ToyDataConfig::noise);

  m.def(
      "synthesize_dataset",
      [](int n_scenes, int n_agents, std::uint64_t seed, const ToyDataConfig& cfg) {
        return scenes_list(synthesize_dataset(n_scenes, n_agents, seed, cfg));
      },
      py::arg("n_scenes"), py::arg("n_agents"), py::arg("seed"),
      py::arg("config") = ToyDataConfig{},
      "List of (agents, label); each agent is a frames x (2 * joints) array.");
  m.def("reaction_oracle", &reaction_oracle, py::arg("agent"), py::arg("config") = ToyDataConfig{});
  m.def("bone_lengths", &bone_lengths, py::arg("motion"));

  m.def(
      "mmd",
      [](const Mat& a, const Mat& b, double bandwidth) {
        const auto r = mmd(a, b, bandwidth);
        return py::dict(py::arg("unbiased") = r.unbiased, py::arg("biased") = r.biased,
                        py::arg("bandwidth") = r.bandwidth);
      },
      py::arg("a"), py::arg("b"), py::arg("bandwidth") = 0.0);
  m.def("sign_test_p", &sign_test_p, py::arg("successes"), py::arg("trials"));

  m.def(
      "default_config", [] { return RunConfig{}.to_json(); },
      "The full default run config as JSON text.");
  m.def(
      "load_config",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides) {
        return load_run_config(path, overrides).to_json();
      },
      py::arg("path") = std::filesystem::path(), py::arg("overrides") = std::vector<std::string>{},
      "Validated, materialized config as JSON text.");

  m.def(
      "verify",
      [](std::uint64_t seed, int jump_draws) {
        py::list out;
        for (const auto& r : run_verification(Tolerances{}, seed, jump_draws, {8, 16, 32, 64, 128}, 1))
          out.append(report_dict(r));
        return out;
      },
      py::arg("seed") = 11, py::arg("jump_draws") = 200000);

  py::class_<Pipeline>(m, "Pipeline")
      .def_static(
          "load",
          [](const std::filesystem::path& vae, const std::filesystem::path& pflow,
             const std::filesystem::path& sflow, int reaction_steps, double start_noise) {
            auto p = load_pipeline(vae, pflow, sflow);
            p.reaction_steps = reaction_steps;
            p.start_noise = start_noise;
            return p;
          },
          py::arg("vae"), py::arg("pflow"), py::arg("sflow"), py::arg("reaction_steps") = 10,
          py::arg("start_noise") = 0.0)
      .def(
          "generate",
          [](const Pipeline& p, int n_agents, int label, std::uint64_t seed, std::uint64_t index) {
            Rng rng = scene_rng(seed, index);
            py::gil_scoped_release release;
            auto g = generate_scene(p, n_agents, Condition{label}, rng);
            py::gil_scoped_acquire acquire;
            py::dict audit;
            audit["pflow_calls"] = g.audit.pflow_calls;
            audit["sflow_calls"] = g.audit.sflow_calls;
            audit["context_sizes"] = g.audit.context_sizes;
            return py::make_tuple(g.motions, g.latents, audit);
          },
          py::arg("n_agents"), py::arg("label"), py::arg("seed"), py::arg("index") = 0,
          "(motions, flow-space latents, audit) for one scene.");

  m.def(
      "load_samples",
      [](const std::filesystem::path& path) {
        auto [scenes, meta] = load_samples(path);
        return py::make_tuple(scenes_list(scenes), meta.to_json());
      },
      py::arg("path"));
}
