#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "kirl/harness.hpp"

namespace py = pybind11;
using namespace kirl;

namespace {

py::dict metrics_dict(const IterationMetrics& m) {
  py::dict d;
  d["iteration"] = m.iteration;
  d["env_steps"] = m.env_steps;
  d["episodes"] = m.episodes;
  d["collisions"] = m.collisions;
  d["episode_return"] = m.episode_return;
  d["avg_speed"] = m.avg_speed;
  d["speed_std"] = m.speed_std;
  d["eps_m"] = m.eps_m;
  d["k_star"] = m.k_star;
  d["eps_pi"] = m.eps_pi;
  d["r_max"] = m.r_max;
  d["c_bound"] = m.c_bound;
  d["eta"] = m.eta;
  d["eta_hat"] = m.eta_hat;
  d["kl"] = m.kl;
  d["accepted"] = m.accepted;
  d["virtual_count"] = m.virtual_count;
  d["model_loss"] = m.model_loss;
  d["value_loss"] = m.value_loss;
  return d;
}

py::dict eval_dict(const EvalSummary& s) {
  py::dict d;
  d["episodes"] = s.episodes;
  d["mean_return"] = s.mean_return;
  d["avg_speed"] = s.avg_speed;
  d["speed_std"] = s.speed_std;
  d["collisions"] = s.collisions;
  return d;
}

ExperimentConfig config_from(const std::string& json) {
  return parse_experiment_config(json.empty() ? "{}" : json);
}

Baseline baseline_from(const std::string& name) {
  if (name == "idm") return Baseline::AllIdm;
  if (name == "pi") return Baseline::PiOnly;
  throw ConfigError("unknown baseline '" + name + "' (expected idm or pi)");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Residual RL for CAV longitudinal control";
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<IdmParams>(m, "IdmParams")
      .def(py::init<>())
      .def_readwrite("v0", &IdmParams::v0)
      .def_readwrite("T0", &IdmParams::T0)
      .def_readwrite("a_max", &IdmParams::a_max)
      .def_readwrite("b", &IdmParams::b)
      .def_readwrite("delta", &IdmParams::delta_exp)
      .def_readwrite("s0", &IdmParams::s0)
      .def_readwrite("noise_std", &IdmParams::noise_std);

  py::class_<PiParams>(m, "PiParams")
      .def(py::init<>())
      .def_readwrite("v_catch", &PiParams::v_catch)
      .def_readwrite("s_lower", &PiParams::s_lower)
      .def_readwrite("s_upper", &PiParams::s_upper)
      .def_readwrite("dx_safe", &PiParams::dx_safe)
      .def_readwrite("window", &PiParams::window);

  m.def("idm_accel", &idm_accel, py::arg("v"), py::arg("v_lead"), py::arg("gap"),
        py::arg("params") = IdmParams{});
  m.def("idm_desired_gap", &idm_desired_gap, py::arg("v"), py::arg("v_lead"),
        py::arg("params") = IdmParams{});
  m.def("pi_target_velocity", &pi_target_velocity, py::arg("v_bar"), py::arg("gap"),
        py::arg("params") = PiParams{});
  m.def(
      "pi_weights",
      [](double gap, const PiParams& p) {
        const PiWeights w = pi_weights(gap, p);
        return py::make_tuple(w.alpha, w.beta);
      },
      py::arg("gap"), py::arg("params") = PiParams{}, "Returns (alpha, beta).");
  m.def("command_to_accel", &command_to_accel, py::arg("v_cmd"), py::arg("v"),
        py::arg("dt") = 0.1, py::arg("a_min") = -1.0, py::arg("a_max") = 1.0);
  m.def(
      "rollout_length",
      [](double eps_m, int k_max, double kappa) {
        RolloutConfig c;
        c.k_max = k_max;
        c.kappa = kappa;
        return rollout_length(eps_m, c);
      },
      py::arg("eps_m"), py::arg("k_max") = 500, py::arg("kappa") = 2.0);
  m.def(
      "c_bound",
      [](double r_max, double gamma, double eps_pi, double eps_m, int k) {
        return c_bound({r_max, gamma, eps_pi, eps_m, k});
      },
      py::arg("r_max"), py::arg("gamma"), py::arg("eps_pi"), py::arg("eps_m"), py::arg("k"));

  m.def(
      "normalize_config", [](const std::string& json) { return experiment_config_to_json(config_from(json)); },
      py::arg("json") = "", "Parses a config (JSON text) and returns it with every default filled in.");

  m.def(
      "run_experiment",
      [](const std::string& json) {
        const RunResult r = [&] {
          py::gil_scoped_release release;
          return run_experiment(config_from(json));
        }();
        py::dict d;
        d["seed_metrics"] = r.seed_metrics;
        d["aggregate"] = r.aggregate;
        d["final_checkpoints"] = r.final_checkpoints;
        return d;
      },
      py::arg("json"), "Trains every configured seed and writes the CSV outputs.");

  m.def(
      "evaluate_baseline",
      [](const std::string& baseline, int episodes, std::uint64_t seed, const std::string& json) {
        const ExperimentConfig c = config_from(json);
        return eval_dict(evaluate_baseline(c.train.env, baseline_from(baseline), c.train.pi,
                                           episodes, seed));
      },
      py::arg("baseline"), py::arg("episodes") = 5, py::arg("seed") = 12345,
      py::arg("json") = "");

  m.def(
      "evaluate_checkpoint",
      [](const std::filesystem::path& bundle, const std::string& variant, int episodes,
         std::uint64_t seed, const std::string& json) {
        const ExperimentConfig c = config_from(json);
        return eval_dict(evaluate_checkpoint(c.train.env, bundle,
                                             agent_variant_from_string(variant), c.train.pi,
                                             episodes, seed));
      },
      py::arg("bundle"), py::arg("variant") = "proposed", py::arg("episodes") = 5,
      py::arg("seed") = 12345, py::arg("json") = "");

  m.def(
      "generate_cf_dataset",
      [](int samples, double noise, std::uint64_t seed) {
        CfDatasetConfig c;
        c.target_samples = samples;
        c.idm.noise_std = noise;
        Rng rng(seed);
        std::ostringstream out;
        write_cf_dataset_csv(out, generate_cf_dataset(c, rng));
        return out.str();
      },
      py::arg("samples") = 50000, py::arg("noise") = 0.2, py::arg("seed") = 0,
      "Generates the car-following corpus and returns it as CSV text.");

  py::class_<Trainer>(m, "Trainer")
      .def(py::init([](const std::string& json, std::optional<std::string> variant,
                       std::optional<std::uint64_t> seed) {
             TrainConfig c = config_from(json).train;
             if (variant) c.variant = agent_variant_from_string(*variant);
             if (seed) c.seed = *seed;
             return std::make_unique<Trainer>(c);
           }),
           py::arg("json") = "", py::arg("variant") = py::none(), py::arg("seed") = py::none())
      .def(
          "iterate",
          [](Trainer& t) {
            IterationMetrics m;
            {
              py::gil_scoped_release release;
              m = t.iterate();
            }
            return metrics_dict(m);
          },
          "Runs one training iteration and returns its metrics.")
      .def_property_readonly("iteration", &Trainer::iteration)
      .def_property_readonly("variant",
                             [](const Trainer& t) { return std::string(to_string(t.config().variant)); })
      .def("save_checkpoint", &Trainer::save_checkpoint, py::arg("dir"))
      .def("load_checkpoint", &Trainer::load_checkpoint, py::arg("bundle"));
}
