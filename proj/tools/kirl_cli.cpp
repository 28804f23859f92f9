// kirl: train, evaluate and export runs of the residual CAV controller.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "kirl/harness.hpp"

namespace fs = std::filesystem;
using namespace kirl;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string out;
  std::optional<int> iterations;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override the seed list with a single seed");
  cmd->add_option("--variant", c.variant,
                  "proposed | vanilla-trpo | mb-trpo | no-initial-policy");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--iterations", c.iterations, "training iterations");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{}
                                               : load_experiment_config(c.config_path);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.variant.empty()) cfg.train.variant = agent_variant_from_string(c.variant);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.iterations) cfg.train.iterations = *c.iterations;
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  return f;
}

void print_summary(const std::string& label, const EvalSummary& s) {
  std::printf("%-24s return %10.3f  avg_speed %7.3f  speed_std %7.3f  collisions %d/%d\n",
              label.c_str(), s.mean_return, s.avg_speed, s.speed_std, s.collisions, s.episodes);
}

Baseline baseline_from_string(const std::string& s) {
  if (s == "idm") return Baseline::AllIdm;
  if (s == "pi") return Baseline::PiOnly;
  throw ConfigError("unknown baseline '" + s + "' (expected idm or pi)");
}

std::vector<double> parse_fractions(const std::string& list) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    out.push_back(std::stod(list.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging_from_env();
  CLI::App app{"kirl: knowledge-informed residual RL for CAV longitudinal control"};
  app.require_subcommand(1);

  Common train_opts;
  auto* train = app.add_subcommand("train", "train one variant over the configured seeds");
  add_common(train, train_opts);

  Common eval_opts;
  std::string checkpoint, eval_baseline;
  int episodes = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint bundle or a baseline");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint, "checkpoint bundle directory (iter_NNNN)");
  eval->add_option("--baseline", eval_baseline, "idm | pi");
  eval->add_option("--episodes", episodes, "episodes (default: eval_episodes from config)");

  Common sim_opts;
  std::string sim_baseline = "idm";
  int sim_episodes = 1;
  auto* simulate = app.add_subcommand("simulate", "roll a baseline controller and print stats");
  add_common(simulate, sim_opts);
  simulate->add_option("--baseline", sim_baseline, "idm | pi");
  simulate->add_option("--episodes", sim_episodes, "episodes");

  Common ds_opts;
  int samples = 50000;
  double noise = 0.2;
  auto* dataset = app.add_subcommand("dataset", "generate the car-following corpus");
  add_common(dataset, ds_opts);
  dataset->add_option("--samples", samples, "target sample count");
  dataset->add_option("--noise", noise, "follower IDM noise std");

  Common cmp_opts;
  int cmp_samples = 50000, repeats = 5, epochs = 15;
  double cmp_noise = 0.2;
  std::string fractions = "0.1,0.25,0.5,0.75,1.0";
  auto* compare = app.add_subcommand("compare-model", "Knowledge NN vs Vanilla NN sweep");
  add_common(compare, cmp_opts);
  compare->add_option("--samples", cmp_samples, "target sample count");
  compare->add_option("--noise", cmp_noise, "follower IDM noise std");
  compare->add_option("--repeats", repeats, "repeats per fraction");
  compare->add_option("--epochs", epochs, "training epochs per model");
  compare->add_option("--fractions", fractions, "comma-separated training fractions");

  Common exp_opts;
  std::string exp_checkpoint, exp_baseline = "idm";
  std::uint64_t episode_seed = 0;
  auto* exporter = app.add_subcommand("export", "write space-time trajectories for one episode");
  add_common(exporter, exp_opts);
  exporter->add_option("--checkpoint", exp_checkpoint, "checkpoint bundle (default: baseline)");
  exporter->add_option("--baseline", exp_baseline, "idm | pi when no checkpoint is given");
  exporter->add_option("--episode-seed", episode_seed, "episode seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Usage errors count as configuration errors; help and version exit 0.
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      const ExperimentConfig cfg = resolve(train_opts);
      const RunResult r = run_experiment(cfg);
      for (const auto& f : r.seed_metrics) std::printf("metrics    %s\n", f.c_str());
      std::printf("aggregate  %s\n", r.aggregate.c_str());
      for (const auto& c : r.final_checkpoints) std::printf("checkpoint %s\n", c.c_str());
    } else if (*eval) {
      const ExperimentConfig cfg = resolve(eval_opts);
      const int n = episodes > 0 ? episodes : cfg.eval_episodes;
      if (checkpoint.empty() == eval_baseline.empty())
        throw ConfigError("eval needs exactly one of --checkpoint or --baseline");
      const EvalSummary s =
          checkpoint.empty()
              ? evaluate_baseline(cfg.train.env, baseline_from_string(eval_baseline), cfg.train.pi,
                                  n, cfg.eval_seed)
              : evaluate_checkpoint(cfg.train.env, checkpoint, cfg.train.variant, cfg.train.pi, n,
                                    cfg.eval_seed);
      print_summary(checkpoint.empty() ? "baseline " + eval_baseline
                                       : std::string(to_string(cfg.train.variant)),
                    s);
      auto f = open_out(cfg.output_dir / "eval.csv");
      write_eval_csv(f, s);
    } else if (*simulate) {
      const ExperimentConfig cfg = resolve(sim_opts);
      const EvalSummary s = evaluate_baseline(cfg.train.env, baseline_from_string(sim_baseline),
                                              cfg.train.pi, sim_episodes, cfg.seeds.front());
      for (std::size_t i = 0; i < s.per_episode.size(); ++i) {
        const auto& e = s.per_episode[i];
        std::printf("episode %zu  return %10.3f  avg_speed %7.3f  speed_std %7.3f  steps %ld%s\n",
                    i, e.episode_return, e.avg_speed, e.speed_std, e.steps,
                    e.collision ? "  collision" : "");
      }
      print_summary("baseline " + sim_baseline, s);
    } else if (*dataset) {
      const ExperimentConfig cfg = resolve(ds_opts);
      CfDatasetConfig dc;
      dc.target_samples = samples;
      dc.idm = cfg.train.env.idm;
      dc.idm.noise_std = noise;
      Rng rng(cfg.seeds.front());
      const CfDataset d = generate_cf_dataset(dc, rng);
      auto f = open_out(cfg.output_dir / "cf_dataset.csv");
      write_cf_dataset_csv(f, d);
      std::printf("train %zu  val %zu  test %zu\n", d.train.size(), d.val.size(), d.test.size());
    } else if (*compare) {
      const ExperimentConfig cfg = resolve(cmp_opts);
      CfDatasetConfig dc;
      dc.target_samples = cmp_samples;
      dc.idm = cfg.train.env.idm;
      dc.idm.noise_std = cmp_noise;
      Rng rng(cfg.seeds.front());
      const CfDataset d = generate_cf_dataset(dc, rng);
      CfTrainConfig tc;
      tc.epochs = epochs;
      const CompareResult r = compare_dynamics_models(d, parse_fractions(fractions), repeats,
                                                      cfg.train.env.idm, tc, cfg.seeds.front());
      {
        auto f = open_out(cfg.output_dir / "model_compare.csv");
        write_compare_csv(f, r);
      }
      {
        auto f = open_out(cfg.output_dir / "model_compare_summary.csv");
        write_compare_summary_csv(f, r);
      }
      {
        auto f = open_out(cfg.output_dir / "model_loss.csv");
        write_loss_csv(f, r);
      }
      write_compare_summary_csv(std::cout, r);
    } else if (*exporter) {
      const ExperimentConfig cfg = resolve(exp_opts);
      EnvConfig env = cfg.train.env;
      std::optional<GaussianPolicy> policy;
      PolicyPair pair;
      pair.pi = cfg.train.pi;
      pair.dt = env.scenario.dt;
      pair.action_bound = env.action_bound;
      if (!exp_checkpoint.empty()) {
        policy = load_bundle_policy(exp_checkpoint);
        pair.residual = &*policy;
        pair.use_physics = traits_of(cfg.train.variant).physics_policy;
      } else if (baseline_from_string(exp_baseline) == Baseline::AllIdm) {
        env.cav_control = CavControl::Idm;
        pair.use_physics = false;
      }
      auto f = open_out(cfg.output_dir / "trajectories.csv");
      const std::size_t rows = export_trajectories(f, env, pair, episode_seed);
      std::printf("%zu rows -> %s\n", rows, (cfg.output_dir / "trajectories.csv").c_str());
    }
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
