#include "kirl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace kirl {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

// Every config section is described once by a visitor so that loading and
// dumping stay in sync.
template <class F>
void visit(ScenarioConfig& s, F&& f) {
  f("ring_length", s.ring_length);
  f("loop_radius", s.loop_radius);
  f("highway_length", s.highway_length);
  f("ramp_length", s.ramp_length);
  f("merge_position", s.merge_position);
  f("n_vehicles", s.n_vehicles);
  f("cav_penetration", s.cav_penetration);
  f("highway_inflow", s.highway_inflow);
  f("ramp_inflow", s.ramp_inflow);
  f("dt", s.dt);
  f("horizon", s.horizon);
  f("warmup", s.warmup);
  f("vehicle_length", s.vehicle_length);
  f("min_insertion_gap", s.min_insertion_gap);
  f("insertion_speed", s.insertion_speed);
  f("initial_jitter", s.initial_jitter);
  f("conflict_zone_length", s.conflict_zone_length);
  f("approach_window", s.approach_window);
  f("yield_visibility", s.yield_visibility);
  f("merge_zone", s.merge_zone);
  f("merge_clearance", s.merge_clearance);
  f("max_cav_slots", s.max_cav_slots);
}

template <class F>
void visit(IdmParams& p, F&& f) {
  f("v0", p.v0);
  f("T0", p.T0);
  f("a_max", p.a_max);
  f("b", p.b);
  f("delta_exp", p.delta_exp);
  f("s0", p.s0);
  f("noise_std", p.noise_std);
  f("emergency_decel", p.emergency_decel);
}

template <class F>
void visit(RewardConfig& r, F&& f) {
  f("alpha_w", r.alpha_w);
  f("beta_w", r.beta_w);
  f("gamma_w", r.gamma_w);
  f("v_des", r.v_des);
  f("h_max", r.h_max);
  f("collision_penalty", r.collision_penalty);
  f("min_headway_speed", r.min_headway_speed);
}

template <class F>
void visit(PiParams& p, F&& f) {
  f("v_catch", p.v_catch);
  f("s_lower", p.s_lower);
  f("s_upper", p.s_upper);
  f("dx_safe", p.dx_safe);
  f("window", p.window);
}

template <class F>
void visit(TrpoConfig& t, F&& f) {
  f("discount", t.discount);
  f("gae_lambda", t.gae_lambda);
  f("max_kl", t.max_kl);
  f("cg_iterations", t.cg_iterations);
  f("cg_damping", t.cg_damping);
  f("cg_residual_tol", t.cg_residual_tol);
  f("backtrack_count", t.backtrack_count);
  f("backtrack_ratio", t.backtrack_ratio);
  f("value_l2", t.value_l2);
  f("value_passes", t.value_passes);
  f("value_lr", t.value_lr);
  f("value_minibatch", t.value_minibatch);
  f("fvp_max_samples", t.fvp_max_samples);
}

template <class F>
void visit(RolloutConfig& r, F&& f) {
  f("k_max", r.k_max);
  f("kappa", r.kappa);
  f("branch_starts", r.branch_starts);
}

template <class F>
void visit_agent(TrainConfig& t, F&& f) {
  f("steps_per_iteration", t.steps_per_iteration);
  f("actual_capacity", t.actual_capacity);
  f("virtual_capacity", t.virtual_capacity);
  f("virtual_ratio", t.virtual_ratio);
  f("model_steps", t.model_steps);
  f("model_lr", t.model_lr);
  f("model_batch", t.model_batch);
  f("validation_fraction", t.validation_fraction);
  f("min_validation", t.min_validation);
  f("policy_hidden", t.policy_hidden);
  f("init_log_std", t.init_log_std);
  f("updates_per_iteration", t.updates_per_iteration);
  f("action_bound", t.env.action_bound);
  f("stop_on_convergence", t.stop_on_convergence);
  f("convergence_window", t.convergence_window);
  f("convergence_threshold", t.convergence_threshold);
}

}  // namespace

void to_json(json& j, const Range& r) { j = json::array({r.lo, r.hi}); }
void from_json(const json& j, Range& r) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("ranges are written as [lo, hi]");
  r.lo = j[0].get<double>();
  r.hi = j[1].get<double>();
}

namespace {

struct Reader {
  const json& section;
  std::string name;
  std::vector<std::string> seen;

  template <class T>
  void operator()(const char* key, T& field) {
    seen.emplace_back(key);
    const auto it = section.find(key);
    if (it == section.end()) return;
    try {
      field = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name + "." + key + ": " + e.what());
    }
  }

  void reject_unknown(std::initializer_list<const char*> extra = {}) const {
    for (const auto& [key, value] : section.items()) {
      const bool known = std::find(seen.begin(), seen.end(), key) != seen.end() ||
                         std::any_of(extra.begin(), extra.end(),
                                     [&](const char* e) { return key == e; });
      if (!known) throw ConfigError("unknown key '" + name + "." + key + "'");
    }
  }
};

struct Writer {
  json& section;
  template <class T>
  void operator()(const char* key, T& field) {
    section[key] = field;
  }
};

template <class T>
void read_section(const json& root, const char* name, T& target,
                  std::initializer_list<const char*> extra = {}) {
  const auto it = root.find(name);
  if (it == root.end()) return;
  if (!it->is_object()) throw ConfigError(std::string(name) + " must be an object");
  Reader r{*it, name, {}};
  visit(target, r);
  r.reject_unknown(extra);
}

RewardVariant reward_variant_from_string(const std::string& s) {
  if (s == "verbatim") return RewardVariant::Verbatim;
  if (s == "closeness") return RewardVariant::Closeness;
  throw ConfigError("unknown reward variant '" + s + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  train.validate();
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint interval must be >= 1");
  if (eval_episodes < 1) throw ConfigError("eval episodes must be >= 1");
}

ExperimentConfig parse_experiment_config(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be an object");

  ExperimentConfig c;
  TrainConfig& t = c.train;
  if (const auto it = root.find("scenario"); it != root.end()) {
    if (const auto k = it->find("kind"); k != it->end()) {
      switch (scenario_kind_from_string(k->get<std::string>())) {
        case ScenarioKind::Ring: t.env.scenario = ScenarioConfig::ring(); break;
        case ScenarioKind::FigureEight: t.env.scenario = ScenarioConfig::figure_eight(); break;
        case ScenarioKind::Merge: t.env.scenario = ScenarioConfig::merge(); break;
      }
    }
  }
  read_section(root, "scenario", t.env.scenario, {"kind"});
  read_section(root, "idm", t.env.idm);
  read_section(root, "reward", t.env.reward, {"variant"});
  if (const auto it = root.find("reward"); it != root.end() && it->contains("variant"))
    t.env.reward.variant = reward_variant_from_string(it->at("variant").get<std::string>());
  read_section(root, "pi", t.pi);
  read_section(root, "trpo", t.trpo);
  read_section(root, "rollout", t.rollout);
  if (const auto it = root.find("agent"); it != root.end()) {
    Reader r{*it, "agent", {}};
    visit_agent(t, r);
    r.reject_unknown({"variant"});
    if (it->contains("variant"))
      t.variant = agent_variant_from_string(it->at("variant").get<std::string>());
  }

  Reader top{root, "config", {}};
  top("iterations", t.iterations);
  top("seeds", c.seeds);
  std::string out_dir = c.output_dir.string();
  top("output_dir", out_dir);
  c.output_dir = out_dir;
  top("checkpoint_interval", c.checkpoint_interval);
  top("eval_episodes", c.eval_episodes);
  top("eval_seed", c.eval_seed);
  top.reject_unknown({"scenario", "idm", "reward", "pi", "trpo", "rollout", "agent"});

  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string experiment_config_to_json(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  TrainConfig& t = c.train;
  json root;
  json scenario, idm, reward, pi, trpo, rollout, agent;
  visit(t.env.scenario, Writer{scenario});
  scenario["kind"] = std::string(to_string(t.env.scenario.kind));
  visit(t.env.idm, Writer{idm});
  visit(t.env.reward, Writer{reward});
  reward["variant"] = t.env.reward.variant == RewardVariant::Verbatim ? "verbatim" : "closeness";
  visit(t.pi, Writer{pi});
  visit(t.trpo, Writer{trpo});
  visit(t.rollout, Writer{rollout});
  visit_agent(t, Writer{agent});
  agent["variant"] = std::string(to_string(t.variant));
  root["scenario"] = scenario;
  root["idm"] = idm;
  root["reward"] = reward;
  root["pi"] = pi;
  root["trpo"] = trpo;
  root["rollout"] = rollout;
  root["agent"] = agent;
  root["iterations"] = t.iterations;
  root["seeds"] = c.seeds;
  root["output_dir"] = c.output_dir.string();
  root["checkpoint_interval"] = c.checkpoint_interval;
  root["eval_episodes"] = c.eval_episodes;
  root["eval_seed"] = c.eval_seed;
  return root.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// CSV

std::string format_number(double v) {
  if (std::isnan(v)) return "NA";
  if (v == 0.0) return "0";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

void write_schema(std::ostream& out, std::string_view schema) {
  out << "# schema=" << schema << '\n';
}

double parse_number(const std::string& s) {
  if (s == "NA") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("not a number in CSV: '" + s + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<IterationMetrics>& rows) {
  write_schema(out, kMetricsSchema);
  out << "iteration,env_steps,episodes,collisions,episode_return,avg_speed,speed_std,eps_m,"
         "k_star,eps_pi,r_max,c_bound,eta,eta_hat,kl,accepted,virtual_count,model_loss,"
         "value_loss\n";
  for (const auto& m : rows) {
    out << m.iteration << ',' << m.env_steps << ',' << m.episodes << ',' << m.collisions << ','
        << format_number(m.episode_return) << ',' << format_number(m.avg_speed) << ','
        << format_number(m.speed_std) << ',' << format_number(m.eps_m) << ',' << m.k_star << ','
        << format_number(m.eps_pi) << ',' << format_number(m.r_max) << ','
        << format_number(m.c_bound) << ',' << format_number(m.eta) << ','
        << format_number(m.eta_hat) << ',' << format_number(m.kl) << ',' << (m.accepted ? 1 : 0)
        << ',' << m.virtual_count << ',' << format_number(m.model_loss) << ','
        << format_number(m.value_loss) << '\n';
  }
}

const std::vector<std::string>& aggregate_columns() {
  static const std::vector<std::string> cols{"env_steps", "episode_return", "avg_speed",
                                             "speed_std", "eps_m",          "k_star",
                                             "c_bound",   "kl"};
  return cols;
}

std::size_t CsvTable::column(std::string_view name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::runtime_error("missing CSV column '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (t.header.empty())
      t.header = split_csv_line(line);
    else
      t.rows.push_back(split_csv_line(line));
  }
  return t;
}

void write_aggregate_csv(std::ostream& out, const std::vector<fs::path>& seed_files) {
  std::vector<CsvTable> tables;
  for (const auto& f : seed_files) tables.push_back(read_csv(f));
  std::size_t n_rows = 0;
  for (const auto& t : tables) n_rows = std::max(n_rows, t.rows.size());

  write_schema(out, kAggregateSchema);
  out << "iteration,n_seeds";
  for (const auto& c : aggregate_columns()) out << ",mean_" << c << ",std_" << c;
  out << '\n';
  for (std::size_t r = 0; r < n_rows; ++r) {
    int seeds_here = 0;
    for (const auto& t : tables) seeds_here += r < t.rows.size() ? 1 : 0;
    out << r << ',' << seeds_here;
    for (const auto& c : aggregate_columns()) {
      std::vector<double> vals;
      for (const auto& t : tables) {
        if (r >= t.rows.size()) continue;
        const double v = parse_number(t.rows[r][t.column(c)]);
        if (std::isfinite(v)) vals.push_back(v);
      }
      if (vals.empty()) {
        out << ",NA,NA";
        continue;
      }
      double sum = 0.0;
      for (double v : vals) sum += v;
      const double mean = sum / static_cast<double>(vals.size());
      double ss = 0.0;
      for (double v : vals) ss += (v - mean) * (v - mean);
      const double sd = std::sqrt(ss / static_cast<double>(vals.size()));
      out << ',' << format_number(mean) << ',' << format_number(sd);
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

std::ofstream open_for_write(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = dir / ".kirl_write_probe";
  std::ofstream p(probe);
  if (ec || !p) throw ConfigError("output directory is not writable: " + dir.string());
  p.close();
  fs::remove(probe, ec);
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  ensure_writable_dir(config.output_dir);
  {
    auto out = open_for_write(config.output_dir / "config.json");
    out << experiment_config_to_json(config);
  }

  RunResult result;
  for (const std::uint64_t seed : config.seeds) {
    TrainConfig tc = config.train;
    tc.seed = seed;
    Trainer trainer(tc);
    const std::string tag = "seed_" + std::to_string(seed);
    const fs::path seed_dir = config.output_dir / tag;
    const fs::path ckpt_dir = config.output_dir / "checkpoints" / tag;
    fs::create_directories(seed_dir);

    spdlog::info("{} seed {}: training {} iterations", to_string(tc.variant), seed, tc.iterations);
    fs::path last = trainer.save_checkpoint(ckpt_dir);
    for (int i = 0; i < tc.iterations; ++i) {
      trainer.iterate();
      const bool final_iter = i + 1 == tc.iterations;
      const bool stop = tc.stop_on_convergence && trainer.converged();
      if ((i + 1) % config.checkpoint_interval == 0 || final_iter || stop)
        last = trainer.save_checkpoint(ckpt_dir);
      if (stop) {
        spdlog::info("seed {}: converged after {} iterations", seed, i + 1);
        break;
      }
    }

    const fs::path metrics = seed_dir / "metrics.csv";
    {
      auto out = open_for_write(metrics);
      write_metrics_csv(out, trainer.history());
    }
    {
      auto out = open_for_write(seed_dir / "timing.csv");
      out << "iteration,wall_time_s\n";
      for (const auto& m : trainer.history())
        out << m.iteration << ',' << format_number(m.wall_time) << '\n';
    }
    result.seed_metrics.push_back(metrics);
    result.final_checkpoints.push_back(last);
  }

  result.aggregate = config.output_dir / "aggregate.csv";
  auto out = open_for_write(result.aggregate);
  write_aggregate_csv(out, result.seed_metrics);
  return result;
}

EvalSummary evaluate(const EnvConfig& env, const PolicyPair& pair, int episodes,
                     std::uint64_t seed) {
  if (episodes < 1) throw ConfigError("evaluation needs at least one episode");
  TrafficEnv e(env);
  Rng seeds(seed);
  Rng unused(0);
  EvalSummary s;
  for (int i = 0; i < episodes; ++i) {
    const EpisodeSummary ep = run_episode(e, pair, seeds(), unused, true);
    s.per_episode.push_back(ep);
    s.mean_return += ep.episode_return;
    s.avg_speed += ep.avg_speed;
    s.speed_std += ep.speed_std;
    s.collisions += ep.collision ? 1 : 0;
  }
  s.episodes = episodes;
  s.mean_return /= episodes;
  s.avg_speed /= episodes;
  s.speed_std /= episodes;
  return s;
}

EvalSummary evaluate_baseline(EnvConfig env, Baseline baseline, const PiParams& pi, int episodes,
                              std::uint64_t seed) {
  PolicyPair pair;
  pair.pi = pi;
  pair.dt = env.scenario.dt;
  pair.action_bound = env.action_bound;
  if (baseline == Baseline::AllIdm) {
    env.cav_control = CavControl::Idm;
    pair.use_physics = false;
  }
  return evaluate(env, pair, episodes, seed);
}

EvalSummary evaluate_checkpoint(const EnvConfig& env, const fs::path& bundle,
                                AgentVariant variant, const PiParams& pi, int episodes,
                                std::uint64_t seed) {
  const GaussianPolicy policy = load_bundle_policy(bundle);
  PolicyPair pair;
  pair.residual = &policy;
  pair.use_physics = traits_of(variant).physics_policy;
  pair.pi = pi;
  pair.dt = env.scenario.dt;
  pair.action_bound = env.action_bound;
  return evaluate(env, pair, episodes, seed);
}

void write_eval_csv(std::ostream& out, const EvalSummary& summary) {
  write_schema(out, kEvalSchema);
  out << "episode,return,avg_speed,speed_std,collision,steps\n";
  for (std::size_t i = 0; i < summary.per_episode.size(); ++i) {
    const auto& e = summary.per_episode[i];
    out << i << ',' << format_number(e.episode_return) << ',' << format_number(e.avg_speed) << ','
        << format_number(e.speed_std) << ',' << (e.collision ? 1 : 0) << ',' << e.steps << '\n';
  }
  out << "mean," << format_number(summary.mean_return) << ',' << format_number(summary.avg_speed)
      << ',' << format_number(summary.speed_std) << ',' << summary.collisions << ",\n";
}

// ---------------------------------------------------------------------------
// Car-following corpus

std::string_view to_string(CfScenario s) {
  switch (s) {
    case CfScenario::Accelerate: return "accelerate";
    case CfScenario::Decelerate: return "decelerate";
    case CfScenario::Cruise: return "cruise";
    case CfScenario::EmergencyBrake: return "emergency-brake";
  }
  return "?";
}

std::string_view to_string(CfModelKind k) {
  return k == CfModelKind::Knowledge ? "knowledge" : "vanilla";
}

std::vector<CfSample> simulate_cf_trajectory(CfScenario scenario, double v_follow0,
                                             double v_lead0, double gap0,
                                             const CfDatasetConfig& config, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double lead_accel = 0.0;
  int profile_steps = 0;
  switch (scenario) {
    case CfScenario::Accelerate:
      lead_accel = 0.3 + 1.2 * unit(rng);
      profile_steps = static_cast<int>((3.0 + 5.0 * unit(rng)) / config.dt);
      break;
    case CfScenario::Decelerate:
      lead_accel = -2.0 * unit(rng);
      profile_steps = static_cast<int>((3.0 + 5.0 * unit(rng)) / config.dt);
      break;
    case CfScenario::Cruise:
      break;
    case CfScenario::EmergencyBrake:
      lead_accel = -2.0;
      profile_steps = config.steps_per_trajectory;
      break;
  }
  std::normal_distribution<double> noise(0.0, config.idm.noise_std > 0.0 ? config.idm.noise_std : 1.0);

  std::vector<CfSample> out;
  double vf = v_follow0, vl = v_lead0, gap = gap0;
  for (int k = 0; k < config.steps_per_trajectory; ++k) {
    if (gap <= 0.1) break;
    CfSample s;
    s.v_follow = vf;
    s.v_lead = vl;
    s.gap = gap;
    s.scenario = scenario;
    s.accel = idm_accel(vf, vl, gap, config.idm) +
              (config.idm.noise_std > 0.0 ? noise(rng) : 0.0);
    out.push_back(s);

    const double al = k < profile_steps ? lead_accel : 0.0;
    vl = std::clamp(vl + al * config.dt, 0.0, config.idm.v0);
    vf = std::max(0.0, vf + s.accel * config.dt);
    gap += (vl - vf) * config.dt;
  }
  return out;
}

CfDataset generate_cf_dataset(const CfDatasetConfig& config, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<CfSample> all;
  all.reserve(static_cast<std::size_t>(config.target_samples));
  const CfScenario order[4] = {CfScenario::Accelerate, CfScenario::Decelerate, CfScenario::Cruise,
                               CfScenario::EmergencyBrake};
  for (int traj = 0; static_cast<int>(all.size()) < config.target_samples; ++traj) {
    const CfScenario sc = order[traj % 4];
    const double vl = 2.0 + 23.0 * unit(rng);
    const double vf = std::max(0.0, vl + 4.0 * unit(rng) - 2.0);
    const double gap = config.idm.s0 + vf * config.idm.T0 + 20.0 * unit(rng);
    const auto traj_samples = simulate_cf_trajectory(sc, vf, vl, gap, config, rng);
    all.insert(all.end(), traj_samples.begin(), traj_samples.end());
  }
  all.resize(static_cast<std::size_t>(config.target_samples));
  std::shuffle(all.begin(), all.end(), rng);

  const auto n = all.size();
  const auto n_train = static_cast<std::size_t>(std::llround(config.train_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(config.val_fraction * static_cast<double>(n)));
  CfDataset d;
  d.train.assign(all.begin(), all.begin() + static_cast<long>(n_train));
  d.val.assign(all.begin() + static_cast<long>(n_train),
               all.begin() + static_cast<long>(n_train + n_val));
  d.test.assign(all.begin() + static_cast<long>(n_train + n_val), all.end());
  return d;
}

namespace {

Eigen::Vector3d cf_features(const CfSample& s) { return {s.v_follow, s.v_lead, s.gap}; }

double cf_base(const CfModel& m, const CfSample& s) {
  if (m.kind == CfModelKind::Vanilla) return 0.0;
  return idm_accel(s.v_follow, s.v_lead, s.gap, m.idm);
}

Eigen::MatrixXd cf_inputs(const CfModel& m, const std::vector<CfSample>& data) {
  Eigen::MatrixXd x(3, static_cast<Eigen::Index>(data.size()));
  for (std::size_t j = 0; j < data.size(); ++j)
    x.col(static_cast<Eigen::Index>(j)) =
        (cf_features(data[j]) - m.in_mean).cwiseQuotient(m.in_std);
  return x;
}

}  // namespace

double CfModel::predict(const CfSample& s) const {
  const Eigen::VectorXd x = (cf_features(s) - in_mean).cwiseQuotient(in_std);
  return cf_base(*this, s) + net.forward(x)[0];
}

double cf_mse(const CfModel& model, const std::vector<CfSample>& data) {
  if (data.empty()) throw std::invalid_argument("cf_mse: empty data");
  const Eigen::MatrixXd out = model.net.forward_batch(cf_inputs(model, data));
  double ss = 0.0;
  for (std::size_t j = 0; j < data.size(); ++j) {
    const double e = cf_base(model, data[j]) + out(0, static_cast<Eigen::Index>(j)) - data[j].accel;
    ss += e * e;
  }
  return ss / static_cast<double>(data.size());
}

CfTrainResult train_cf_model(CfModelKind kind, const std::vector<CfSample>& train,
                             const IdmParams& idm, const CfTrainConfig& config, Rng& rng) {
  if (train.empty()) throw std::invalid_argument("train_cf_model: empty training set");
  CfTrainResult res;
  CfModel& m = res.model;
  m.kind = kind;
  m.idm = idm;
  std::vector<int> sizes{3};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(1);
  m.net = Mlp::initialized(sizes, OutputActivation::Identity, rng, config.output_gain);

  const auto n = static_cast<Eigen::Index>(train.size());
  Eigen::Vector3d sum = Eigen::Vector3d::Zero(), sq = Eigen::Vector3d::Zero();
  for (const auto& s : train) {
    const Eigen::Vector3d f = cf_features(s);
    sum += f;
    sq += f.cwiseAbs2();
  }
  m.in_mean = sum / static_cast<double>(n);
  for (int i = 0; i < 3; ++i) {
    const double sd = std::sqrt(std::max(0.0, sq[i] / static_cast<double>(n) - m.in_mean[i] * m.in_mean[i]));
    m.in_std[i] = sd > 1e-8 ? sd : 1.0;
  }

  const Eigen::MatrixXd x = cf_inputs(m, train);
  Eigen::VectorXd target(n);
  for (Eigen::Index j = 0; j < n; ++j)
    target[j] = train[static_cast<std::size_t>(j)].accel - cf_base(m, train[static_cast<std::size_t>(j)]);

  Adam opt(m.net.num_params(), config.learning_rate);
  Eigen::VectorXd theta = m.net.flatten();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::Index bs = std::min<Eigen::Index>(config.batch_size, n);
  Eigen::MatrixXd xb(3, bs);
  Eigen::RowVectorXd yb(bs);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start + bs <= n; start += bs) {
      for (Eigen::Index i = 0; i < bs; ++i) {
        const Eigen::Index src = order[static_cast<std::size_t>(start + i)];
        xb.col(i) = x.col(src);
        yb[i] = target[src];
      }
      Mlp::Cache cache;
      const Eigen::MatrixXd pred = m.net.forward_batch(xb, &cache);
      const Eigen::MatrixXd g = (2.0 / static_cast<double>(bs)) * (pred.row(0) - yb);
      opt.step(theta, m.net.backward_cached(cache, g));
      m.net.assign(theta);
    }
    const Eigen::MatrixXd pred = m.net.forward_batch(x);
    const double loss = (pred.row(0).transpose() - target).squaredNorm() / static_cast<double>(n);
    if (!std::isfinite(loss)) throw std::runtime_error("train_cf_model: non-finite loss");
    res.epoch_loss.push_back(loss);
  }
  return res;
}

CompareResult compare_dynamics_models(const CfDataset& dataset, const std::vector<double>& fractions,
                                      int repeats, const IdmParams& idm,
                                      const CfTrainConfig& config, std::uint64_t seed) {
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  if (fractions.empty()) throw ConfigError("at least one fraction is required");
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("fractions must lie in (0, 1]");
  const double curve_fraction = *std::max_element(fractions.begin(), fractions.end());

  CompareResult result;
  for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
    const double f = fractions[fi];
    for (int rep = 0; rep < repeats; ++rep) {
      Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * (fi * 1000 + static_cast<std::size_t>(rep) + 1)));
      std::vector<CfSample> subset = dataset.train;
      std::shuffle(subset.begin(), subset.end(), rng);
      const auto count = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::floor(f * static_cast<double>(subset.size()))));
      subset.resize(std::min(count, subset.size()));

      for (const CfModelKind kind : {CfModelKind::Knowledge, CfModelKind::Vanilla}) {
        Rng model_rng = rng;
        const CfTrainResult tr = train_cf_model(kind, subset, idm, config, model_rng);
        CompareRow row;
        row.fraction = f;
        row.repeat = rep;
        row.model = kind;
        row.train_samples = subset.size();
        row.test_mse = cf_mse(tr.model, dataset.test);
        row.final_train_loss = tr.epoch_loss.empty() ? 0.0 : tr.epoch_loss.back();
        result.rows.push_back(row);
        if (f == curve_fraction && rep == 0)
          (kind == CfModelKind::Knowledge ? result.knowledge_loss : result.vanilla_loss) =
              tr.epoch_loss;
      }
    }
  }
  return result;
}

void write_compare_csv(std::ostream& out, const CompareResult& result) {
  write_schema(out, kModelCompareSchema);
  out << "fraction,repeat,model,train_samples,test_mse,final_train_loss\n";
  for (const auto& r : result.rows)
    out << format_number(r.fraction) << ',' << r.repeat << ',' << to_string(r.model) << ','
        << r.train_samples << ',' << format_number(r.test_mse) << ','
        << format_number(r.final_train_loss) << '\n';
}

void write_compare_summary_csv(std::ostream& out, const CompareResult& result) {
  write_schema(out, kModelCompareSchema);
  out << "fraction,model,repeats,mean_test_mse,std_test_mse,mean_final_train_loss\n";
  std::vector<double> fractions;
  for (const auto& r : result.rows)
    if (std::find(fractions.begin(), fractions.end(), r.fraction) == fractions.end())
      fractions.push_back(r.fraction);
  for (double f : fractions) {
    for (const CfModelKind kind : {CfModelKind::Knowledge, CfModelKind::Vanilla}) {
      std::vector<double> err, loss;
      for (const auto& r : result.rows)
        if (r.fraction == f && r.model == kind) {
          err.push_back(r.test_mse);
          loss.push_back(r.final_train_loss);
        }
      if (err.empty()) continue;
      const double n = static_cast<double>(err.size());
      const double mean = std::accumulate(err.begin(), err.end(), 0.0) / n;
      double ss = 0.0;
      for (double e : err) ss += (e - mean) * (e - mean);
      out << format_number(f) << ',' << to_string(kind) << ',' << err.size() << ','
          << format_number(mean) << ',' << format_number(std::sqrt(ss / n)) << ','
          << format_number(std::accumulate(loss.begin(), loss.end(), 0.0) / n) << '\n';
    }
  }
}

void write_loss_csv(std::ostream& out, const CompareResult& result) {
  write_schema(out, kModelLossSchema);
  out << "epoch,model,train_loss\n";
  for (std::size_t e = 0; e < result.knowledge_loss.size(); ++e)
    out << e + 1 << ",knowledge," << format_number(result.knowledge_loss[e]) << '\n';
  for (std::size_t e = 0; e < result.vanilla_loss.size(); ++e)
    out << e + 1 << ",vanilla," << format_number(result.vanilla_loss[e]) << '\n';
}

void write_cf_dataset_csv(std::ostream& out, const CfDataset& dataset) {
  out << "# schema=kirl.cf_dataset/1\n";
  out << "split,scenario,v_follow,v_lead,gap,accel\n";
  auto dump = [&](const char* split, const std::vector<CfSample>& data) {
    for (const auto& s : data)
      out << split << ',' << to_string(s.scenario) << ',' << format_number(s.v_follow) << ','
          << format_number(s.v_lead) << ',' << format_number(s.gap) << ','
          << format_number(s.accel) << '\n';
  };
  dump("train", dataset.train);
  dump("val", dataset.val);
  dump("test", dataset.test);
}

// ---------------------------------------------------------------------------
// Trajectories and logging

std::size_t export_trajectories(std::ostream& out, const EnvConfig& env, const PolicyPair& pair,
                                std::uint64_t episode_seed) {
  write_schema(out, kTrajectorySchema);
  out << "t,vehicle_id,route_pos,velocity,kind,road\n";
  std::size_t rows = 0;
  TrafficEnv e(env);
  Rng unused(0);
  run_episode(e, pair, episode_seed, unused, true, [&](const TrafficEnv& te) {
    const std::string t = format_number(static_cast<double>(te.t()) * te.config().scenario.dt);
    for (const auto& v : te.vehicles()) {
      out << t << ',' << v.id.value << ',' << format_number(v.pos) << ','
          << format_number(v.velocity) << ',' << (v.kind == VehicleKind::Cav ? "cav" : "hdv")
          << ',' << (v.road == Road::Main ? "main" : "ramp") << '\n';
      ++rows;
    }
  });
  return rows;
}

void configure_logging_from_env() {
  const char* level = std::getenv("KIRL_LOG");
  if (!level) {
    spdlog::set_level(spdlog::level::info);
    return;
  }
  const auto parsed = spdlog::level::from_str(level);
  spdlog::set_level(parsed);
}

}  // namespace kirl
