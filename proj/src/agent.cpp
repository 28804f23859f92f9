#include "kirl/agent.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace kirl {

namespace fs = std::filesystem;

std::string_view to_string(AgentVariant v) {
  switch (v) {
    case AgentVariant::Proposed: return "proposed";
    case AgentVariant::VanillaTrpo: return "vanilla-trpo";
    case AgentVariant::MbTrpo: return "mb-trpo";
    case AgentVariant::NoInitialPolicy: return "no-initial-policy";
  }
  return "?";
}

AgentVariant agent_variant_from_string(std::string_view name) {
  for (auto v : {AgentVariant::Proposed, AgentVariant::VanillaTrpo, AgentVariant::MbTrpo,
                 AgentVariant::NoInitialPolicy})
    if (to_string(v) == name) return v;
  throw ConfigError("unknown agent variant '" + std::string(name) + "'");
}

VariantTraits traits_of(AgentVariant v) {
  switch (v) {
    case AgentVariant::Proposed: return {true, true, BaseModel::Idm};
    case AgentVariant::VanillaTrpo: return {false, false, BaseModel::Idm};
    case AgentVariant::MbTrpo: return {false, true, BaseModel::Kinematic};
    case AgentVariant::NoInitialPolicy: return {false, true, BaseModel::Idm};
  }
  throw std::logic_error("traits_of: bad variant");
}

ExperienceBuffer::ExperienceBuffer(std::size_t capacity, Source source)
    : capacity_(capacity), source_(source) {
  if (capacity_ == 0) throw ConfigError("buffer capacity must be positive");
}

void ExperienceBuffer::push(const Transition& t) {
  if (t.source != source_) throw std::invalid_argument("ExperienceBuffer: source tag mismatch");
  data_.push_back(t);
  if (data_.size() > capacity_) data_.pop_front();
}

void ExperienceBuffer::push(std::span<const Transition> ts) {
  for (const auto& t : ts) push(t);
}

std::vector<Transition> ExperienceBuffer::slice(std::size_t first, std::size_t count) const {
  if (first + count > data_.size()) throw std::out_of_range("ExperienceBuffer::slice");
  const auto b = data_.begin() + static_cast<long>(first);
  return {b, b + static_cast<long>(count)};
}

std::vector<Transition> ExperienceBuffer::recent(std::size_t count) const {
  const std::size_t n = std::min(count, data_.size());
  return slice(data_.size() - n, n);
}

double c_bound(const BoundInputs& in) {
  if (!(in.gamma < 1.0)) throw std::domain_error("c_bound: discount must be < 1");
  if (in.r_max < 0.0 || in.eps_pi < 0.0 || in.eps_m < 0.0 || in.k < 0 || in.gamma < 0.0)
    throw std::domain_error("c_bound: inputs must be non-negative");
  const double g = in.gamma;
  const double one = 1.0 - g;
  const double gk = std::pow(g, in.k);
  return 2.0 * in.r_max *
         (gk * g * in.eps_pi / (one * one) + gk * in.eps_pi / one + in.k * in.eps_m / one);
}

double estimate_policy_shift(const GaussianPolicy& old_policy, const GaussianPolicy& now,
                             const Eigen::MatrixXd& states) {
  if (states.cols() == 0) throw std::invalid_argument("estimate_policy_shift: no states");
  const Eigen::VectorXd kl = kl_per_state(old_policy, now, states);
  return std::sqrt(std::max(0.0, kl.maxCoeff()) / 2.0);
}

void TrainConfig::validate() const {
  env.validate();
  trpo.validate();
  rollout.validate();
  pi.validate();
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (steps_per_iteration < 1) throw ConfigError("steps per iteration must be >= 1");
  if (virtual_ratio < 0) throw ConfigError("virtual ratio must be non-negative");
  if (model_steps < 0 || model_batch < 1) throw ConfigError("model training sizes invalid");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation fraction must lie in (0, 1)");
  if (updates_per_iteration < 1) throw ConfigError("updates per iteration must be >= 1");
  if (policy_hidden.empty()) throw ConfigError("policy needs at least one hidden layer");
  if (convergence_window < 1) throw ConfigError("convergence window must be >= 1");
}

namespace {

// Fills one action per slot and the matching partially built transitions.
void compose_slots(const Observation& obs, const PolicyPair& pair, const ObsScales& scales,
                   std::map<std::uint32_t, PiState>& pis, Rng& rng, bool deterministic,
                   std::vector<double>& actions, std::vector<Transition>& pending) {
  actions.assign(static_cast<std::size_t>(obs.slots), 0.0);
  pending.clear();
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int i = 0; i < obs.slots; ++i) {
    if (!obs.ids[static_cast<std::size_t>(i)]) continue;
    const std::uint32_t id = obs.ids[static_cast<std::size_t>(i)]->value;
    Transition t;
    t.s = obs.slot(i);
    auto it = pis.find(id);
    if (it == pis.end())
      it = pis.emplace(id, PiState(pair.pi.window, t.s[0] * scales.velocity)).first;
    t.pi = snapshot_of(it->second);
    double a_theta = 0.0;
    if (pair.residual) {
      Eigen::VectorXd x(kLocalObsDim);
      for (int k = 0; k < kLocalObsDim; ++k) x[k] = t.s[static_cast<std::size_t>(k)];
      a_theta = pair.residual->mean_net.forward(x)[0];
      if (!deterministic) a_theta += std::exp(pair.residual->log_std[0]) * normal(rng);
    }
    const double a_h = physics_action(it->second, t.s, pair, scales);
    t.action = a_theta;
    t.applied = compose_action(a_h, a_theta, pair.action_bound);
    t.source = Source::Actual;
    actions[static_cast<std::size_t>(i)] = t.applied;
    pending.push_back(t);
  }
}

}  // namespace

CollectResult collect_actual(TrafficEnv& env, const PolicyPair& pair, int steps, Rng& rng,
                             bool deterministic) {
  if (steps < 1) throw std::invalid_argument("collect_actual: steps must be >= 1");
  CollectResult out;
  const ObsScales& scales = env.config().scales;
  std::map<std::uint32_t, std::vector<Transition>> open;
  std::map<std::uint32_t, PiState> pis;

  auto flush = [&](std::uint32_t id) {
    auto it = open.find(id);
    if (it == open.end()) return;
    auto& traj = it->second;
    if (!traj.empty() && !traj.back().done) traj.back().segment_end = true;
    out.transitions.insert(out.transitions.end(), traj.begin(), traj.end());
    open.erase(it);
  };
  auto flush_all = [&] {
    while (!open.empty()) flush(open.begin()->first);
  };

  Observation obs = env.reset();
  double episode_return = 0.0;
  double speed_sum = 0.0;
  double std_sum = 0.0;
  std::vector<double> actions;
  std::vector<Transition> pending;
  while (out.steps < steps) {
    compose_slots(obs, pair, scales, pis, rng, deterministic, actions, pending);
    const StepResult res = env.step(actions);
    ++out.steps;
    speed_sum += res.info.mean_speed;
    std_sum += res.info.speed_std;
    episode_return += res.reward;
    for (std::size_t k = 0; k < res.info.cavs.size() && k < pending.size(); ++k) {
      const ControlledCav& cav = res.info.cavs[k];
      Transition t = pending[k];
      t.reward = res.reward;
      t.s_next = cav.next_obs;
      t.done = res.info.collision;
      open[cav.id.value].push_back(t);
      if (cav.exited) {
        flush(cav.id.value);
        pis.erase(cav.id.value);
      }
    }
    if (res.done) {
      if (res.info.collision) ++out.collisions;
      out.episode_returns.push_back(episode_return);
      episode_return = 0.0;
      flush_all();
      pis.clear();
      if (out.steps < steps) obs = env.reset();
    } else {
      obs = res.obs;
    }
  }
  flush_all();
  out.mean_speed = speed_sum / static_cast<double>(out.steps);
  out.speed_std = std_sum / static_cast<double>(out.steps);
  return out;
}

EpisodeSummary run_episode(TrafficEnv& env, const PolicyPair& pair, std::uint64_t episode_seed,
                           Rng& rng, bool deterministic, const StepObserver& observer) {
  EpisodeSummary out;
  std::map<std::uint32_t, PiState> pis;
  Observation obs = env.reset(episode_seed);
  std::vector<double> actions;
  std::vector<Transition> pending;
  double speed_sum = 0.0;
  double std_sum = 0.0;
  while (!env.done()) {
    compose_slots(obs, pair, env.config().scales, pis, rng, deterministic, actions, pending);
    const StepResult res = env.step(actions);
    ++out.steps;
    out.episode_return += res.reward;
    speed_sum += res.info.mean_speed;
    std_sum += res.info.speed_std;
    out.collision = out.collision || res.info.collision;
    for (const auto& cav : res.info.cavs)
      if (cav.exited) pis.erase(cav.id.value);
    if (observer) observer(env);
    obs = res.obs;
  }
  if (out.steps > 0) {
    out.avg_speed = speed_sum / static_cast<double>(out.steps);
    out.speed_std = std_sum / static_cast<double>(out.steps);
  }
  return out;
}

namespace {

EnvConfig seeded_env(EnvConfig env, std::uint64_t seed) {
  env.scenario.seed = seed;
  return env;
}

double mean_reward(std::span<const Transition> ts) {
  if (ts.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : ts) s += t.reward;
  return s / static_cast<double>(ts.size());
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << bytes;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

Trainer::Trainer(TrainConfig config)
    : config_((config.validate(), std::move(config))),
      traits_(traits_of(config_.variant)),
      rng_(config_.seed),
      env_(seeded_env(config_.env, rng_())),
      actual_(config_.actual_capacity, Source::Actual),
      virtual_(config_.virtual_capacity, Source::Virtual) {
  policy_ = GaussianPolicy::create(kLocalObsDim, 1, config_.policy_hidden, config_.init_log_std,
                                   rng_, 0.0);
  value_ = ValueNet::create(kLocalObsDim, config_.policy_hidden, config_.trpo.value_lr, rng_);
  if (traits_.uses_model) {
    ModelConfig mc;
    mc.base = traits_.base;
    mc.idm = config_.env.idm;
    mc.reward = config_.env.reward;
    mc.scales = config_.env.scales;
    mc.dt = config_.env.scenario.dt;
    mc.hidden = config_.policy_hidden;
    mc.learning_rate = config_.model_lr;
    mc.batch_size = config_.model_batch;
    model_ = DynamicsModel::create(mc, rng_);
  }
}

PolicyPair Trainer::policy_pair() const {
  PolicyPair pair;
  pair.residual = &policy_;
  pair.use_physics = traits_.physics_policy;
  pair.pi = config_.pi;
  pair.dt = config_.env.scenario.dt;
  pair.action_bound = config_.env.action_bound;
  return pair;
}

IterationMetrics Trainer::iterate() {
  const auto start = std::chrono::steady_clock::now();
  IterationMetrics m;
  m.iteration = iteration_;

  const CollectResult col =
      collect_actual(env_, policy_pair(), config_.steps_per_iteration, rng_);
  env_steps_ += col.steps;
  actual_.push(col.transitions);
  for (const auto& t : col.transitions) r_max_ = std::max(r_max_, std::abs(t.reward));

  m.env_steps = env_steps_;
  m.episodes = static_cast<int>(col.episode_returns.size());
  m.collisions = col.collisions;
  m.episode_return = col.episode_returns.empty()
                         ? std::numeric_limits<double>::quiet_NaN()
                         : std::accumulate(col.episode_returns.begin(), col.episode_returns.end(),
                                           0.0) /
                               static_cast<double>(col.episode_returns.size());
  m.avg_speed = col.mean_speed;
  m.speed_std = col.speed_std;
  m.r_max = r_max_;

  const double horizon_scale = config_.trpo.discount < 1.0 ? 1.0 / (1.0 - config_.trpo.discount)
                                                           : 1.0;
  m.eta = mean_reward(col.transitions) * horizon_scale;

  if (traits_.uses_model) {
    train_model(m);
    const auto virt = generate_virtual(m);
    m.eta_hat = mean_reward(virt) * horizon_scale;
    virtual_.push(virt);
  }
  update_policy(col.transitions, m);

  if (config_.trpo.discount < 1.0) {
    m.c_bound = c_bound({r_max_, config_.trpo.discount, m.eps_pi, m.eps_m, m.k_star});
    if (traits_.uses_model && m.eta_hat - m.c_bound > m.eta + 0.1 * std::abs(m.eta))
      spdlog::warn("iteration {}: virtual return {:.3f} exceeds actual {:.3f} by more than C = {:.3f}",
                   iteration_, m.eta_hat, m.eta, m.c_bound);
  }

  for (double v : {m.avg_speed, m.speed_std, m.eps_m, m.c_bound, m.eta, m.eta_hat, m.kl,
                   m.value_loss, m.model_loss})
    if (!std::isfinite(v))
      throw std::runtime_error("non-finite training metric at iteration " +
                               std::to_string(iteration_));

  m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  spdlog::debug("iter {} return {:.2f} speed {:.3f} std {:.3f} eps_m {:.4f} k {} kl {:.5f} {}",
                m.iteration, m.episode_return, m.avg_speed, m.speed_std, m.eps_m, m.k_star, m.kl,
                m.accepted ? "accepted" : "rejected");
  history_.push_back(m);
  ++iteration_;
  return m;
}

void Trainer::train_model(IterationMetrics& m) {
  DynamicsModel& model = *model_;
  const std::size_t n = actual_.size();
  std::size_t n_val = std::max(config_.min_validation,
                               static_cast<std::size_t>(std::ceil(config_.validation_fraction *
                                                                  static_cast<double>(n))));
  n_val = std::min(n_val, n / 2);
  const std::size_t n_train = n - n_val;
  const std::vector<Transition> train = actual_.slice(0, n_train);
  const std::vector<Transition> val = actual_.slice(n_train, n_val);

  fit_normalization(model, train);
  std::uniform_int_distribution<std::size_t> pick(0, n_train - 1);
  std::vector<Transition> batch(static_cast<std::size_t>(config_.model_batch));
  double loss_sum = 0.0;
  for (int step = 0; step < config_.model_steps; ++step) {
    for (auto& t : batch) t = train[pick(rng_)];
    loss_sum += train_residual(model, batch);
  }
  m.model_loss = config_.model_steps > 0 ? loss_sum / config_.model_steps : 0.0;
  m.eps_m = estimate_model_error(model, val);
  m.k_star = rollout_length(m.eps_m, config_.rollout);
}

std::vector<Transition> Trainer::generate_virtual(IterationMetrics& m) {
  std::uniform_int_distribution<std::size_t> pick(0, actual_.size() - 1);
  std::vector<Transition> starts(static_cast<std::size_t>(config_.rollout.branch_starts));
  for (auto& s : starts) s = actual_[pick(rng_)];
  auto out = branched_rollout(*model_, policy_pair(), starts, m.k_star, rng_);
  m.virtual_count = out.size();
  return out;
}

void Trainer::update_policy(const std::vector<Transition>& actual, IterationMetrics& m) {
  std::vector<Transition> batch = actual;
  if (traits_.uses_model) {
    const auto virt =
        virtual_.recent(static_cast<std::size_t>(config_.virtual_ratio) * actual.size());
    batch.insert(batch.end(), virt.begin(), virt.end());
  }
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd states(kLocalObsDim, n), next(kLocalObsDim, n), actions(1, n);
  std::vector<double> rewards(batch.size());
  const std::unique_ptr<bool[]> dones(new bool[batch.size()]);
  const std::unique_ptr<bool[]> ends(new bool[batch.size()]);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Transition& t = batch[static_cast<std::size_t>(j)];
    for (int i = 0; i < kLocalObsDim; ++i) {
      states(i, j) = t.s[static_cast<std::size_t>(i)];
      next(i, j) = t.s_next[static_cast<std::size_t>(i)];
    }
    actions(0, j) = t.action;
    rewards[static_cast<std::size_t>(j)] = t.reward;
    dones[static_cast<std::size_t>(j)] = t.done;
    ends[static_cast<std::size_t>(j)] = t.segment_end;
  }
  const Eigen::VectorXd v = value_.predict(states);
  const Eigen::VectorXd v_next = value_.predict(next);
  const std::size_t count = batch.size();
  const GaeResult adv = gae_segments(
      rewards, std::span<const double>(v.data(), count), std::span<const double>(v_next.data(), count),
      std::span<const bool>(dones.get(), count), std::span<const bool>(ends.get(), count),
      config_.trpo.discount, config_.trpo.gae_lambda);

  m.value_loss = fit_value(value_, states, adv.returns, config_.trpo, rng_);

  const GaussianPolicy before = policy_;
  TrpoBatch tb{states, actions, adv.advantages, Eigen::VectorXd()};
  bool any_accepted = false;
  double kl = 0.0;
  for (int u = 0; u < config_.updates_per_iteration; ++u) {
    tb.old_log_prob = policy_.log_prob(states, actions);
    const TrpoUpdate up = trpo_step(policy_, tb, config_.trpo);
    if (up.search.accepted) {
      any_accepted = true;
      kl = up.search.kl;
    }
  }
  m.accepted = any_accepted;
  m.kl = kl;
  m.eps_pi = estimate_policy_shift(before, policy_, states);
}

bool Trainer::converged() const {
  const auto w = static_cast<std::size_t>(config_.convergence_window);
  if (history_.size() < 2 * w) return false;
  auto window_mean = [&](std::size_t from) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t i = from; i < from + w; ++i)
      if (std::isfinite(history_[i].episode_return)) {
        s += history_[i].episode_return;
        ++c;
      }
    return c ? s / static_cast<double>(c) : std::numeric_limits<double>::quiet_NaN();
  };
  const double prev = window_mean(history_.size() - 2 * w);
  const double last = window_mean(history_.size() - w);
  if (!std::isfinite(prev) || !std::isfinite(last)) return false;
  return last - prev < config_.convergence_threshold * std::abs(prev);
}

void save_policy(std::ostream& out, const GaussianPolicy& policy) {
  save_mlp(out, policy.mean_net);
  io::write_u64(out, static_cast<std::uint64_t>(policy.log_std.size()));
  for (Eigen::Index i = 0; i < policy.log_std.size(); ++i) io::write_f64(out, policy.log_std[i]);
}

GaussianPolicy load_policy(std::istream& in) {
  GaussianPolicy p;
  p.mean_net = load_mlp(in);
  const auto n = io::read_u64(in);
  if (n != static_cast<std::uint64_t>(p.mean_net.output_dim()))
    throw std::runtime_error("load_policy: log-std length does not match the action dimension");
  p.log_std.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < p.log_std.size(); ++i) p.log_std[i] = io::read_f64(in);
  return p;
}

void save_model(std::ostream& out, const DynamicsModel& model) {
  save_mlp(out, model.residual);
  io::write_u32(out, static_cast<std::uint32_t>(model.config.base));
  for (const Eigen::VectorXd* v : {&model.in_mean, &model.in_std, &model.out_scale})
    for (Eigen::Index i = 0; i < v->size(); ++i) io::write_f64(out, (*v)[i]);
  io::write_f64(out, model.eps_m);
}

DynamicsModel load_model(std::istream& in, const ModelConfig& config) {
  DynamicsModel m;
  m.config = config;
  m.residual = load_mlp(in);
  if (m.residual.input_dim() != kModelInputDim || m.residual.output_dim() != kModelOutputDim)
    throw std::runtime_error("load_model: residual network has the wrong shape");
  m.config.base = static_cast<BaseModel>(io::read_u32(in));
  for (Eigen::VectorXd* v : {&m.in_mean, &m.in_std, &m.out_scale})
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = io::read_f64(in);
  m.eps_m = io::read_f64(in);
  m.optimizer = MomentumSgd(m.residual.num_params(), config.learning_rate, config.momentum);
  return m;
}

fs::path Trainer::save_checkpoint(const fs::path& dir) const {
  char name[32];
  std::snprintf(name, sizeof name, "iter_%04d", iteration_);
  const fs::path final_path = dir / name;
  fs::path tmp = final_path;
  tmp += ".tmp";
  fs::create_directories(dir);
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  std::ostringstream pol, val, mod;
  save_policy(pol, policy_);
  save_mlp(val, value_.net());
  io::write_f64(val, value_.shift());
  io::write_f64(val, value_.scale());
  write_bytes(tmp / "policy.bin", pol.str());
  write_bytes(tmp / "value.bin", val.str());
  if (model_) {
    save_model(mod, *model_);
    write_bytes(tmp / "model.bin", mod.str());
  }
  std::ostringstream rng_state;
  rng_state << rng_;
  nlohmann::json state = {
      {"format", "kirl-checkpoint"},
      {"version", 1},
      {"iteration", iteration_},
      {"env_steps", env_steps_},
      {"r_max", r_max_},
      {"variant", std::string(to_string(config_.variant))},
      {"seed", config_.seed},
      {"rng", rng_state.str()},
  };
  write_bytes(tmp / "state.json", state.dump(2) + "\n");

  fs::remove_all(final_path);
  fs::rename(tmp, final_path);
  return final_path;
}

void Trainer::load_checkpoint(const fs::path& bundle) {
  std::ifstream sj(bundle / "state.json");
  if (!sj) throw std::runtime_error("checkpoint missing state.json: " + bundle.string());
  const auto state = nlohmann::json::parse(sj);
  if (state.at("variant").get<std::string>() != to_string(config_.variant))
    throw ConfigError("checkpoint variant does not match the configuration");

  policy_ = load_bundle_policy(bundle);
  {
    std::ifstream in(bundle / "value.bin", std::ios::binary);
    Mlp net = load_mlp(in);
    const double shift = io::read_f64(in);
    const double scale = io::read_f64(in);
    value_.set_state(std::move(net), shift, scale);
  }
  if (model_) {
    std::ifstream in(bundle / "model.bin", std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint missing model.bin");
    model_ = load_model(in, model_->config);
  }
  iteration_ = state.at("iteration").get<int>();
  env_steps_ = state.at("env_steps").get<long>();
  r_max_ = state.at("r_max").get<double>();
  std::istringstream rs(state.at("rng").get<std::string>());
  rs >> rng_;
  actual_.clear();
  virtual_.clear();
  history_.clear();
}

GaussianPolicy load_bundle_policy(const fs::path& bundle) {
  std::ifstream in(bundle / "policy.bin", std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint missing policy.bin: " + bundle.string());
  GaussianPolicy p = load_policy(in);
  if (p.obs_dim() != kLocalObsDim || p.action_dim() != 1)
    throw ConfigError("checkpoint policy dimensions do not match the observation layout");
  return p;
}

}  // namespace kirl
