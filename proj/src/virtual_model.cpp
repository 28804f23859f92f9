#include "kirl/virtual_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kirl {

namespace {

constexpr double kMinIdmGap = 1e-2;

double clip_accel(double a, const IdmParams& p) { return std::clamp(a, -p.emergency_decel, p.a_max); }

double scale_or_one(double sd) { return sd > 1e-8 ? sd : 1.0; }

Eigen::VectorXd model_input(const DynamicsModel& model, const LocalObs& s, double a) {
  Eigen::VectorXd x(kModelInputDim);
  for (int i = 0; i < kLocalObsDim; ++i) x[i] = s[static_cast<std::size_t>(i)];
  x[kLocalObsDim] = a;
  return (x - model.in_mean).cwiseQuotient(model.in_std);
}

// Adds a residual (normalized units) to a base prediction and keeps the
// next state inside the observation domain.
Prediction apply_residual(const DynamicsModel& model, Prediction base, const Eigen::VectorXd& res) {
  for (int i = 0; i < kLocalObsDim; ++i)
    base.next[static_cast<std::size_t>(i)] += model.out_scale[i] * res[i];
  base.reward += model.out_scale[kLocalObsDim] * res[kLocalObsDim];

  const double cap = model.config.scales.max_normalized_gap;
  auto& n = base.next;
  n[0] = std::max(n[0], 0.0);
  n[1] = std::max(n[1], -n[0]);
  n[2] = std::max(n[2], -n[0]);
  n[3] = std::min(n[3], cap);
  n[4] = std::min(n[4], cap);
  if (n[3] <= 0.0 || n[4] <= 0.0) base.terminal = true;
  return base;
}

}  // namespace

PiSnapshot snapshot_of(const PiState& state) {
  return {state.mean_speed(), static_cast<std::uint32_t>(state.history_size()), state.v_cmd()};
}

PiState restore_pi(const PiSnapshot& snapshot, std::size_t window) {
  return PiState::from_summary(window, snapshot.mean_speed, snapshot.history, snapshot.v_cmd);
}

DynamicsModel DynamicsModel::create(const ModelConfig& config, Rng& rng) {
  DynamicsModel m;
  m.config = config;
  std::vector<int> sizes{kModelInputDim};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(kModelOutputDim);
  m.residual = Mlp::initialized(sizes, OutputActivation::Identity, rng, config.output_gain);
  m.optimizer = MomentumSgd(m.residual.num_params(), config.learning_rate, config.momentum);
  return m;
}

Prediction base_predict(const ModelConfig& config, const LocalObs& s, double a) {
  const LocalContext c = decode_local(s, config.scales);
  const double dt = config.dt;

  LocalContext n;
  n.v_ego = std::max(0.0, c.v_ego + a * dt);
  if (config.base == BaseModel::Idm) {
    // The leader's own leader is taken to mirror the ego's view of the leader.
    const double a_lead =
        clip_accel(idm_accel(c.v_lead, c.v_lead, std::max(c.gap_lead, kMinIdmGap), config.idm),
                   config.idm);
    const double a_follow =
        clip_accel(idm_accel(c.v_follow, c.v_ego, std::max(c.gap_follow, kMinIdmGap), config.idm),
                   config.idm);
    n.v_lead = std::max(0.0, c.v_lead + a_lead * dt);
    n.v_follow = std::max(0.0, c.v_follow + a_follow * dt);
  } else {
    n.v_lead = c.v_lead;
    n.v_follow = c.v_follow;
  }
  n.gap_lead = c.gap_lead + (n.v_lead - n.v_ego) * dt;
  n.gap_follow = c.gap_follow + (n.v_ego - n.v_follow) * dt;

  Prediction p;
  p.next = encode_local(n, config.scales);
  p.terminal = n.gap_lead <= 0.0 || n.gap_follow <= 0.0;
  const double speeds[3] = {n.v_ego, n.v_lead, n.v_follow};
  const CavRewardInput cav{n.gap_lead, n.v_ego, a};
  p.reward = compute_reward(speeds, std::span<const CavRewardInput>(&cav, 1), config.reward);
  if (p.terminal) p.reward -= config.reward.collision_penalty;
  return p;
}

Eigen::VectorXd residual_output(const DynamicsModel& model, const LocalObs& s, double a) {
  return model.residual.forward(model_input(model, s, a));
}

Prediction predict(const DynamicsModel& model, const LocalObs& s, double a) {
  return apply_residual(model, base_predict(model.config, s, a), residual_output(model, s, a));
}

std::vector<Prediction> predict_batch(const DynamicsModel& model, const Eigen::MatrixXd& states,
                                      std::span<const double> actions) {
  if (states.rows() != kLocalObsDim || states.cols() != static_cast<Eigen::Index>(actions.size()))
    throw std::invalid_argument("predict_batch: shape mismatch");
  const Eigen::Index n = states.cols();
  Eigen::MatrixXd x(kModelInputDim, n);
  x.topRows(kLocalObsDim) = states;
  for (Eigen::Index j = 0; j < n; ++j) x(kLocalObsDim, j) = actions[static_cast<std::size_t>(j)];
  x = (x.colwise() - model.in_mean).array().colwise() / model.in_std.array();
  const Eigen::MatrixXd res = model.residual.forward_batch(x);

  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) {
    LocalObs s;
    for (int i = 0; i < kLocalObsDim; ++i) s[static_cast<std::size_t>(i)] = states(i, j);
    const double a = actions[static_cast<std::size_t>(j)];
    out.push_back(apply_residual(model, base_predict(model.config, s, a), res.col(j)));
  }
  return out;
}

void fit_normalization(DynamicsModel& model, std::span<const Transition> data) {
  if (data.empty()) return;
  Eigen::VectorXd in_sum = Eigen::VectorXd::Zero(kModelInputDim);
  Eigen::VectorXd in_sq = Eigen::VectorXd::Zero(kModelInputDim);
  Eigen::VectorXd out_sum = Eigen::VectorXd::Zero(kModelOutputDim);
  Eigen::VectorXd out_sq = Eigen::VectorXd::Zero(kModelOutputDim);
  Eigen::VectorXd x(kModelInputDim), y(kModelOutputDim);
  for (const auto& t : data) {
    for (int i = 0; i < kLocalObsDim; ++i) {
      const auto k = static_cast<std::size_t>(i);
      x[i] = t.s[k];
      y[i] = t.s_next[k] - t.s[k];
    }
    x[kLocalObsDim] = t.applied;
    y[kLocalObsDim] = t.reward;
    in_sum += x;
    in_sq += x.cwiseAbs2();
    out_sum += y;
    out_sq += y.cwiseAbs2();
  }
  const double n = static_cast<double>(data.size());
  model.in_mean = in_sum / n;
  for (int i = 0; i < kModelInputDim; ++i) {
    const double var = std::max(0.0, in_sq[i] / n - model.in_mean[i] * model.in_mean[i]);
    model.in_std[i] = scale_or_one(std::sqrt(var));
  }
  for (int i = 0; i < kModelOutputDim; ++i) {
    const double mean = out_sum[i] / n;
    const double var = std::max(0.0, out_sq[i] / n - mean * mean);
    model.out_scale[i] = scale_or_one(std::sqrt(var));
  }
}

double train_residual(DynamicsModel& model, std::span<const Transition> batch) {
  if (batch.empty()) throw std::invalid_argument("train_residual: empty batch");
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd x(kModelInputDim, n);
  Eigen::MatrixXd target(kModelOutputDim, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Transition& t = batch[static_cast<std::size_t>(j)];
    if (t.source != Source::Actual)
      throw std::invalid_argument("train_residual: virtual transition in training batch");
    x.col(j) = model_input(model, t.s, t.applied);
    const Prediction base = base_predict(model.config, t.s, t.applied);
    for (int i = 0; i < kLocalObsDim; ++i) {
      const auto k = static_cast<std::size_t>(i);
      target(i, j) = (t.s_next[k] - base.next[k]) / model.out_scale[i];
    }
    target(kLocalObsDim, j) = (t.reward - base.reward) / model.out_scale[kLocalObsDim];
  }
  Mlp::Cache cache;
  const Eigen::MatrixXd out = model.residual.forward_batch(x, &cache);
  const Eigen::MatrixXd diff = out - target;
  const double count = static_cast<double>(diff.size());
  const double loss = diff.squaredNorm() / count;
  if (!std::isfinite(loss)) throw std::runtime_error("train_residual: non-finite loss");
  const Eigen::VectorXd grad = model.residual.backward_cached(cache, (2.0 / count) * diff);
  Eigen::VectorXd theta = model.residual.flatten();
  model.optimizer.step(theta, grad);
  model.residual.assign(theta);
  return loss;
}

double estimate_model_error(DynamicsModel& model, std::span<const Transition> validation) {
  if (validation.empty()) throw ConfigError("estimate_model_error: empty validation set");
  const auto n = static_cast<Eigen::Index>(validation.size());
  Eigen::MatrixXd states(kLocalObsDim, n);
  std::vector<double> actions(validation.size());
  for (Eigen::Index j = 0; j < n; ++j) {
    const Transition& t = validation[static_cast<std::size_t>(j)];
    if (t.source != Source::Actual)
      throw std::invalid_argument("estimate_model_error: virtual transition in validation set");
    for (int i = 0; i < kLocalObsDim; ++i) states(i, j) = t.s[static_cast<std::size_t>(i)];
    actions[static_cast<std::size_t>(j)] = t.applied;
  }
  const auto preds = predict_batch(model, states, actions);
  double total = 0.0;
  for (std::size_t j = 0; j < validation.size(); ++j) {
    const Transition& t = validation[j];
    double sq = 0.0;
    for (int i = 0; i < kLocalObsDim; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double e = (preds[j].next[k] - t.s_next[k]) / model.out_scale[i];
      sq += e * e;
    }
    const double er = (preds[j].reward - t.reward) / model.out_scale[kLocalObsDim];
    sq += er * er;
    total += std::sqrt(sq / kModelOutputDim);
  }
  model.eps_m = total / static_cast<double>(validation.size());
  return model.eps_m;
}

void RolloutConfig::validate() const {
  if (k_max < 1) throw ConfigError("k_max must be >= 1");
  if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
  if (branch_starts < 1) throw ConfigError("branch starts must be >= 1");
}

int rollout_length(double eps_m, const RolloutConfig& config) {
  if (!(eps_m >= 0.0)) throw std::invalid_argument("rollout_length: eps_m must be non-negative");
  if (eps_m == 0.0) return config.k_max;
  const double k = std::floor(config.kappa / eps_m);
  if (k >= config.k_max) return config.k_max;
  return std::max(1, static_cast<int>(k));
}

double physics_action(PiState& state, const LocalObs& s, const PolicyPair& pair,
                      const ObsScales& scales) {
  if (!pair.use_physics) return 0.0;
  const LocalContext c = decode_local(s, scales);
  const double v_cmd = pi_update_command(state, c.gap_lead, c.v_lead, c.v_ego, pair.pi);
  return command_to_accel(v_cmd, c.v_ego, pair.dt, -pair.action_bound, pair.action_bound);
}

std::vector<Transition> branched_rollout(const DynamicsModel& model, const PolicyPair& pair,
                                         std::span<const Transition> starts, int k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("branched_rollout: k must be >= 1");
  const std::size_t b = starts.size();
  Eigen::MatrixXd states(kLocalObsDim, static_cast<Eigen::Index>(b));
  std::vector<PiState> pis;
  pis.reserve(b);
  for (std::size_t j = 0; j < b; ++j) {
    for (int i = 0; i < kLocalObsDim; ++i)
      states(i, static_cast<Eigen::Index>(j)) = starts[j].s[static_cast<std::size_t>(i)];
    pis.push_back(restore_pi(starts[j].pi, pair.pi.window));
  }
  std::vector<std::vector<Transition>> branches(b);
  std::vector<std::size_t> alive(b);
  for (std::size_t j = 0; j < b; ++j) alive[j] = j;

  std::normal_distribution<double> normal(0.0, 1.0);
  const double sigma = pair.residual ? std::exp(pair.residual->log_std[0]) : 0.0;
  for (int step = 0; step < k && !alive.empty(); ++step) {
    const auto m = static_cast<Eigen::Index>(alive.size());
    Eigen::MatrixXd s_act(kLocalObsDim, m);
    for (Eigen::Index j = 0; j < m; ++j) s_act.col(j) = states.col(static_cast<Eigen::Index>(alive[static_cast<std::size_t>(j)]));
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(1, m);
    if (pair.residual) mean = pair.residual->mean(s_act);

    std::vector<double> applied(alive.size());
    std::vector<Transition> pending(alive.size());
    for (std::size_t j = 0; j < alive.size(); ++j) {
      const std::size_t idx = alive[j];
      Transition& t = pending[j];
      for (int i = 0; i < kLocalObsDim; ++i)
        t.s[static_cast<std::size_t>(i)] = s_act(i, static_cast<Eigen::Index>(j));
      t.pi = snapshot_of(pis[idx]);
      t.action = mean(0, static_cast<Eigen::Index>(j)) + sigma * normal(rng);
      const double a_h = physics_action(pis[idx], t.s, pair, model.config.scales);
      t.applied = compose_action(a_h, t.action, pair.action_bound);
      applied[j] = t.applied;
    }
    const auto preds = predict_batch(model, s_act, applied);

    std::vector<std::size_t> still;
    still.reserve(alive.size());
    for (std::size_t j = 0; j < alive.size(); ++j) {
      const std::size_t idx = alive[j];
      Transition& t = pending[j];
      t.reward = preds[j].reward;
      t.s_next = preds[j].next;
      t.done = preds[j].terminal;
      t.segment_end = !t.done && step + 1 == k;
      t.source = Source::Virtual;
      branches[idx].push_back(t);
      if (!t.done) {
        for (int i = 0; i < kLocalObsDim; ++i)
          states(i, static_cast<Eigen::Index>(idx)) = t.s_next[static_cast<std::size_t>(i)];
        still.push_back(idx);
      }
    }
    alive = std::move(still);
  }

  std::vector<Transition> out;
  for (auto& br : branches) out.insert(out.end(), br.begin(), br.end());
  return out;
}

}  // namespace kirl
