#include "kirl/rl_env.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace kirl {

namespace {

// IDM is undefined at gap <= 0; overlapping vehicles brake at the floor until
// the episode is terminated by collision detection.
constexpr double kMinIdmGap = 1e-2;

}  // namespace

void RewardConfig::validate() const {
  if (alpha_w < 0.0 || beta_w < 0.0 || gamma_w < 0.0)
    throw ConfigError("reward weights must be non-negative");
  if (!(v_des > 0.0)) throw ConfigError("v_des must be positive");
  if (!(h_max >= 0.0)) throw ConfigError("h_max must be non-negative");
  if (collision_penalty < 0.0) throw ConfigError("collision penalty must be non-negative");
}

LocalObs encode_local(const LocalContext& ctx, const ObsScales& scales) {
  auto gap = [&](double g) {
    return std::isfinite(g) ? std::min(g / scales.gap, scales.max_normalized_gap)
                            : scales.max_normalized_gap;
  };
  return {ctx.v_ego / scales.velocity, (ctx.v_lead - ctx.v_ego) / scales.velocity,
          (ctx.v_follow - ctx.v_ego) / scales.velocity, gap(ctx.gap_lead),
          gap(ctx.gap_follow)};
}

LocalContext decode_local(const LocalObs& obs, const ObsScales& scales) {
  LocalContext ctx;
  ctx.v_ego = obs[0] * scales.velocity;
  ctx.v_lead = ctx.v_ego + obs[1] * scales.velocity;
  ctx.v_follow = ctx.v_ego + obs[2] * scales.velocity;
  ctx.gap_lead = obs[3] * scales.gap;
  ctx.gap_follow = obs[4] * scales.gap;
  return ctx;
}

int Observation::active() const {
  return static_cast<int>(std::count_if(ids.begin(), ids.end(), [](const auto& id) { return id.has_value(); }));
}

LocalObs Observation::slot(int i) const {
  if (i < 0 || i >= slots) throw std::out_of_range("Observation::slot");
  LocalObs o{};
  std::copy_n(values.begin() + i * kLocalObsDim, kLocalObsDim, o.begin());
  return o;
}

double time_headway(double gap, double velocity, const RewardConfig& config) {
  return gap / std::max(velocity, config.min_headway_speed);
}

double compute_reward(std::span<const double> speeds, std::span<const CavRewardInput> cavs,
                      const RewardConfig& config) {
  double mean = 0.0;
  if (!speeds.empty())
    mean = std::accumulate(speeds.begin(), speeds.end(), 0.0) / static_cast<double>(speeds.size());

  double mobility;
  if (config.variant == RewardVariant::Verbatim) {
    mobility = config.alpha_w * std::max(config.v_des - mean, 0.0);
  } else {
    mobility = config.alpha_w * std::max(config.v_des - std::abs(config.v_des - mean), 0.0) /
               config.v_des;
  }
  double headway_penalty = 0.0;
  double accel_penalty = 0.0;
  for (const auto& cav : cavs) {
    const double h = time_headway(cav.gap, cav.velocity, config);
    headway_penalty += std::max(config.h_max - h, 0.0);
    accel_penalty += std::abs(cav.accel);
  }
  return mobility - config.beta_w * headway_penalty - config.gamma_w * accel_penalty;
}

void EnvConfig::validate() const {
  scenario.validate();
  idm.validate();
  reward.validate();
  if (!(action_bound > 0.0)) throw ConfigError("action bound must be positive");
  if (!(scales.velocity > 0.0) || !(scales.gap > 0.0))
    throw ConfigError("observation scales must be positive");
}

TrafficEnv::TrafficEnv(EnvConfig config) : config_(std::move(config)), stream_(config_.scenario.seed) {
  config_.validate();
}

int TrafficEnv::slots() const {
  return config_.scenario.kind == ScenarioKind::Merge ? config_.scenario.max_cav_slots : 1;
}

Observation TrafficEnv::reset() { return reset(stream_()); }

Observation TrafficEnv::reset(std::uint64_t episode_seed) {
  rng_.seed(episode_seed);
  network_ = build_network(config_.scenario, rng_);
  row_ = RightOfWay{};
  inflow_ = InflowState{};
  sim_step_ = 0;
  t_ = 0;
  if (network_.closed()) {
    vehicles_ = place_closed_fleet(network_, config_.scenario, rng_);
  } else {
    vehicles_.clear();
  }
  for (int k = 0; k < config_.scenario.warmup; ++k) {
    const auto accels = idm_accels({});
    advance(accels);
  }
  done_ = false;
  return observe();
}

std::vector<VehicleId> TrafficEnv::controlled_ids() const {
  std::vector<VehicleId> ids;
  for (const auto& v : vehicles_)
    if (v.kind == VehicleKind::Cav) ids.push_back(v.id);
  std::sort(ids.begin(), ids.end());
  if (static_cast<int>(ids.size()) > slots()) ids.resize(slots());
  return ids;
}

LocalContext TrafficEnv::local_context(VehicleId id) const {
  const VehicleState* ego = find_vehicle(vehicles_, id);
  if (!ego) throw std::invalid_argument("local_context: unknown vehicle");
  const LeaderInfo lead = leader_of(network_, vehicles_, id, config_.scenario, &row_);
  const FollowerInfo follow = follower_of(network_, vehicles_, id);
  LocalContext ctx;
  ctx.v_ego = ego->velocity;
  ctx.gap_lead = lead.gap;
  ctx.v_lead = std::isfinite(lead.gap) ? lead.leader_velocity : ego->velocity;
  ctx.gap_follow = follow.gap;
  ctx.v_follow = follow.follower ? follow.follower_velocity : ego->velocity;
  return ctx;
}

Observation TrafficEnv::observe() const {
  Observation obs;
  obs.slots = slots();
  obs.values.assign(static_cast<std::size_t>(obs.slots * kLocalObsDim), 0.0);
  obs.ids.assign(static_cast<std::size_t>(obs.slots), std::nullopt);
  const auto ids = controlled_ids();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const LocalObs o = encode_local(local_context(ids[i]), config_.scales);
    std::copy(o.begin(), o.end(), obs.values.begin() + static_cast<long>(i) * kLocalObsDim);
    obs.ids[i] = ids[i];
  }
  return obs;
}

std::vector<double> TrafficEnv::idm_accels(const std::vector<VehicleId>& external) {
  update_right_of_way(network_, vehicles_, config_.scenario, row_, sim_step_);
  std::vector<double> accels(vehicles_.size(), 0.0);
  for (std::size_t i = 0; i < vehicles_.size(); ++i) {
    const auto& v = vehicles_[i];
    if (std::find(external.begin(), external.end(), v.id) != external.end()) continue;
    const LeaderInfo lead = leader_of(network_, vehicles_, v.id, config_.scenario, &row_);
    accels[i] = idm_accel_noisy(v.velocity, lead.leader_velocity, std::max(lead.gap, kMinIdmGap),
                                config_.idm, rng_);
  }
  return accels;
}

void TrafficEnv::advance(std::span<const double> accels) {
  vehicles_ = step_kinematics(network_, vehicles_, accels, config_.scenario.dt);
  ++sim_step_;
  apply_boundaries();
}

// Merge only: drop vehicles past the highway end, then insert inflows.
void TrafficEnv::apply_boundaries() {
  if (network_.kind != ScenarioKind::Merge) return;
  std::erase_if(vehicles_, [&](const VehicleState& v) {
    return v.road == Road::Main && v.pos >= network_.length;
  });
  const auto spawned = spawn_inflows(network_, vehicles_, config_.scenario, inflow_, rng_);
  vehicles_.insert(vehicles_.end(), spawned.begin(), spawned.end());
}

double TrafficEnv::speed_mean() const {
  if (vehicles_.empty()) return 0.0;
  double s = 0.0;
  for (const auto& v : vehicles_) s += v.velocity;
  return s / static_cast<double>(vehicles_.size());
}

double TrafficEnv::speed_std() const {
  if (vehicles_.empty()) return 0.0;
  const double mean = speed_mean();
  double ss = 0.0;
  for (const auto& v : vehicles_) ss += (v.velocity - mean) * (v.velocity - mean);
  return std::sqrt(ss / static_cast<double>(vehicles_.size()));
}

StepResult TrafficEnv::step(std::span<const double> actions) {
  if (done_) throw std::logic_error("TrafficEnv::step called on a finished episode");
  if (static_cast<int>(actions.size()) != slots())
    throw std::invalid_argument("TrafficEnv::step: one action per CAV slot required");

  StepResult result;
  const auto controlled = controlled_ids();
  const bool external = config_.cav_control == CavControl::External;

  auto accels = idm_accels(external ? controlled : std::vector<VehicleId>{});
  std::vector<double> applied(controlled.size(), 0.0);
  for (std::size_t k = 0; k < controlled.size(); ++k) {
    const auto it = std::find_if(vehicles_.begin(), vehicles_.end(),
                                 [&](const VehicleState& v) { return v.id == controlled[k]; });
    const auto idx = static_cast<std::size_t>(it - vehicles_.begin());
    if (external) {
      const double a = std::clamp(actions[k], -config_.action_bound, config_.action_bound);
      if (a != actions[k]) result.info.action_clipped = true;
      accels[idx] = a;
    }
    applied[k] = accels[idx];
  }

  vehicles_ = step_kinematics(network_, vehicles_, accels, config_.scenario.dt);
  ++sim_step_;
  ++t_;

  std::vector<double> speeds;
  speeds.reserve(vehicles_.size());
  for (const auto& v : vehicles_) speeds.push_back(v.velocity);
  std::vector<CavRewardInput> cav_inputs;
  for (std::size_t k = 0; k < controlled.size(); ++k) {
    const LocalContext ctx = local_context(controlled[k]);
    ControlledCav cav;
    cav.id = controlled[k];
    cav.next_obs = encode_local(ctx, config_.scales);
    const VehicleState* v = find_vehicle(vehicles_, controlled[k]);
    cav.exited = network_.kind == ScenarioKind::Merge && v->pos >= network_.length;
    result.info.cavs.push_back(cav);
    cav_inputs.push_back({ctx.gap_lead, ctx.v_ego, applied[k]});
  }
  result.info.applied_accels = applied;
  result.info.mean_speed = speed_mean();
  result.info.speed_std = speed_std();
  result.reward = compute_reward(speeds, cav_inputs, config_.reward);

  if (!detect_collisions(network_, vehicles_).empty()) {
    result.info.collision = true;
    result.reward -= config_.reward.collision_penalty;
    done_ = true;
  }

  apply_boundaries();

  if (t_ >= config_.scenario.horizon) {
    result.info.horizon_reached = true;
    done_ = true;
  }
  result.done = done_;
  result.obs = observe();
  return result;
}

}  // namespace kirl
