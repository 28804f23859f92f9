#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kirl/controllers.hpp"
#include "kirl/traffic_net.hpp"

namespace kirl {

enum class RewardVariant { Verbatim, Closeness };

struct RewardConfig {
  double alpha_w = 1.0;
  double beta_w = 0.1;
  double gamma_w = 0.1;
  double v_des = 30.0;
  double h_max = 1.0;
  RewardVariant variant = RewardVariant::Closeness;
  double collision_penalty = 50.0;
  // Headway denominators are floored at this speed.
  double min_headway_speed = 0.1;

  void validate() const;
};

inline constexpr int kLocalObsDim = 5;
using LocalObs = std::array<double, kLocalObsDim>;

struct ObsScales {
  double velocity = 30.0;
  double gap = 100.0;
  // Normalized gaps are capped; a missing neighbour reads as the cap.
  double max_normalized_gap = 5.0;
};

/// Physical neighbourhood of one CAV. Relative velocities are neighbour minus ego.
struct LocalContext {
  double v_ego = 0.0;
  double v_lead = 0.0;
  double v_follow = 0.0;
  double gap_lead = 0.0;
  double gap_follow = 0.0;
};

LocalObs encode_local(const LocalContext& ctx, const ObsScales& scales);
LocalContext decode_local(const LocalObs& obs, const ObsScales& scales);

/// Fixed block of CAV slots, each holding a 5-value local observation.
struct Observation {
  int slots = 1;
  std::vector<double> values;                   // slots * kLocalObsDim, zero padded
  std::vector<std::optional<VehicleId>> ids;    // controlled vehicle per slot

  int active() const;
  LocalObs slot(int i) const;
};

struct CavRewardInput {
  double gap = 0.0;
  double velocity = 0.0;
  double accel = 0.0;
};

double time_headway(double gap, double velocity, const RewardConfig& config);

/// Mobility term minus headway and acceleration penalties.
double compute_reward(std::span<const double> speeds, std::span<const CavRewardInput> cavs,
                      const RewardConfig& config);

enum class CavControl { External, Idm };

struct EnvConfig {
  ScenarioConfig scenario = ScenarioConfig::ring();
  IdmParams idm;
  RewardConfig reward;
  ObsScales scales;
  double action_bound = 1.0;
  // Idm: every CAV drives the noisy IDM and actions are ignored (baseline runs).
  CavControl cav_control = CavControl::External;

  void validate() const;
};

struct ControlledCav {
  VehicleId id;
  LocalObs next_obs{};
  bool exited = false;
};

struct StepInfo {
  double mean_speed = 0.0;
  double speed_std = 0.0;
  bool action_clipped = false;
  bool collision = false;
  bool horizon_reached = false;
  std::vector<ControlledCav> cavs;     // CAVs acted on this step, in slot order
  std::vector<double> applied_accels;  // per controlled CAV
};

struct StepResult {
  Observation obs;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

/// Mixed-traffic MDP over the built-in simulator.
class TrafficEnv {
 public:
  explicit TrafficEnv(EnvConfig config);

  /// Draws the episode seed from the environment's own stream.
  Observation reset();
  Observation reset(std::uint64_t episode_seed);

  StepResult step(std::span<const double> actions);

  Observation observe() const;
  LocalContext local_context(VehicleId id) const;

  const EnvConfig& config() const { return config_; }
  const Network& network() const { return network_; }
  std::span<const VehicleState> vehicles() const { return vehicles_; }
  long t() const { return t_; }
  bool done() const { return done_; }
  int slots() const;
  double speed_mean() const;
  double speed_std() const;

 private:
  std::vector<VehicleId> controlled_ids() const;
  std::vector<double> idm_accels(const std::vector<VehicleId>& external);
  void advance(std::span<const double> accels);
  void apply_boundaries();

  EnvConfig config_;
  Rng stream_;
  Rng rng_;
  Network network_;
  std::vector<VehicleState> vehicles_;
  RightOfWay row_;
  InflowState inflow_;
  long sim_step_ = 0;
  long t_ = 0;
  bool done_ = true;
};

}  // namespace kirl
