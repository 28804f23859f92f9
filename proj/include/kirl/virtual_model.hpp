#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "kirl/controllers.hpp"
#include "kirl/func_approx.hpp"
#include "kirl/rl_env.hpp"
#include "kirl/trpo.hpp"

namespace kirl {

enum class Source : std::uint8_t { Actual, Virtual };

/// Controller state captured before the physics action of a step was computed.
struct PiSnapshot {
  double mean_speed = 0.0;
  std::uint32_t history = 0;
  double v_cmd = 0.0;
};

PiSnapshot snapshot_of(const PiState& state);
PiState restore_pi(const PiSnapshot& snapshot, std::size_t window);

struct Transition {
  LocalObs s{};
  double action = 0.0;   // sampled residual action
  double applied = 0.0;  // composed acceleration that drove the vehicle
  double reward = 0.0;
  LocalObs s_next{};
  bool done = false;         // terminal, no bootstrap
  bool segment_end = false;  // trajectory cut here but s_next is bootstrapped
  Source source = Source::Actual;
  PiSnapshot pi;
};

/// Which analytic model sits under the residual network.
enum class BaseModel {
  Idm,        // ego integrates the action, leader and follower drive deterministic IDM
  Kinematic,  // ego integrates the action, neighbours hold their speeds
};

inline constexpr int kModelInputDim = kLocalObsDim + 1;
inline constexpr int kModelOutputDim = kLocalObsDim + 1;

struct ModelConfig {
  BaseModel base = BaseModel::Idm;
  IdmParams idm;
  RewardConfig reward;
  ObsScales scales;
  double dt = 0.1;
  std::vector<int> hidden{64, 64};
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int batch_size = 256;
  double output_gain = 0.01;
};

struct Prediction {
  LocalObs next{};
  double reward = 0.0;
  bool terminal = false;
};

/// Analytic base model plus a residual network acting on normalized (s, a).
/// Residual outputs are in units of the per-dimension output scales.
struct DynamicsModel {
  ModelConfig config;
  Mlp residual;
  Eigen::VectorXd in_mean = Eigen::VectorXd::Zero(kModelInputDim);
  Eigen::VectorXd in_std = Eigen::VectorXd::Ones(kModelInputDim);
  Eigen::VectorXd out_scale = Eigen::VectorXd::Ones(kModelOutputDim);
  double eps_m = 0.0;
  MomentumSgd optimizer{0};

  static DynamicsModel create(const ModelConfig& config, Rng& rng);
};

Prediction base_predict(const ModelConfig& config, const LocalObs& s, double a);

/// Residual-net output (normalized units) for one (s, a).
Eigen::VectorXd residual_output(const DynamicsModel& model, const LocalObs& s, double a);
Prediction predict(const DynamicsModel& model, const LocalObs& s, double a);

/// Batched predict: states are kLocalObsDim x N.
std::vector<Prediction> predict_batch(const DynamicsModel& model, const Eigen::MatrixXd& states,
                                      std::span<const double> actions);

/// Refreshes input normalization and output scales from actual transitions.
void fit_normalization(DynamicsModel& model, std::span<const Transition> data);

/// One gradient step on the residual MSE; returns the loss before the step.
double train_residual(DynamicsModel& model, std::span<const Transition> batch);

/// Mean over samples of the RMS normalized one-step error across state dims and reward.
/// Stores the result in model.eps_m.
double estimate_model_error(DynamicsModel& model, std::span<const Transition> validation);

struct RolloutConfig {
  int k_max = 500;
  double kappa = 2.0;
  int branch_starts = 400;

  void validate() const;
};

/// min(k_max, floor(kappa / eps_m)), k_max when eps_m is zero; at least 1.
int rollout_length(double eps_m, const RolloutConfig& config);

/// The composed controller used in virtual rollouts.
struct PolicyPair {
  const GaussianPolicy* residual = nullptr;
  bool use_physics = true;
  PiParams pi;
  double dt = 0.1;
  double action_bound = 1.0;
};

/// Physics action at local state `s`; zero when the pair has no physics policy.
/// Advances `state` as the controller would.
double physics_action(PiState& state, const LocalObs& s, const PolicyPair& pair,
                      const ObsScales& scales);

/// Rolls the composed policy through `predict` from each start for up to k steps.
/// Output is grouped branch by branch; the last transition of each branch has
/// segment_end (or done) set.
std::vector<Transition> branched_rollout(const DynamicsModel& model, const PolicyPair& pair,
                                         std::span<const Transition> starts, int k, Rng& rng);

}  // namespace kirl
