#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kirl/rl_env.hpp"
#include "kirl/trpo.hpp"
#include "kirl/virtual_model.hpp"

namespace kirl {

enum class AgentVariant { Proposed, VanillaTrpo, MbTrpo, NoInitialPolicy };

std::string_view to_string(AgentVariant v);
AgentVariant agent_variant_from_string(std::string_view name);

struct VariantTraits {
  bool physics_policy = true;
  bool uses_model = true;
  BaseModel base = BaseModel::Idm;
};

VariantTraits traits_of(AgentVariant v);

/// FIFO transition store holding a single source.
class ExperienceBuffer {
 public:
  ExperienceBuffer(std::size_t capacity, Source source);

  void push(const Transition& t);
  void push(std::span<const Transition> ts);
  void clear() { data_.clear(); }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t capacity() const { return capacity_; }
  Source source() const { return source_; }
  const Transition& operator[](std::size_t i) const { return data_[i]; }

  /// Copies entries [first, first + count).
  std::vector<Transition> slice(std::size_t first, std::size_t count) const;
  /// The most recent `count` entries (fewer when the buffer is smaller), oldest first.
  std::vector<Transition> recent(std::size_t count) const;

 private:
  std::size_t capacity_;
  Source source_;
  std::deque<Transition> data_;
};

struct BoundInputs {
  double r_max = 0.0;
  double gamma = 0.995;
  double eps_pi = 0.0;
  double eps_m = 0.0;
  int k = 1;
};

/// 2 R [g^(k+1) e_pi / (1-g)^2 + g^k e_pi / (1-g) + k e_m / (1-g)].
double c_bound(const BoundInputs& in);

/// max over states of sqrt(KL(old || now) / 2).
double estimate_policy_shift(const GaussianPolicy& old_policy, const GaussianPolicy& now,
                             const Eigen::MatrixXd& states);

struct TrainConfig {
  EnvConfig env;
  TrpoConfig trpo;
  RolloutConfig rollout;
  PiParams pi;
  AgentVariant variant = AgentVariant::Proposed;
  std::uint64_t seed = 0;
  int iterations = 200;
  int steps_per_iteration = 3000;
  std::size_t actual_capacity = 100000;
  std::size_t virtual_capacity = 400000;
  int virtual_ratio = 4;  // virtual transitions per actual one in each update batch
  int model_steps = 100;  // residual-model gradient steps per iteration
  double validation_fraction = 0.1;
  std::size_t min_validation = 256;
  std::vector<int> policy_hidden{64, 64};
  double init_log_std = -1.6094379124341003;  // ln 0.2
  int updates_per_iteration = 1;
  double model_lr = 1e-3;
  int model_batch = 256;
  // Convergence: stop once the mean return over the last `window` iterations
  // improves on the previous window by less than `threshold` (relative).
  bool stop_on_convergence = false;
  int convergence_window = 20;
  double convergence_threshold = 0.01;

  void validate() const;
};

struct IterationMetrics {
  int iteration = 0;
  long env_steps = 0;  // cumulative actual-environment steps
  int episodes = 0;
  int collisions = 0;
  double episode_return = 0.0;
  double avg_speed = 0.0;
  double speed_std = 0.0;
  double eps_m = 0.0;
  int k_star = 0;
  double eps_pi = 0.0;
  double r_max = 0.0;
  double c_bound = 0.0;
  double eta = 0.0;
  double eta_hat = 0.0;
  double kl = 0.0;
  bool accepted = false;
  std::size_t virtual_count = 0;
  double model_loss = 0.0;
  double value_loss = 0.0;
  double wall_time = 0.0;
};

/// Per-step observer for trajectory export.
using StepObserver = std::function<void(const TrafficEnv&)>;

struct CollectResult {
  std::vector<Transition> transitions;  // grouped per vehicle trajectory
  std::vector<double> episode_returns;  // finished episodes only
  double mean_speed = 0.0;              // averaged over steps
  double speed_std = 0.0;
  int collisions = 0;
  long steps = 0;
};

/// Runs the composed policy for `steps` environment steps, starting a fresh
/// episode and resetting on termination. `deterministic` uses the policy mean.
CollectResult collect_actual(TrafficEnv& env, const PolicyPair& pair, int steps, Rng& rng,
                             bool deterministic = false);

struct EpisodeSummary {
  double episode_return = 0.0;
  double avg_speed = 0.0;
  double speed_std = 0.0;
  bool collision = false;
  long steps = 0;
};

/// One full episode from `episode_seed`.
EpisodeSummary run_episode(TrafficEnv& env, const PolicyPair& pair, std::uint64_t episode_seed,
                           Rng& rng, bool deterministic, const StepObserver& observer = {});

class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  IterationMetrics iterate();
  int iteration() const { return iteration_; }
  bool converged() const;

  const TrainConfig& config() const { return config_; }
  const GaussianPolicy& policy() const { return policy_; }
  const ValueNet& value() const { return value_; }
  const std::optional<DynamicsModel>& model() const { return model_; }
  const ExperienceBuffer& actual_buffer() const { return actual_; }
  const ExperienceBuffer& virtual_buffer() const { return virtual_; }
  const std::vector<IterationMetrics>& history() const { return history_; }
  PolicyPair policy_pair() const;

  /// Writes dir/iter_NNNN atomically and returns its path.
  std::filesystem::path save_checkpoint(const std::filesystem::path& dir) const;
  /// Restores networks, counters and RNG state. Buffers start empty.
  void load_checkpoint(const std::filesystem::path& bundle);

 private:
  void train_model(IterationMetrics& m);
  std::vector<Transition> generate_virtual(IterationMetrics& m);
  void update_policy(const std::vector<Transition>& actual, IterationMetrics& m);

  TrainConfig config_;
  VariantTraits traits_;
  Rng rng_;
  TrafficEnv env_;
  GaussianPolicy policy_;
  ValueNet value_;
  std::optional<DynamicsModel> model_;
  ExperienceBuffer actual_;
  ExperienceBuffer virtual_;
  std::vector<IterationMetrics> history_;
  int iteration_ = 0;
  long env_steps_ = 0;
  double r_max_ = 0.0;
};

void save_policy(std::ostream& out, const GaussianPolicy& policy);
GaussianPolicy load_policy(std::istream& in);
void save_model(std::ostream& out, const DynamicsModel& model);
/// Restores network and statistics into a model built from `config`.
DynamicsModel load_model(std::istream& in, const ModelConfig& config);

/// Policy stored in a checkpoint bundle directory.
GaussianPolicy load_bundle_policy(const std::filesystem::path& bundle);

}  // namespace kirl
