#pragma once

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "kirl/func_approx.hpp"

namespace kirl {

/// Diagonal Gaussian policy with a state-independent log-std vector.
/// Flat parameters are the mean-net parameters followed by log-std.
struct GaussianPolicy {
  Mlp mean_net;
  Eigen::VectorXd log_std;

  /// Mean net with bounded-tanh output; the output layer starts at zero.
  static GaussianPolicy create(int obs_dim, int act_dim, const std::vector<int>& hidden,
                               double init_log_std, Rng& rng, double output_gain = 0.0);

  int obs_dim() const { return mean_net.input_dim(); }
  int action_dim() const { return mean_net.output_dim(); }
  std::size_t num_params() const;

  Eigen::MatrixXd mean(const Eigen::MatrixXd& states) const;
  Eigen::VectorXd sample(const Eigen::VectorXd& state, Rng& rng) const;
  /// Log density of each column of `actions`.
  Eigen::VectorXd log_prob(const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions) const;

  Eigen::VectorXd flat() const;
  void set_flat(const Eigen::VectorXd& flat);
};

double gaussian_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                            const Eigen::VectorXd& log_std);

/// KL(N(mu_p, sigma_p) || N(mu_q, sigma_q)) for diagonal Gaussians.
double kl_diag_gaussian(const Eigen::VectorXd& mu_p, const Eigen::VectorXd& log_std_p,
                        const Eigen::VectorXd& mu_q, const Eigen::VectorXd& log_std_q);

/// KL(old || now) at each state.
Eigen::VectorXd kl_per_state(const GaussianPolicy& old_policy, const GaussianPolicy& now,
                             const Eigen::MatrixXd& states);
double mean_kl(const GaussianPolicy& old_policy, const GaussianPolicy& now,
               const Eigen::MatrixXd& states);

struct GaeResult {
  Eigen::VectorXd raw_advantages;
  Eigen::VectorXd advantages;  // normalized to zero mean, unit std
  Eigen::VectorXd returns;     // raw advantages + values
};

/// Single trajectory: `values` carries one more entry than `rewards`, the
/// bootstrap value of the final next-state.
GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const bool> dones, double discount, double lambda);

/// Concatenated trajectories. Chains break wherever `dones` or `segment_ends`
/// is set; only `dones` suppresses the bootstrap term.
GaeResult gae_segments(std::span<const double> rewards, std::span<const double> values,
                       std::span<const double> next_values, std::span<const bool> dones,
                       std::span<const bool> segment_ends, double discount, double lambda);

void normalize_in_place(Eigen::VectorXd& v);

struct TrpoConfig {
  double discount = 0.995;
  double gae_lambda = 0.97;
  double max_kl = 1e-2;
  int cg_iterations = 10;
  double cg_damping = 0.1;
  double cg_residual_tol = 1e-10;
  int backtrack_count = 10;
  double backtrack_ratio = 0.8;
  double value_l2 = 1e-3;
  int value_passes = 25;
  double value_lr = 1e-3;
  int value_minibatch = 2048;
  // Fisher-vector products use at most this many states, taken at an even stride.
  int fvp_max_samples = 2048;

  void validate() const;
};

struct TrpoBatch {
  Eigen::MatrixXd states;   // obs_dim x N
  Eigen::MatrixXd actions;  // act_dim x N
  Eigen::VectorXd advantages;
  Eigen::VectorXd old_log_prob;
};

/// mean(exp(logpi - logpi_old) * A).
double surrogate_loss(const GaussianPolicy& policy, const TrpoBatch& batch);
Eigen::VectorXd surrogate_gradient(const GaussianPolicy& policy, const TrpoBatch& batch);

/// Hessian of the mean KL at the current parameters times v, plus damping * v.
Eigen::VectorXd fisher_vector_product(const GaussianPolicy& policy, const Eigen::MatrixXd& states,
                                      const Eigen::VectorXd& v, double damping);

struct CgResult {
  Eigen::VectorXd x;
  int iterations = 0;
  double residual = 0.0;
};

/// Throws std::runtime_error when an iterate becomes non-finite.
CgResult conjugate_gradient(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& op,
                            const Eigen::VectorXd& b, int iterations, double residual_tol);

struct LineSearchResult {
  bool accepted = false;
  double kl = 0.0;
  double improvement = 0.0;
  double step_fraction = 0.0;
  int backtracks = 0;
};

/// Backtracks along `full_step`; on exhaustion the policy is left at its old parameters.
LineSearchResult line_search(GaussianPolicy& policy, const TrpoBatch& batch,
                             const Eigen::VectorXd& full_step, double expected_improvement,
                             const TrpoConfig& config);

struct TrpoUpdate {
  LineSearchResult search;
  double expected_improvement = 0.0;
  double surrogate_before = 0.0;
  int cg_iterations = 0;
};

TrpoUpdate trpo_step(GaussianPolicy& policy, const TrpoBatch& batch, const TrpoConfig& config);

/// State-value approximator with its own optimizer state.
///
/// The network regresses standardized returns. Each fit re-centres the target
/// statistics on the batch and rescales the output layer so that predictions
/// are unchanged by the switch.
class ValueNet {
 public:
  ValueNet() = default;
  ValueNet(Mlp net, double lr);
  static ValueNet create(int obs_dim, const std::vector<int>& hidden, double lr, Rng& rng);

  Eigen::VectorXd predict(const Eigen::MatrixXd& states) const;
  const Mlp& net() const { return net_; }
  double shift() const { return shift_; }
  double scale() const { return scale_; }
  void set_state(Mlp net, double shift, double scale);

  /// Adam passes over random minibatches of (states, returns); returns the final
  /// mean squared error plus l2 * |theta|^2 on the whole batch.
  double fit(const Eigen::MatrixXd& states, const Eigen::VectorXd& returns, double l2,
             int passes, int minibatch, Rng& rng);

 private:
  void retarget(double shift, double scale);

  Mlp net_;
  Adam optimizer_{0};
  double shift_ = 0.0;
  double scale_ = 1.0;
};

double fit_value(ValueNet& value, const Eigen::MatrixXd& states, const Eigen::VectorXd& returns,
                 const TrpoConfig& config, Rng& rng);

}  // namespace kirl
