#include "kirl/trpo.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace kirl {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::domain_error(what);
}

}  // namespace

GaussianPolicy GaussianPolicy::create(int obs_dim, int act_dim, const std::vector<int>& hidden,
                                      double init_log_std, Rng& rng, double output_gain) {
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(act_dim);
  GaussianPolicy p;
  p.mean_net = Mlp::initialized(sizes, OutputActivation::Tanh, rng, output_gain);
  p.log_std = Eigen::VectorXd::Constant(act_dim, init_log_std);
  return p;
}

std::size_t GaussianPolicy::num_params() const {
  return mean_net.num_params() + static_cast<std::size_t>(log_std.size());
}

Eigen::MatrixXd GaussianPolicy::mean(const Eigen::MatrixXd& states) const {
  return mean_net.forward_batch(states);
}

Eigen::VectorXd GaussianPolicy::sample(const Eigen::VectorXd& state, Rng& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd a = mean_net.forward(state);
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] += std::exp(log_std[i]) * normal(rng);
  return a;
}

Eigen::VectorXd GaussianPolicy::log_prob(const Eigen::MatrixXd& states,
                                         const Eigen::MatrixXd& actions) const {
  require(actions.rows() == action_dim() && actions.cols() == states.cols(),
          "log_prob: action shape mismatch");
  const Eigen::MatrixXd mu = mean(states);
  const Eigen::ArrayXd inv_std = (-log_std).array().exp();
  const double constant =
      -log_std.sum() - 0.5 * static_cast<double>(action_dim()) * std::log(2.0 * std::numbers::pi);
  Eigen::VectorXd out(states.cols());
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    const Eigen::ArrayXd z = (actions.col(j) - mu.col(j)).array() * inv_std;
    out[j] = constant - 0.5 * z.square().sum();
  }
  return out;
}

Eigen::VectorXd GaussianPolicy::flat() const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(num_params()));
  const Eigen::VectorXd net = mean_net.flatten();
  out << net, log_std;
  return out;
}

void GaussianPolicy::set_flat(const Eigen::VectorXd& flat) {
  require(flat.size() == static_cast<Eigen::Index>(num_params()), "set_flat: length mismatch");
  const auto n = static_cast<Eigen::Index>(mean_net.num_params());
  mean_net.assign(flat.head(n));
  log_std = flat.tail(log_std.size());
}

double gaussian_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                            const Eigen::VectorXd& log_std) {
  require(x.size() == mean.size() && x.size() == log_std.size(), "gaussian_log_density: shape");
  const Eigen::ArrayXd z = (x - mean).array() * (-log_std).array().exp();
  return -0.5 * z.square().sum() - log_std.sum() -
         0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

double kl_diag_gaussian(const Eigen::VectorXd& mu_p, const Eigen::VectorXd& log_std_p,
                        const Eigen::VectorXd& mu_q, const Eigen::VectorXd& log_std_q) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mu_p.size(); ++i) {
    const double var_p = std::exp(2.0 * log_std_p[i]);
    const double var_q = std::exp(2.0 * log_std_q[i]);
    const double d = mu_p[i] - mu_q[i];
    kl += log_std_q[i] - log_std_p[i] + (var_p + d * d) / (2.0 * var_q) - 0.5;
  }
  return kl;
}

Eigen::VectorXd kl_per_state(const GaussianPolicy& old_policy, const GaussianPolicy& now,
                             const Eigen::MatrixXd& states) {
  const Eigen::MatrixXd mu_old = old_policy.mean(states);
  const Eigen::MatrixXd mu_new = now.mean(states);
  Eigen::VectorXd kl(states.cols());
  for (Eigen::Index j = 0; j < states.cols(); ++j)
    kl[j] = kl_diag_gaussian(mu_old.col(j), old_policy.log_std, mu_new.col(j), now.log_std);
  return kl;
}

double mean_kl(const GaussianPolicy& old_policy, const GaussianPolicy& now,
               const Eigen::MatrixXd& states) {
  if (states.cols() == 0) return 0.0;
  return kl_per_state(old_policy, now, states).mean();
}

void normalize_in_place(Eigen::VectorXd& v) {
  if (v.size() == 0) return;
  const double mean = v.mean();
  v.array() -= mean;
  const double sd = std::sqrt(v.squaredNorm() / static_cast<double>(v.size()));
  if (sd > 1e-12) v /= sd;
}

GaeResult gae_segments(std::span<const double> rewards, std::span<const double> values,
                       std::span<const double> next_values, std::span<const bool> dones,
                       std::span<const bool> segment_ends, double discount, double lambda) {
  const std::size_t n = rewards.size();
  require(values.size() == n && next_values.size() == n && dones.size() == n &&
              segment_ends.size() == n,
          "gae: length mismatch");
  GaeResult out;
  out.raw_advantages.resize(static_cast<Eigen::Index>(n));
  out.returns.resize(static_cast<Eigen::Index>(n));
  double running = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double bootstrap = dones[k] ? 0.0 : discount * next_values[k];
    const double delta = rewards[k] + bootstrap - values[k];
    const bool chain_break = dones[k] || segment_ends[k] || k + 1 == n;
    running = delta + (chain_break ? 0.0 : discount * lambda * running);
    const auto i = static_cast<Eigen::Index>(k);
    out.raw_advantages[i] = running;
    out.returns[i] = running + values[k];
  }
  out.advantages = out.raw_advantages;
  normalize_in_place(out.advantages);
  return out;
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const bool> dones, double discount, double lambda) {
  const std::size_t n = rewards.size();
  require(values.size() == n + 1 && dones.size() == n, "gae: length mismatch");
  // std::vector<bool> has no contiguous storage.
  const std::unique_ptr<bool[]> no_ends(new bool[n]());
  return gae_segments(rewards, values.first(n), values.subspan(1), dones,
                      std::span<const bool>(no_ends.get(), n), discount, lambda);
}

void TrpoConfig::validate() const {
  if (!(discount > 0.0 && discount <= 1.0)) throw ConfigError("discount must lie in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("gae lambda must lie in [0, 1]");
  if (!(max_kl > 0.0)) throw ConfigError("max kl must be positive");
  if (cg_iterations < 1) throw ConfigError("cg iterations must be >= 1");
  if (cg_damping < 0.0) throw ConfigError("cg damping must be non-negative");
  if (backtrack_count < 1) throw ConfigError("backtrack count must be >= 1");
  if (!(backtrack_ratio > 0.0 && backtrack_ratio < 1.0))
    throw ConfigError("backtrack ratio must lie in (0, 1)");
  if (value_l2 < 0.0) throw ConfigError("value l2 must be non-negative");
  if (value_passes < 1 || value_minibatch < 1) throw ConfigError("value fit sizes must be >= 1");
  if (fvp_max_samples < 1) throw ConfigError("fvp sample count must be >= 1");
  if (!(value_lr > 0.0)) throw ConfigError("value learning rate must be positive");
}

double surrogate_loss(const GaussianPolicy& policy, const TrpoBatch& batch) {
  if (batch.states.cols() == 0) return 0.0;
  const Eigen::VectorXd lp = policy.log_prob(batch.states, batch.actions);
  const Eigen::ArrayXd ratio = (lp - batch.old_log_prob).array().exp();
  return (ratio * batch.advantages.array()).mean();
}

Eigen::VectorXd surrogate_gradient(const GaussianPolicy& policy, const TrpoBatch& batch) {
  const Eigen::Index n = batch.states.cols();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(policy.num_params()));
  if (n == 0) return grad;
  Mlp::Cache cache;
  const Eigen::MatrixXd mu = policy.mean_net.forward_batch(batch.states, &cache);
  const Eigen::ArrayXd inv_var = (-2.0 * policy.log_std).array().exp();
  const Eigen::VectorXd lp = policy.log_prob(batch.states, batch.actions);
  const Eigen::ArrayXd w =
      (lp - batch.old_log_prob).array().exp() * batch.advantages.array() / static_cast<double>(n);

  const Eigen::MatrixXd diff = batch.actions - mu;
  Eigen::MatrixXd out_grad = diff.array().colwise() * inv_var;
  out_grad.array().rowwise() *= w.transpose();
  const auto net_n = static_cast<Eigen::Index>(policy.mean_net.num_params());
  grad.head(net_n) = policy.mean_net.backward_cached(cache, out_grad);

  const Eigen::MatrixXd z2 = diff.array().square().colwise() * inv_var;
  grad.tail(policy.log_std.size()) = (z2.array() - 1.0).matrix() * w.matrix();
  return grad;
}

Eigen::VectorXd fisher_vector_product(const GaussianPolicy& policy, const Eigen::MatrixXd& states,
                                      const Eigen::VectorXd& v, double damping) {
  require(v.size() == static_cast<Eigen::Index>(policy.num_params()), "fvp: length mismatch");
  const Eigen::Index n = states.cols();
  const auto net_n = static_cast<Eigen::Index>(policy.mean_net.num_params());
  Eigen::VectorXd out(v.size());
  if (n == 0) {
    out.setZero();
  } else {
    // Gauss-Newton form of the KL Hessian at equality: J^T diag(1/sigma^2) J / N.
    Eigen::MatrixXd jv = policy.mean_net.jvp_batch(states, v.head(net_n));
    const Eigen::ArrayXd inv_var = (-2.0 * policy.log_std).array().exp();
    jv.array().colwise() *= inv_var / static_cast<double>(n);
    out.head(net_n) = policy.mean_net.backward_batch(states, jv);
    out.tail(policy.log_std.size()) = 2.0 * v.tail(policy.log_std.size());
  }
  return out + damping * v;
}

CgResult conjugate_gradient(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& op,
                            const Eigen::VectorXd& b, int iterations, double residual_tol) {
  CgResult res;
  res.x = Eigen::VectorXd::Zero(b.size());
  Eigen::VectorXd r = b;
  Eigen::VectorXd p = b;
  double rr = r.squaredNorm();
  res.residual = rr;
  for (int i = 0; i < iterations; ++i) {
    if (rr < residual_tol) break;
    const Eigen::VectorXd ap = op(p);
    const double pap = p.dot(ap);
    const double step = rr / pap;
    res.x += step * p;
    r -= step * ap;
    const double rr_new = r.squaredNorm();
    res.iterations = i + 1;
    res.residual = rr_new;
    if (!std::isfinite(step) || !res.x.allFinite())
      throw std::runtime_error("conjugate_gradient: non-finite iterate (p.Ap = " +
                               std::to_string(pap) + ")");
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  return res;
}

LineSearchResult line_search(GaussianPolicy& policy, const TrpoBatch& batch,
                             const Eigen::VectorXd& full_step, double expected_improvement,
                             const TrpoConfig& config) {
  (void)expected_improvement;
  require(full_step.allFinite(), "line_search: non-finite direction");
  const GaussianPolicy old_policy = policy;
  const Eigen::VectorXd theta_old = policy.flat();
  const double f0 = surrogate_loss(old_policy, batch);

  LineSearchResult res;
  double fraction = 1.0;
  for (int i = 0; i < config.backtrack_count; ++i, fraction *= config.backtrack_ratio) {
    policy.set_flat(theta_old + fraction * full_step);
    const double improvement = surrogate_loss(policy, batch) - f0;
    const double kl = mean_kl(old_policy, policy, batch.states);
    res.backtracks = i;
    if (std::isfinite(improvement) && improvement > 0.0 && kl <= config.max_kl) {
      res.accepted = true;
      res.kl = kl;
      res.improvement = improvement;
      res.step_fraction = fraction;
      return res;
    }
  }
  policy.set_flat(theta_old);
  return res;
}

TrpoUpdate trpo_step(GaussianPolicy& policy, const TrpoBatch& batch, const TrpoConfig& config) {
  TrpoUpdate up;
  up.surrogate_before = surrogate_loss(policy, batch);
  const Eigen::VectorXd g = surrogate_gradient(policy, batch);
  if (!g.allFinite()) throw std::runtime_error("trpo_step: non-finite policy gradient");
  const Eigen::Index n = batch.states.cols();
  Eigen::MatrixXd fvp_states;
  if (n > config.fvp_max_samples) {
    fvp_states.resize(batch.states.rows(), config.fvp_max_samples);
    for (Eigen::Index j = 0; j < config.fvp_max_samples; ++j)
      fvp_states.col(j) = batch.states.col(j * n / config.fvp_max_samples);
  } else {
    fvp_states = batch.states;
  }
  auto fvp = [&](const Eigen::VectorXd& v) {
    return fisher_vector_product(policy, fvp_states, v, config.cg_damping);
  };
  const CgResult cg = conjugate_gradient(fvp, g, config.cg_iterations, config.cg_residual_tol);
  up.cg_iterations = cg.iterations;
  const double shs = 0.5 * cg.x.dot(fvp(cg.x));
  if (!(shs > 0.0)) return up;
  const Eigen::VectorXd full_step = cg.x * std::sqrt(config.max_kl / shs);
  up.expected_improvement = g.dot(full_step);
  up.search = line_search(policy, batch, full_step, up.expected_improvement, config);
  return up;
}

ValueNet::ValueNet(Mlp net, double lr) : net_(std::move(net)), optimizer_(net_.num_params(), lr) {
  if (net_.output_dim() != 1) throw std::invalid_argument("ValueNet: scalar output required");
}

ValueNet ValueNet::create(int obs_dim, const std::vector<int>& hidden, double lr, Rng& rng) {
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return ValueNet(Mlp::initialized(sizes, OutputActivation::Identity, rng, 1.0), lr);
}

Eigen::VectorXd ValueNet::predict(const Eigen::MatrixXd& states) const {
  return (net_.forward_batch(states).row(0).transpose().array() * scale_ + shift_).matrix();
}

void ValueNet::set_state(Mlp net, double shift, double scale) {
  if (net.sizes() != net_.sizes()) throw std::invalid_argument("ValueNet::set_state: layout");
  if (!(scale > 0.0)) throw std::invalid_argument("ValueNet::set_state: scale must be positive");
  net_ = std::move(net);
  shift_ = shift;
  scale_ = scale;
}

void ValueNet::retarget(double shift, double scale) {
  auto& last = net_.layers().back();
  last.weight *= scale_ / scale;
  last.bias = ((last.bias.array() * scale_ + shift_ - shift) / scale).matrix();
  shift_ = shift;
  scale_ = scale;
}

double ValueNet::fit(const Eigen::MatrixXd& states, const Eigen::VectorXd& returns, double l2,
                     int passes, int minibatch, Rng& rng) {
  const Eigen::Index n = states.cols();
  if (n == 0) throw std::invalid_argument("ValueNet::fit: empty batch");
  require(returns.size() == n, "ValueNet::fit: length mismatch");
  const double mean = returns.mean();
  const double sd = std::sqrt((returns.array() - mean).square().mean());
  retarget(mean, sd > 1e-8 ? sd : 1.0);
  const Eigen::VectorXd targets = (returns.array() - shift_) / scale_;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::Index m = std::min<Eigen::Index>(minibatch, n);
  Eigen::MatrixXd xb(states.rows(), m);
  Eigen::VectorXd yb(m);
  Eigen::VectorXd theta = net_.flatten();
  for (int pass = 0; pass < passes; ++pass) {
    if (m < n) {
      // Partial Fisher-Yates: the first m entries become a uniform sample.
      for (Eigen::Index i = 0; i < m; ++i) {
        std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
      }
    }
    for (Eigen::Index i = 0; i < m; ++i) {
      xb.col(i) = states.col(order[static_cast<std::size_t>(i)]);
      yb[i] = targets[order[static_cast<std::size_t>(i)]];
    }
    Mlp::Cache cache;
    const Eigen::MatrixXd pred = net_.forward_batch(xb, &cache);
    const Eigen::MatrixXd resid = (2.0 / static_cast<double>(m)) * (pred.row(0) - yb.transpose());
    const Eigen::VectorXd grad = net_.backward_cached(cache, resid) + 2.0 * l2 * theta;
    optimizer_.step(theta, grad);
    net_.assign(theta);
  }
  const double mse = (predict(states) - returns).squaredNorm() / static_cast<double>(n);
  const double loss = mse + l2 * theta.squaredNorm();
  if (!std::isfinite(loss)) throw std::runtime_error("ValueNet::fit: non-finite loss");
  return loss;
}

double fit_value(ValueNet& value, const Eigen::MatrixXd& states, const Eigen::VectorXd& returns,
                 const TrpoConfig& config, Rng& rng) {
  return value.fit(states, returns, config.value_l2, config.value_passes, config.value_minibatch,
                   rng);
}

}  // namespace kirl
