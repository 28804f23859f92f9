#include "kirl/controllers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kirl {

void IdmParams::validate() const {
  if (!(v0 > 0.0)) throw ConfigError("IDM v0 must be positive");
  if (!(T0 > 0.0) || !(a_max > 0.0) || !(b > 0.0) || !(s0 > 0.0))
    throw ConfigError("IDM parameters must be positive");
  if (!(delta_exp >= 1.0)) throw ConfigError("IDM acceleration exponent must be >= 1");
  if (noise_std < 0.0) throw ConfigError("IDM noise std must be non-negative");
  if (!(emergency_decel > 0.0)) throw ConfigError("IDM emergency deceleration must be positive");
}

double idm_desired_gap(double v, double v_lead, const IdmParams& p) {
  const double dv = v - v_lead;
  return p.s0 + std::max(0.0, v * p.T0 + v * dv / (2.0 * std::sqrt(p.a_max * p.b)));
}

double idm_accel(double v, double v_lead, double gap, const IdmParams& p) {
  if (!(gap > 0.0)) throw std::domain_error("idm_accel: gap must be positive");
  if (!(p.v0 > 0.0)) throw ConfigError("IDM v0 must be positive");
  const double s_star = idm_desired_gap(v, v_lead, p);
  const double interaction = std::isinf(gap) ? 0.0 : (s_star / gap) * (s_star / gap);
  return p.a_max * (1.0 - std::pow(v / p.v0, p.delta_exp) - interaction);
}

double idm_accel_noisy(double v, double v_lead, double gap, const IdmParams& p, Rng& rng) {
  double a = idm_accel(v, v_lead, gap, p);
  if (p.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, p.noise_std);
    a += noise(rng);
    return std::clamp(a, -p.emergency_decel, p.a_max);
  }
  return a;
}

void PiParams::validate() const {
  if (!(s_lower < s_upper)) throw ConfigError("PI thresholds require s_l < s_u");
  if (!(v_catch > 0.0) || !(s_lower > 0.0) || !(dx_safe > 0.0))
    throw ConfigError("PI parameters must be positive");
  if (window == 0) throw ConfigError("PI averaging window must be at least one step");
}

PiState::PiState(std::size_t window, double v_cmd) : window_(window), v_cmd_(std::max(0.0, v_cmd)) {
  if (window_ == 0) throw ConfigError("PI averaging window must be at least one step");
}

PiState PiState::from_summary(std::size_t window, double mean_speed, std::size_t count,
                              double v_cmd) {
  PiState s(window, v_cmd);
  for (std::size_t i = 0; i < std::min(count, window); ++i) s.push_speed(mean_speed);
  return s;
}

void PiState::push_speed(double v) {
  history_.push_back(v);
  sum_ += v;
  if (history_.size() > window_) {
    sum_ -= history_.front();
    history_.pop_front();
  }
}

double PiState::mean_speed() const {
  if (history_.empty()) return 0.0;
  return sum_ / static_cast<double>(history_.size());
}

double pi_target_velocity(double v_bar, double gap, const PiParams& p) {
  const double ratio = std::clamp((gap - p.s_lower) / (p.s_upper - p.s_lower), 0.0, 1.0);
  return v_bar + p.v_catch * ratio;
}

PiWeights pi_weights(double gap, const PiParams& p) {
  PiWeights w;
  w.alpha = std::clamp((gap - p.dx_safe) / 2.0, 0.0, 1.0);
  w.beta = 1.0 - 0.5 * w.alpha;
  return w;
}

double pi_update_command(PiState& state, double gap, double v_lead, double v_ego,
                         const PiParams& p) {
  state.push_speed(v_ego);
  const double target = pi_target_velocity(state.mean_speed(), gap, p);
  const PiWeights w = pi_weights(gap, p);
  const double next =
      w.beta * (w.alpha * target + (1.0 - w.alpha) * v_lead) + (1.0 - w.beta) * state.v_cmd();
  state.set_v_cmd(std::max(0.0, next));
  return state.v_cmd();
}

double command_to_accel(double v_cmd, double v, double dt, double a_min, double a_max) {
  if (!(dt > 0.0)) throw std::invalid_argument("command_to_accel: dt must be positive");
  return std::clamp((v_cmd - v) / dt, a_min, a_max);
}

double compose_action(double a_h, double a_theta, double bound) {
  return std::clamp(a_h + a_theta, -bound, bound);
}

}  // namespace kirl
