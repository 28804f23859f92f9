#pragma once

#include <cstddef>
#include <deque>

#include "kirl/traffic_net.hpp"

namespace kirl {

/// Intelligent Driver Model parameters. Defaults are typical highway values.
struct IdmParams {
  double v0 = 30.0;        // desired velocity, m/s
  double T0 = 1.0;         // safe time headway, s
  double a_max = 1.0;      // maximum acceleration, m/s^2
  double b = 1.5;          // comfortable deceleration, m/s^2
  double delta_exp = 4.0;  // acceleration exponent
  double s0 = 2.0;         // minimum desired gap, m
  double noise_std = 0.2;  // m/s^2
  // Floor applied to the noisy output of human drivers.
  double emergency_decel = 3.0;

  void validate() const;
};

/// Desired gap s*(v, dv) with dv = v - v_lead.
double idm_desired_gap(double v, double v_lead, const IdmParams& p);

/// Deterministic IDM acceleration. Throws std::domain_error when gap <= 0.
double idm_accel(double v, double v_lead, double gap, const IdmParams& p);

/// idm_accel plus N(0, noise_std^2), clipped to [-emergency_decel, a_max].
double idm_accel_noisy(double v, double v_lead, double gap, const IdmParams& p, Rng& rng);

struct PiParams {
  double v_catch = 1.0;    // maximum catch-up velocity, m/s
  double s_lower = 7.0;    // m
  double s_upper = 30.0;   // m
  double dx_safe = 4.0;    // safety distance, m
  std::size_t window = 100;  // averaging window, steps

  void validate() const;
};

/// Command-velocity state of the PI-with-saturation controller.
class PiState {
 public:
  explicit PiState(std::size_t window = 100, double v_cmd = 0.0);

  /// Rebuilds a controller from a summary: `count` samples averaging `mean_speed`.
  static PiState from_summary(std::size_t window, double mean_speed, std::size_t count,
                              double v_cmd);

  void push_speed(double v);
  double mean_speed() const;
  std::size_t history_size() const { return history_.size(); }
  std::size_t window() const { return window_; }
  double v_cmd() const { return v_cmd_; }
  void set_v_cmd(double v) { v_cmd_ = v; }

 private:
  std::size_t window_;
  std::deque<double> history_;
  double sum_ = 0.0;
  double v_cmd_ = 0.0;
};

/// v* = v_bar + v_catch * clamp((gap - s_l) / (s_u - s_l), 0, 1).
double pi_target_velocity(double v_bar, double gap, const PiParams& p);

struct PiWeights {
  double alpha = 0.0;
  double beta = 1.0;
};

PiWeights pi_weights(double gap, const PiParams& p);

/// Pushes v_ego into the history, then blends target, leader and previous command.
double pi_update_command(PiState& state, double gap, double v_lead, double v_ego,
                         const PiParams& p);

/// clip((v_cmd - v) / dt, a_min, a_max).
double command_to_accel(double v_cmd, double v, double dt, double a_min = -1.0,
                        double a_max = 1.0);

/// clip(a_h + a_theta, -bound, bound).
double compose_action(double a_h, double a_theta, double bound = 1.0);

}  // namespace kirl
