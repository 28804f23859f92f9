#include <doctest.h>

#include <cmath>
#include <random>

#include "kirl/virtual_model.hpp"

using namespace kirl;

namespace {

double equilibrium_gap(double v, const IdmParams& p) {
  double lo = 1e-6, hi = 1e6;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (idm_accel(v, v, mid, p) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

LocalObs equilibrium_obs(double v, const ModelConfig& c) {
  const double g = equilibrium_gap(v, c.idm);
  return encode_local({v, v, v, g, g}, c.scales);
}

LocalObs random_obs(Rng& rng) {
  std::uniform_real_distribution<double> v(2.0, 12.0), dv(-1.0, 1.0), g(8.0, 40.0);
  const double ve = v(rng);
  return encode_local({ve, ve + dv(rng), ve + dv(rng), g(rng), g(rng)}, ObsScales{});
}

// Transitions whose dynamics the IDM base reproduces exactly.
std::vector<Transition> base_consistent_data(const ModelConfig& c, int n, Rng& rng) {
  std::uniform_real_distribution<double> a(-1.0, 1.0);
  std::vector<Transition> out;
  for (int i = 0; i < n; ++i) {
    Transition t;
    t.s = random_obs(rng);
    t.applied = a(rng);
    t.action = t.applied;
    const Prediction p = base_predict(c, t.s, t.applied);
    t.s_next = p.next;
    t.reward = p.reward;
    t.done = p.terminal;
    out.push_back(t);
  }
  return out;
}

DynamicsModel zero_model(const ModelConfig& c) {
  Rng rng(0);
  DynamicsModel m = DynamicsModel::create(c, rng);
  m.residual.assign(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.residual.num_params())));
  return m;
}

}  // namespace

TEST_CASE("base model fixed point and one-step kinematics") {
  const ModelConfig c;
  const LocalObs s = equilibrium_obs(8.0, c);
  const Prediction p = base_predict(c, s, 0.0);
  for (int i = 0; i < kLocalObsDim; ++i) CHECK(p.next[i] == doctest::Approx(s[i]).epsilon(1e-9));
  CHECK_FALSE(p.terminal);

  const Prediction q = base_predict(c, s, 1.0);
  const double dt = c.dt, vs = c.scales.velocity, gs = c.scales.gap;
  CHECK(q.next[0] == doctest::Approx(s[0] + dt / vs));
  CHECK(q.next[1] == doctest::Approx(s[1] - dt / vs));
  CHECK(q.next[2] == doctest::Approx(s[2] - dt / vs));
  CHECK(q.next[3] == doctest::Approx(s[3] - dt * dt / gs));
  // The follower reacts only from the next step on; its gap grows by the ego's extra advance.
  CHECK(q.next[4] == doctest::Approx(s[4] + dt * dt / gs));
}

TEST_CASE("closing fast on a short gap is terminal") {
  const ModelConfig c;
  const LocalObs s = encode_local({15.0, 0.0, 15.0, 0.5, 20.0}, c.scales);
  const Prediction p = base_predict(c, s, 1.0);
  CHECK(p.terminal);
  CHECK(p.reward < -c.reward.collision_penalty + 1.0);
}

TEST_CASE("kinematic base holds neighbour speeds") {
  ModelConfig c;
  c.base = BaseModel::Kinematic;
  const LocalObs s = encode_local({8.0, 6.0, 9.0, 5.0, 20.0}, c.scales);
  const Prediction p = base_predict(c, s, 0.5);
  const LocalContext n = decode_local(p.next, c.scales);
  CHECK(n.v_ego == doctest::Approx(8.05));
  CHECK(n.v_lead == doctest::Approx(6.0));
  CHECK(n.v_follow == doctest::Approx(9.0));
}

TEST_CASE("zero residual reproduces the base model") {
  const ModelConfig c;
  const DynamicsModel m = zero_model(c);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const LocalObs s = random_obs(rng);
    const Prediction a = predict(m, s, 0.3), b = base_predict(c, s, 0.3);
    CHECK(a.next == b.next);
    CHECK(a.reward == b.reward);
  }
}

TEST_CASE("prediction is base plus scaled residual") {
  ModelConfig c;
  c.output_gain = 0.5;
  Rng rng(2);
  DynamicsModel m = DynamicsModel::create(c, rng);
  m.out_scale << 1e-3, 2e-3, 3e-3, 1e-3, 1e-3, 0.1;
  for (int i = 0; i < 200; ++i) {
    const LocalObs s = random_obs(rng);
    const Prediction base = base_predict(c, s, -0.2);
    const Prediction full = predict(m, s, -0.2);
    const Eigen::VectorXd r = residual_output(m, s, -0.2);
    for (int k = 0; k < kLocalObsDim; ++k)
      CHECK(std::abs((full.next[k] - base.next[k]) / m.out_scale[k] - r[k]) < 1e-9);
    CHECK(std::abs((full.reward - base.reward) / m.out_scale[5] - r[5]) < 1e-9);
  }
}

TEST_CASE("batched prediction agrees with single prediction") {
  ModelConfig c;
  c.output_gain = 0.5;
  Rng rng(3);
  const DynamicsModel m = DynamicsModel::create(c, rng);
  Eigen::MatrixXd s(kLocalObsDim, 20);
  std::vector<double> a(20);
  for (int j = 0; j < 20; ++j) {
    const LocalObs o = random_obs(rng);
    for (int i = 0; i < kLocalObsDim; ++i) s(i, j) = o[i];
    a[j] = 0.05 * j - 0.5;
  }
  const auto batch = predict_batch(m, s, a);
  for (int j = 0; j < 20; ++j) {
    LocalObs o;
    for (int i = 0; i < kLocalObsDim; ++i) o[i] = s(i, j);
    const Prediction p = predict(m, o, a[j]);
    for (int i = 0; i < kLocalObsDim; ++i) CHECK(batch[j].next[i] == doctest::Approx(p.next[i]).epsilon(1e-12));
  }
}

TEST_CASE("residual training") {
  Rng rng(4);
  SUBCASE("exact base: residual decays and eps_m is small") {
    const ModelConfig c;
    DynamicsModel m = DynamicsModel::create(c, rng);
    auto data = base_consistent_data(c, 4096, rng);
    fit_normalization(m, data);
    const auto val = base_consistent_data(c, 512, rng);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::vector<Transition> batch(256);
    for (int step = 0; step < 2000; ++step) {
      for (auto& t : batch) t = data[pick(rng)];
      train_residual(m, batch);
    }
    CHECK(estimate_model_error(m, val) < 0.05);
    double worst = 0.0;
    for (const auto& t : val) worst = std::max(worst, residual_output(m, t.s, t.applied).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-2);
  }
  SUBCASE("constant offset is absorbed by the bias") {
    ModelConfig c;
    c.hidden = {};
    c.learning_rate = 0.05;
    DynamicsModel m = DynamicsModel::create(c, rng);
    auto data = base_consistent_data(c, 512, rng);
    fit_normalization(m, data);
    for (auto& t : data) {
      t.s_next[0] += 0.5 * m.out_scale[0];
      t.reward += 0.25 * m.out_scale[5];
    }
    std::vector<double> losses;
    for (int step = 0; step < 600; ++step) losses.push_back(train_residual(m, data));
    CHECK(losses.back() < 1e-6);
    const Eigen::VectorXd bias = m.residual.layers().back().bias;
    CHECK(bias[0] == doctest::Approx(0.5).epsilon(1e-3));
    CHECK(bias[5] == doctest::Approx(0.25).epsilon(1e-3));
    // Momentum makes single steps oscillate; windowed averages still never rise.
    for (std::size_t w = 100; w + 100 <= losses.size(); w += 100) {
      double prev = 0.0, cur = 0.0;
      for (std::size_t i = 0; i < 100; ++i) {
        prev += losses[w - 10 + i];
        cur += losses[w + i];
      }
      CHECK(cur <= prev);
    }
  }
  SUBCASE("virtual data is refused") {
    const ModelConfig c;
    DynamicsModel m = DynamicsModel::create(c, rng);
    auto data = base_consistent_data(c, 8, rng);
    data[3].source = Source::Virtual;
    CHECK_THROWS(train_residual(m, data));
    CHECK_THROWS(estimate_model_error(m, data));
  }
}

TEST_CASE("model error estimator") {
  const ModelConfig c;
  DynamicsModel m = zero_model(c);
  Rng rng(5);
  auto data = base_consistent_data(c, 64, rng);
  m.out_scale << 0.01, 0.02, 0.03, 0.04, 0.05, 0.5;
  CHECK(estimate_model_error(m, data) == 0.0);
  for (auto& t : data) t.s_next[2] += m.out_scale[2];
  CHECK(estimate_model_error(m, data) == doctest::Approx(1.0 / std::sqrt(6.0)).epsilon(1e-9));
  CHECK(m.eps_m >= 0.0);
  CHECK_THROWS_AS(estimate_model_error(m, std::span<const Transition>{}), ConfigError);
}

TEST_CASE("rollout length") {
  const RolloutConfig c;
  CHECK(rollout_length(0.1, c) == 20);
  CHECK(rollout_length(0.004, c) == 500);
  CHECK(rollout_length(0.0, c) == 500);
  CHECK(rollout_length(1e-300, c) == 500);
  CHECK(rollout_length(50.0, c) == 1);
  Rng rng(6);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 5000; ++i) {
    const double a = u(rng), b = u(rng);
    const double lo = std::min(a, b), hi = std::max(a, b);
    CHECK(rollout_length(hi, c) <= rollout_length(lo, c));
    CHECK(rollout_length(lo, c) <= c.k_max);
    const int oracle = std::max(1, std::min(c.k_max, static_cast<int>(std::floor(c.kappa / lo))));
    CHECK(rollout_length(lo, c) == oracle);
  }
}

TEST_CASE("branched rollouts") {
  const ModelConfig c;
  const DynamicsModel m = zero_model(c);
  PolicyPair pair;
  pair.use_physics = false;
  Rng rng(7);

  std::vector<Transition> starts(30);
  for (auto& t : starts) t.s = equilibrium_obs(6.0, c);

  SUBCASE("k = 1") {
    const auto out = branched_rollout(m, pair, starts, 1, rng);
    CHECK(out.size() == starts.size());
    for (const auto& t : out) {
      CHECK(t.segment_end);
      CHECK(t.source == Source::Virtual);
    }
  }
  SUBCASE("equilibrium stays put") {
    const auto out = branched_rollout(m, pair, starts, 25, rng);
    CHECK(out.size() == starts.size() * 25);
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (int k = 0; k < kLocalObsDim; ++k) CHECK(out[i].s_next[k] == doctest::Approx(starts[0].s[k]).epsilon(1e-9));
      CHECK(out[i].segment_end == ((i + 1) % 25 == 0));
    }
  }
  SUBCASE("length bound with terminal branches") {
    std::vector<Transition> mixed = starts;
    for (std::size_t j = 0; j < mixed.size(); j += 3) mixed[j].s = encode_local({15.0, 0.0, 15.0, 2.0, 20.0}, c.scales);
    const auto out = branched_rollout(m, pair, mixed, 10, rng);
    CHECK(out.size() <= mixed.size() * 10);
    int dones = 0;
    for (const auto& t : out) dones += t.done;
    CHECK(dones == 10);
  }
}
