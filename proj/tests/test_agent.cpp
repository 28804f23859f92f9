#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "kirl/agent.hpp"

using namespace kirl;
namespace fs = std::filesystem;

namespace {

// Small but complete configuration so a few iterations run quickly.
TrainConfig small_config(AgentVariant v, std::uint64_t seed = 0) {
  TrainConfig c;
  c.variant = v;
  c.seed = seed;
  c.iterations = 3;
  c.steps_per_iteration = 400;
  c.env.scenario.warmup = 100;
  c.env.scenario.horizon = 300;
  c.rollout.branch_starts = 40;
  c.model_steps = 20;
  c.min_validation = 32;
  c.trpo.value_passes = 5;
  return c;
}

double c_oracle(double r, double g, double ep, double em, int k) {
  const double gk = std::pow(g, k);
  return 2.0 * r * (std::pow(g, k + 1) * ep / ((1 - g) * (1 - g)) + gk * ep / (1 - g) + k * em / (1 - g));
}

Transition tagged(Source s, double reward = 0.0) {
  Transition t;
  t.source = s;
  t.reward = reward;
  return t;
}

}  // namespace

TEST_CASE("variant names round-trip") {
  for (auto v : {AgentVariant::Proposed, AgentVariant::VanillaTrpo, AgentVariant::MbTrpo,
                 AgentVariant::NoInitialPolicy})
    CHECK(agent_variant_from_string(to_string(v)) == v);
  CHECK_THROWS_AS(agent_variant_from_string("ppo"), ConfigError);
  CHECK(traits_of(AgentVariant::MbTrpo).base == BaseModel::Kinematic);
  CHECK_FALSE(traits_of(AgentVariant::VanillaTrpo).uses_model);
  CHECK_FALSE(traits_of(AgentVariant::NoInitialPolicy).physics_policy);
}

TEST_CASE("buffers keep one source and evict oldest first") {
  ExperienceBuffer actual(3, Source::Actual);
  CHECK_THROWS(actual.push(tagged(Source::Virtual)));
  for (int i = 0; i < 5; ++i) actual.push(tagged(Source::Actual, i));
  CHECK(actual.size() == 3);
  CHECK(actual[0].reward == 2.0);
  const auto last = actual.recent(2);
  REQUIRE(last.size() == 2);
  CHECK(last[0].reward == 3.0);
  CHECK(last[1].reward == 4.0);
  CHECK(actual.recent(10).size() == 3);
  CHECK_THROWS(actual.slice(2, 2));

  ExperienceBuffer virt(3, Source::Virtual);
  CHECK_THROWS(virt.push(tagged(Source::Actual)));
}

TEST_CASE("c_bound closed form") {
  CHECK(c_bound({1.0, 0.9, 0.01, 0.01, 1}) == doctest::Approx(2.0).epsilon(1e-12));
  for (int k : {0, 1, 5, 500}) CHECK(c_bound({3.0, 0.995, 0.0, 0.0, k}) == 0.0);
  CHECK_THROWS_AS(c_bound({1.0, 1.0, 0.1, 0.1, 1}), std::domain_error);

  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 0.5), g(0.5, 0.999), r(0.0, 5.0);
  std::uniform_int_distribution<int> kk(1, 500);
  for (int i = 0; i < 2000; ++i) {
    const double rr = r(rng), gg = g(rng), ep = u(rng), em = u(rng);
    const int k = kk(rng);
    const double c = c_bound({rr, gg, ep, em, k});
    CHECK(c == doctest::Approx(c_oracle(rr, gg, ep, em, k)).epsilon(1e-10));
    CHECK(c_bound({rr, gg, ep + 0.01, em, k}) >= c);
    CHECK(c_bound({rr, gg, ep, em + 0.01, k}) >= c);
  }
}

TEST_CASE("c_bound trades policy shift against model error along k") {
  for (double e : {1e-4, 0.01, 0.3}) {
    double grow = -1.0, shrink = 1e300;
    for (int k = 1; k <= 500; ++k) {
      const double up = c_bound({1.0, 0.995, 0.0, e, k});
      const double down = c_bound({1.0, 0.995, e, 0.0, k});
      CHECK(up > grow);
      CHECK(down < shrink);
      grow = up;
      shrink = down;
    }
  }
}

TEST_CASE("policy shift proxy") {
  Rng rng(2);
  GaussianPolicy a;
  a.mean_net = Mlp({1, 1}, OutputActivation::Identity);
  a.log_std = Eigen::VectorXd::Zero(1);
  GaussianPolicy b = a;
  const Eigen::MatrixXd s = Eigen::MatrixXd::Ones(1, 1);
  CHECK(estimate_policy_shift(a, b, s) == 0.0);
  b.mean_net.layers()[0].bias[0] = 1.0;
  CHECK(estimate_policy_shift(a, b, s) == doctest::Approx(0.5));

  for (int i = 0; i < 50; ++i) {
    const GaussianPolicy p = GaussianPolicy::create(5, 1, {8}, -1.0, rng, 1.0);
    const GaussianPolicy q = GaussianPolicy::create(5, 1, {8}, -1.2, rng, 1.0);
    CHECK(estimate_policy_shift(p, q, Eigen::MatrixXd::Random(5, 10)) >= 0.0);
  }
}

TEST_CASE("zero-initialized residual reproduces the physics controller") {
  const Trainer trainer(small_config(AgentVariant::Proposed));
  EnvConfig env = trainer.config().env;
  env.scenario.horizon = 3000;
  TrafficEnv e(env);
  Rng rng(3);
  const PolicyPair pair = trainer.policy_pair();
  const CollectResult col = collect_actual(e, pair, 3000, rng, true);
  CHECK(col.collisions == 0);
  CHECK(col.transitions.size() == 3000);
  // One CAV, one episode: replay the PI controller alongside.
  PiState oracle(pair.pi.window, col.transitions.front().s[0] * env.scales.velocity);
  for (std::size_t i = 0; i < col.transitions.size(); ++i) {
    const Transition& t = col.transitions[i];
    CHECK(t.action == 0.0);
    const double a_h = physics_action(oracle, t.s, pair, env.scales);
    CHECK(t.applied == compose_action(a_h, 0.0, pair.action_bound));
    // Before the window fills, the stored summary restores the controller up to rounding.
    if (i + 1 < pair.pi.window) {
      PiState pi = restore_pi(t.pi, pair.pi.window);
      const double b = compose_action(physics_action(pi, t.s, pair, env.scales), 0.0, pair.action_bound);
      CHECK(std::abs(t.applied - b) < 1e-12);
    }
  }
}

TEST_CASE("vanilla TRPO acts with raw samples and never fills the virtual buffer") {
  Trainer trainer(small_config(AgentVariant::VanillaTrpo));
  TrafficEnv e(trainer.config().env);
  Rng rng(4);
  const CollectResult col = collect_actual(e, trainer.policy_pair(), 300, rng);
  for (const auto& t : col.transitions) CHECK(t.applied == std::clamp(t.action, -1.0, 1.0));

  CHECK_FALSE(trainer.model().has_value());
  for (int i = 0; i < 3; ++i) {
    const IterationMetrics m = trainer.iterate();
    CHECK(trainer.virtual_buffer().empty());
    CHECK(m.virtual_count == 0);
  }
}

TEST_CASE("model-based variants fill both buffers with the right tags") {
  for (auto v : {AgentVariant::Proposed, AgentVariant::MbTrpo, AgentVariant::NoInitialPolicy}) {
    CAPTURE(to_string(v));
    Trainer trainer(small_config(v));
    REQUIRE(trainer.model().has_value());
    CHECK(trainer.model()->config.base == traits_of(v).base);
    for (int i = 0; i < 2; ++i) {
      const IterationMetrics m = trainer.iterate();
      CHECK(m.eps_m >= 0.0);
      CHECK(m.k_star >= 1);
      CHECK(m.virtual_count > 0);
      CHECK(m.env_steps == 400L * (i + 1));
      if (m.accepted) CHECK(m.kl <= 0.01);
      CHECK(m.c_bound >= 0.0);
    }
    for (std::size_t i = 0; i < trainer.actual_buffer().size(); ++i)
      CHECK(trainer.actual_buffer()[i].source == Source::Actual);
    for (std::size_t i = 0; i < trainer.virtual_buffer().size(); ++i)
      CHECK(trainer.virtual_buffer()[i].source == Source::Virtual);
  }
}

TEST_CASE("same seed, same metric stream") {
  Trainer a(small_config(AgentVariant::Proposed, 9)), b(small_config(AgentVariant::Proposed, 9));
  for (int i = 0; i < 3; ++i) {
    const IterationMetrics x = a.iterate(), y = b.iterate();
    CHECK(x.episode_return == y.episode_return);
    CHECK(x.speed_std == y.speed_std);
    CHECK(x.eps_m == y.eps_m);
    CHECK(x.kl == y.kl);
    CHECK(x.c_bound == y.c_bound);
  }
  CHECK(a.policy().flat() == b.policy().flat());
}

TEST_CASE("checkpoint bundles round-trip") {
  const fs::path dir = fs::temp_directory_path() / "kirl_agent_ckpt";
  fs::remove_all(dir);
  Trainer a(small_config(AgentVariant::Proposed, 5));
  a.iterate();
  const fs::path bundle = a.save_checkpoint(dir);
  CHECK(bundle.filename() == "iter_0001");
  CHECK(fs::exists(bundle / "policy.bin"));
  CHECK(fs::exists(bundle / "state.json"));
  CHECK_FALSE(fs::exists(dir / "iter_0001.tmp"));

  Trainer b(small_config(AgentVariant::Proposed, 77));
  b.load_checkpoint(bundle);
  CHECK(b.iteration() == 1);
  CHECK(b.policy().flat() == a.policy().flat());
  CHECK(b.value().net() == a.value().net());
  CHECK(b.model()->residual == a.model()->residual);
  CHECK(b.model()->out_scale == a.model()->out_scale);
  CHECK(load_bundle_policy(bundle).flat() == a.policy().flat());

  Trainer wrong(small_config(AgentVariant::VanillaTrpo));
  CHECK_THROWS(wrong.load_checkpoint(bundle));
  fs::remove_all(dir);
}

TEST_CASE("invalid training configs are rejected") {
  TrainConfig c = small_config(AgentVariant::Proposed);
  c.iterations = 0;
  CHECK_THROWS_AS(Trainer{c}, ConfigError);
  c = small_config(AgentVariant::Proposed);
  c.trpo.max_kl = 0.0;
  CHECK_THROWS_AS(Trainer{c}, ConfigError);
  c = small_config(AgentVariant::Proposed);
  c.validation_fraction = 1.5;
  CHECK_THROWS_AS(Trainer{c}, ConfigError);
}
