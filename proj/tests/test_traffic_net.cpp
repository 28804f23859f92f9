#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kirl/rl_env.hpp"
#include "kirl/traffic_net.hpp"

using namespace kirl;

namespace {

VehicleState car(std::uint32_t id, double pos, double v = 0.0, Road road = Road::Main) {
  VehicleState s;
  s.id = VehicleId{id};
  s.pos = pos;
  s.velocity = v;
  s.road = road;
  return s;
}

Network ring_of(double length) {
  Network n;
  n.kind = ScenarioKind::Ring;
  n.length = length;
  return n;
}

}  // namespace

TEST_CASE("ring length is drawn from the configured range and replays") {
  ScenarioConfig c = ScenarioConfig::ring();
  Rng a(7), b(7);
  const Network n1 = build_network(c, a);
  const Network n2 = build_network(c, b);
  CHECK(n1.length >= 220.0);
  CHECK(n1.length <= 270.0);
  CHECK(n1.length == n2.length);

  c.ring_length = {250.0, 250.0};
  Rng r(1);
  CHECK(build_network(c, r).length == 250.0);
}

TEST_CASE("figure-eight has two equal loops") {
  ScenarioConfig c = ScenarioConfig::figure_eight();
  Rng rng(3);
  const Network n = build_network(c, rng);
  CHECK(n.loop_radius >= 32.0);
  CHECK(n.loop_radius <= 35.0);
  CHECK(n.length == doctest::Approx(4.0 * std::numbers::pi * n.loop_radius).epsilon(1e-12));
  CHECK(n.conflict_zones[1].begin - n.conflict_zones[0].begin ==
        doctest::Approx(n.length / 2.0).epsilon(1e-12));
}

TEST_CASE("invalid ranges are rejected") {
  ScenarioConfig c = ScenarioConfig::ring();
  Rng rng(0);
  c.ring_length = {270.0, 220.0};
  CHECK_THROWS_AS(build_network(c, rng), ConfigError);
  c.ring_length = {200.0, 250.0};
  CHECK_THROWS_AS(build_network(c, rng), ConfigError);
  c = ScenarioConfig::figure_eight();
  c.loop_radius = {30.0, 33.0};
  CHECK_THROWS_AS(build_network(c, rng), ConfigError);
}

TEST_CASE("step_kinematics arithmetic") {
  const Network net = ring_of(100.0);
  SUBCASE("wrap") {
    const std::vector<VehicleState> s{car(0, 99.5, 10.0)};
    const std::vector<double> a{0.0};
    CHECK(step_kinematics(net, s, a, 0.1)[0].pos == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("velocity clamps at zero") {
    const std::vector<VehicleState> s{car(0, 40.0, 0.05)};
    const std::vector<double> a{-1.0};
    const auto n = step_kinematics(net, s, a, 0.1);
    CHECK(n[0].velocity == 0.0);
    CHECK(n[0].pos == 40.0);
  }
  SUBCASE("semi-implicit Euler") {
    const std::vector<VehicleState> s{car(0, 40.0, 10.0)};
    const std::vector<double> a{1.0};
    const auto n = step_kinematics(net, s, a, 0.1);
    CHECK(n[0].velocity == doctest::Approx(10.1).epsilon(1e-12));
    CHECK(n[0].pos == doctest::Approx(41.01).epsilon(1e-12));
  }
  SUBCASE("size mismatch") {
    const std::vector<VehicleState> s{car(0, 40.0)};
    const std::vector<double> a{};
    CHECK_THROWS(step_kinematics(net, s, a, 0.1));
  }
}

TEST_CASE("leader on a ring") {
  const Network net = ring_of(100.0);
  const ScenarioConfig c = ScenarioConfig::ring();
  const std::vector<VehicleState> s{car(0, 0.0), car(1, 10.0, 3.0)};
  const LeaderInfo l = leader_of(net, s, VehicleId{0}, c);
  REQUIRE(l.leader);
  CHECK(l.leader->value == 1u);
  CHECK(l.gap == doctest::Approx(5.0));
  CHECK(l.leader_velocity == 3.0);

  const std::vector<VehicleState> alone{car(0, 12.0)};
  const LeaderInfo self = leader_of(net, alone, VehicleId{0}, c);
  REQUIRE(self.leader);
  CHECK(self.leader->value == 0u);
  CHECK(self.gap == doctest::Approx(95.0));
}

TEST_CASE("figure-eight yields to the reservation holder") {
  ScenarioConfig c = ScenarioConfig::figure_eight();
  c.loop_radius = {33.0, 33.0};
  Rng rng(0);
  const Network net = build_network(c, rng);
  const double entry = net.conflict_zones[0].begin;
  // Ego 20 m before the first crossing; the holder sits inside the other pass
  // of the same crossing.
  const std::vector<VehicleState> s{car(0, entry - 20.0, 5.0),
                                    car(1, net.conflict_zones[1].begin + 2.0, 5.0)};
  RightOfWay row;
  row.holder = VehicleId{1};
  const LeaderInfo l = leader_of(net, s, VehicleId{0}, c, &row);

  // Oracle: the nearest of the real leader and every visible zone entrance.
  double expect_gap = std::fmod(s[1].pos - s[0].pos + net.length, net.length) - s[1].length;
  bool expect_virtual = false;
  for (const auto& z : net.conflict_zones) {
    const double d = std::fmod(z.begin - s[0].pos + net.length, net.length);
    if (d > 0.0 && d <= c.yield_visibility && d < expect_gap) {
      expect_gap = d;
      expect_virtual = true;
    }
  }
  CHECK(expect_virtual);
  CHECK(l.is_virtual == expect_virtual);
  CHECK(l.gap == doctest::Approx(20.0));
  CHECK(l.gap == doctest::Approx(expect_gap));
  CHECK(l.leader_velocity == 0.0);

  row.holder = VehicleId{0};
  CHECK_FALSE(leader_of(net, s, VehicleId{0}, c, &row).is_virtual);
}

TEST_CASE("right of way goes to the first vehicle in the window") {
  ScenarioConfig c = ScenarioConfig::figure_eight();
  c.loop_radius = {33.0, 33.0};
  Rng rng(0);
  const Network net = build_network(c, rng);
  RightOfWay row;
  std::vector<VehicleState> s{car(0, net.conflict_zones[0].begin - 10.0),
                              car(1, net.conflict_zones[1].begin - 40.0)};
  update_right_of_way(net, s, c, row, 0);
  REQUIRE(row.holder);
  CHECK(row.holder->value == 0u);
  // The other vehicle enters its window later; the reservation stays put.
  s[1].pos = net.conflict_zones[1].begin - 5.0;
  update_right_of_way(net, s, c, row, 1);
  CHECK(row.holder->value == 0u);
  // Holder leaves the zone entirely.
  s[0].pos = net.conflict_zones[0].end + s[0].length + 1.0;
  update_right_of_way(net, s, c, row, 2);
  REQUIRE(row.holder);
  CHECK(row.holder->value == 1u);
}

TEST_CASE("merge: highway vehicle projected onto the ramp leads") {
  ScenarioConfig c = ScenarioConfig::merge();
  Rng rng(0);
  const Network net = build_network(c, rng);
  const std::vector<VehicleState> s{car(0, net.ramp_length - 30.0, 5.0, Road::Ramp),
                                    car(1, net.merge_point - 10.0, 8.0, Road::Main)};
  const LeaderInfo l = leader_of(net, s, VehicleId{0}, c);
  REQUIRE(l.leader);
  CHECK(l.leader->value == 1u);
  CHECK_FALSE(l.is_virtual);
  CHECK(l.gap == doctest::Approx(20.0 - s[1].length));
}

TEST_CASE("inflow probability and guards") {
  CHECK(insertion_probability(2000.0, 0.1) == doctest::Approx(2000.0 * 0.1 / 3600.0));
  CHECK(insertion_probability(2000.0, 0.1) == doctest::Approx(0.0556).epsilon(1e-3));

  ScenarioConfig c = ScenarioConfig::merge();
  Rng rng(5);
  const Network net = build_network(c, rng);
  SUBCASE("zero rate never spawns") {
    c.highway_inflow = 0.0;
    c.ramp_inflow = 0.0;
    InflowState inflow;
    for (int k = 0; k < 5000; ++k) CHECK(spawn_inflows(net, {}, c, inflow, rng).empty());
  }
  SUBCASE("blocked entry defers") {
    c.highway_inflow = 3.6e6;  // probability clamps to one
    c.ramp_inflow = 0.0;
    InflowState inflow;
    const std::vector<VehicleState> s{car(0, c.vehicle_length + 1.0, 0.0)};
    CHECK(spawn_inflows(net, s, c, inflow, rng).empty());
    CHECK(inflow.pending_main == 1);
    const std::vector<VehicleState> clear{car(0, 100.0, 0.0)};
    CHECK(spawn_inflows(net, clear, c, inflow, rng).size() == 1);
  }
}

TEST_CASE("collision detection") {
  const Network net = ring_of(100.0);
  const std::vector<VehicleState> ok{car(0, 0.0), car(1, 20.0), car(2, 50.0)};
  CHECK(detect_collisions(net, ok).empty());

  const std::vector<VehicleState> bump{car(0, 10.0), car(1, 14.0)};
  const auto pairs = detect_collisions(net, bump);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].first.value == 0u);
  CHECK(pairs[0].second.value == 1u);
  CHECK(leader_of(net, bump, VehicleId{0}, ScenarioConfig::ring()).gap == doctest::Approx(-1.0));

  const std::vector<VehicleState> three{car(0, 10.0), car(1, 30.0), car(2, 33.0)};
  std::size_t brute = 0;
  for (const auto& f : three)
    for (const auto& l : three) {
      if (f.id == l.id) continue;
      const double d = std::fmod(l.pos - f.pos + net.length, net.length);
      const bool is_leader = std::none_of(three.begin(), three.end(), [&](const auto& o) {
        const double od = std::fmod(o.pos - f.pos + net.length, net.length);
        return o.id != f.id && od < d;
      });
      if (is_leader && d - l.length <= 0.0) ++brute;
    }
  CHECK(detect_collisions(net, three).size() == brute);
  CHECK(brute == 1);
}

TEST_CASE("closed-network invariants under all-IDM driving") {
  for (const auto kind : {ScenarioKind::Ring, ScenarioKind::FigureEight}) {
    CAPTURE(to_string(kind));
    EnvConfig cfg;
    cfg.scenario = kind == ScenarioKind::Ring ? ScenarioConfig::ring() : ScenarioConfig::figure_eight();
    cfg.scenario.warmup = 0;
    cfg.scenario.horizon = 600;
    cfg.cav_control = CavControl::Idm;
    TrafficEnv env(cfg);
    env.reset(11);
    const std::size_t n = env.vehicles().size();
    const double L = env.network().length;
    std::vector<std::uint32_t> order;
    auto cyclic_order = [&] {
      std::vector<VehicleState> v(env.vehicles().begin(), env.vehicles().end());
      std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.pos < b.pos; });
      std::vector<std::uint32_t> ids;
      for (const auto& x : v) ids.push_back(x.id.value);
      std::rotate(ids.begin(), std::min_element(ids.begin(), ids.end()), ids.end());
      return ids;
    };
    order = cyclic_order();
    bool collided = false;
    while (!env.done()) {
      const auto res = env.step(std::vector<double>(static_cast<std::size_t>(env.slots()), 0.0));
      collided = collided || res.info.collision;
      CHECK(env.vehicles().size() == n);
      if (!collided) CHECK(cyclic_order() == order);
      double total = 0.0;
      for (const auto& v : env.vehicles()) {
        CHECK(v.velocity >= 0.0);
        CHECK(v.pos >= 0.0);
        CHECK(v.pos < L);
        total += v.length;
        std::vector<VehicleState> all(env.vehicles().begin(), env.vehicles().end());
        total += leader_of(env.network(), all, v.id, cfg.scenario).gap;
      }
      if (kind == ScenarioKind::Ring) CHECK(total == doctest::Approx(L).epsilon(1e-9));
    }
  }
}

TEST_CASE("identical seeds give bit-identical state sequences") {
  EnvConfig cfg;
  cfg.scenario.warmup = 50;
  cfg.scenario.horizon = 200;
  cfg.cav_control = CavControl::Idm;
  TrafficEnv a(cfg), b(cfg);
  a.reset(99);
  b.reset(99);
  while (!a.done()) {
    a.step(std::vector<double>{0.0});
    b.step(std::vector<double>{0.0});
    REQUIRE(a.vehicles().size() == b.vehicles().size());
    for (std::size_t i = 0; i < a.vehicles().size(); ++i) {
      CHECK(a.vehicles()[i].pos == b.vehicles()[i].pos);
      CHECK(a.vehicles()[i].velocity == b.vehicles()[i].velocity);
    }
  }
}
