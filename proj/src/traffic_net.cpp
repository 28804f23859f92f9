#include "kirl/traffic_net.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <tuple>

namespace kirl {

namespace {

constexpr double kInsertionLookahead = 50.0;

// Distance travelled from `from` to reach `to` moving forward on a loop of length L.
double ahead_distance(double from, double to, double loop_length) {
  double d = std::fmod(to - from, loop_length);
  if (d < 0.0) d += loop_length;
  return d;
}

double sample_range(const Range& range, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  return range.lo + (range.hi - range.lo) * unit(rng);
}

void check_range(const Range& r, double lo, double hi, const char* what) {
  if (!(r.lo <= r.hi)) throw ConfigError(std::string(what) + ": lower bound exceeds upper bound");
  if (r.lo < lo || r.hi > hi) {
    throw ConfigError(std::string(what) + ": range must lie within [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "]");
  }
}

LeaderInfo closed_leader(const Network& net, std::span<const VehicleState> states,
                         const VehicleState& ego) {
  LeaderInfo best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& other : states) {
    if (other.id == ego.id) continue;
    const double d = ahead_distance(ego.pos, other.pos, net.length);
    if (d < best_d || (d == best_d && best.leader && other.id < *best.leader)) {
      best_d = d;
      best.leader = other.id;
      best.gap = d - other.length;
      best.leader_velocity = other.velocity;
    }
  }
  if (!best.leader) {
    best.leader = ego.id;
    best.gap = net.length - ego.length;
    best.leader_velocity = ego.velocity;
  }
  return best;
}

// Nearest vehicle strictly ahead on the same open road.
LeaderInfo open_road_leader(std::span<const VehicleState> states, const VehicleState& ego) {
  LeaderInfo best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& other : states) {
    if (other.id == ego.id || other.road != ego.road) continue;
    const double d = other.pos - ego.pos;
    if (d < 0.0 || (d == 0.0 && other.id < ego.id)) continue;
    if (d < best_d) {
      best_d = d;
      best.leader = other.id;
      best.gap = d - other.length;
      best.leader_velocity = other.velocity;
    }
  }
  return best;
}

void consider(LeaderInfo& best, const LeaderInfo& candidate) {
  if (candidate.gap < best.gap) best = candidate;
}

}  // namespace

std::string_view to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::Ring: return "ring";
    case ScenarioKind::FigureEight: return "figure-eight";
    case ScenarioKind::Merge: return "merge";
  }
  return "ring";
}

ScenarioKind scenario_kind_from_string(std::string_view name) {
  if (name == "ring") return ScenarioKind::Ring;
  if (name == "figure-eight" || name == "figure_eight") return ScenarioKind::FigureEight;
  if (name == "merge") return ScenarioKind::Merge;
  throw ConfigError("unknown scenario kind: " + std::string(name));
}

ScenarioConfig ScenarioConfig::ring() { return ScenarioConfig{}; }

ScenarioConfig ScenarioConfig::figure_eight() {
  ScenarioConfig c;
  c.kind = ScenarioKind::FigureEight;
  c.n_vehicles = 14;
  return c;
}

ScenarioConfig ScenarioConfig::merge() {
  ScenarioConfig c;
  c.kind = ScenarioKind::Merge;
  c.n_vehicles = 0;
  return c;
}

void ScenarioConfig::validate() const {
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (horizon < 1) throw ConfigError("horizon must be at least one step");
  if (warmup < 0) throw ConfigError("warmup must be non-negative");
  if (!(vehicle_length > 0.0)) throw ConfigError("vehicle length must be positive");
  switch (kind) {
    case ScenarioKind::Ring:
      check_range(ring_length, 220.0, 270.0, "ring-length-range");
      if (n_vehicles < 2) throw ConfigError("closed networks need at least two vehicles");
      if (n_vehicles * vehicle_length >= ring_length.lo)
        throw ConfigError("ring too short for the configured fleet");
      break;
    case ScenarioKind::FigureEight:
      check_range(loop_radius, 32.0, 35.0, "loop-radius-range");
      if (n_vehicles < 2) throw ConfigError("closed networks need at least two vehicles");
      if (n_vehicles * vehicle_length >= 4.0 * std::numbers::pi * loop_radius.lo)
        throw ConfigError("figure-eight too short for the configured fleet");
      if (!(conflict_zone_length > 0.0) || !(approach_window > 0.0))
        throw ConfigError("conflict zone and approach window must be positive");
      break;
    case ScenarioKind::Merge:
      if (highway_inflow < 0.0 || ramp_inflow < 0.0) throw ConfigError("inflow rates must be >= 0");
      if (cav_penetration < 0.0 || cav_penetration > 1.0)
        throw ConfigError("cav-penetration must lie in [0, 1]");
      if (!(highway_length > 0.0) || !(ramp_length > 0.0))
        throw ConfigError("road lengths must be positive");
      if (!(merge_position > 0.0 && merge_position < highway_length))
        throw ConfigError("merge position must lie strictly inside the highway");
      if (max_cav_slots < 1) throw ConfigError("max-cav-slots must be at least one");
      break;
  }
}

Network build_network(const ScenarioConfig& config, Rng& rng) {
  config.validate();
  Network net;
  net.kind = config.kind;
  switch (config.kind) {
    case ScenarioKind::Ring:
      net.length = sample_range(config.ring_length, rng);
      break;
    case ScenarioKind::FigureEight: {
      const double r = sample_range(config.loop_radius, rng);
      const double loop = 2.0 * std::numbers::pi * r;
      net.loop_radius = r;
      net.length = 2.0 * loop;
      const double w = config.conflict_zone_length;
      // The crossing sits halfway around each loop on the canonical route.
      for (int k = 0; k < 2; ++k) {
        const double centre = k * loop + 0.5 * loop;
        net.conflict_zones[k] = Interval{centre - 0.5 * w, centre + 0.5 * w};
      }
      break;
    }
    case ScenarioKind::Merge:
      net.length = config.highway_length;
      net.ramp_length = config.ramp_length;
      net.merge_point = config.merge_position;
      break;
  }
  return net;
}

std::vector<VehicleState> step_kinematics(const Network& network,
                                          std::span<const VehicleState> states,
                                          std::span<const double> accels, double dt) {
  if (accels.size() != states.size())
    throw std::invalid_argument("step_kinematics: one acceleration per vehicle required");
  if (!(dt > 0.0)) throw std::invalid_argument("step_kinematics: dt must be positive");
  std::vector<VehicleState> next(states.begin(), states.end());
  for (std::size_t i = 0; i < next.size(); ++i) {
    auto& s = next[i];
    s.accel = accels[i];
    s.velocity = std::max(0.0, s.velocity + accels[i] * dt);
    s.pos += s.velocity * dt;
    if (network.closed()) {
      s.pos = std::fmod(s.pos, network.length);
      if (s.pos < 0.0) s.pos += network.length;
    } else if (s.road == Road::Ramp && s.pos >= network.ramp_length) {
      s.road = Road::Main;
      s.pos = network.merge_point + (s.pos - network.ramp_length);
    }
  }
  return next;
}

void update_right_of_way(const Network& network, std::span<const VehicleState> states,
                         const ScenarioConfig& config, RightOfWay& row, long step) {
  if (network.kind != ScenarioKind::FigureEight) return;
  const double L = network.length;

  // Remaining distance to the zone entrance; <= 0 means the front is inside.
  struct Claim {
    VehicleId id;
    double remaining;
  };
  std::vector<Claim> claims;
  for (const auto& v : states) {
    for (const auto& zone : network.conflict_zones) {
      const double into = ahead_distance(zone.begin, v.pos, L);
      const double to_entrance = ahead_distance(v.pos, zone.begin, L);
      const bool inside = into < (zone.end - zone.begin) + v.length;
      const bool approaching = to_entrance > 0.0 && to_entrance <= config.approach_window;
      if (inside) {
        claims.push_back({v.id, -into});
        break;
      }
      if (approaching) {
        claims.push_back({v.id, to_entrance});
        break;
      }
    }
  }

  std::set<VehicleId> active;
  for (const auto& c : claims) {
    active.insert(c.id);
    row.window_entry.try_emplace(c.id, step);
  }
  std::erase_if(row.window_entry, [&](const auto& kv) { return !active.contains(kv.first); });
  if (row.holder && !active.contains(*row.holder)) row.holder.reset();

  if (!row.holder && !claims.empty()) {
    auto key = [&](const Claim& c) {
      return std::make_tuple(row.window_entry.at(c.id), c.remaining, c.id.value);
    };
    const auto winner =
        std::min_element(claims.begin(), claims.end(),
                         [&](const Claim& a, const Claim& b) { return key(a) < key(b); });
    row.holder = winner->id;
  }
}

const VehicleState* find_vehicle(std::span<const VehicleState> states, VehicleId id) {
  for (const auto& s : states)
    if (s.id == id) return &s;
  return nullptr;
}

LeaderInfo leader_of(const Network& network, std::span<const VehicleState> states, VehicleId ego,
                     const ScenarioConfig& config, const RightOfWay* row) {
  const VehicleState* e = find_vehicle(states, ego);
  if (!e) throw std::invalid_argument("leader_of: unknown vehicle");

  if (network.kind == ScenarioKind::Ring) return closed_leader(network, states, *e);

  if (network.kind == ScenarioKind::FigureEight) {
    LeaderInfo best = closed_leader(network, states, *e);
    if (row && row->holder && *row->holder != ego) {
      for (const auto& zone : network.conflict_zones) {
        const double d = ahead_distance(e->pos, zone.begin, network.length);
        if (d > 0.0 && d <= config.yield_visibility) {
          consider(best, LeaderInfo{std::nullopt, true, d, 0.0});
        }
      }
    }
    return best;
  }

  // Merge network.
  LeaderInfo best = open_road_leader(states, *e);
  if (e->road == Road::Ramp) {
    const double to_merge = network.ramp_length - e->pos;
    if (to_merge <= config.merge_zone) {
      bool blocked = false;
      for (const auto& h : states) {
        if (h.road != Road::Main) continue;
        // Highway vehicle expressed in ramp coordinates (equal distance to merge point).
        const double projected = h.pos - network.merge_point + network.ramp_length;
        const double d = projected - e->pos;
        if (d > 0.0 || (d == 0.0 && h.id.value < e->id.value)) {
          consider(best, LeaderInfo{h.id, false, d - h.length, h.velocity});
        } else if (projected > e->pos - e->length - config.merge_clearance) {
          blocked = true;
        }
      }
      if (blocked && to_merge > 0.0) {
        consider(best, LeaderInfo{std::nullopt, true, to_merge, 0.0});
      }
    }
  }
  return best;
}

FollowerInfo follower_of(const Network& network, std::span<const VehicleState> states,
                         VehicleId ego) {
  const VehicleState* e = find_vehicle(states, ego);
  if (!e) throw std::invalid_argument("follower_of: unknown vehicle");
  FollowerInfo best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& other : states) {
    if (other.id == ego) continue;
    double d;
    if (network.closed()) {
      d = ahead_distance(other.pos, e->pos, network.length);
    } else {
      if (other.road != e->road) continue;
      d = e->pos - other.pos;
      if (d < 0.0 || (d == 0.0 && other.id > ego)) continue;
    }
    if (d < best_d) {
      best_d = d;
      best.follower = other.id;
      best.gap = d - e->length;
      best.follower_velocity = other.velocity;
    }
  }
  if (network.closed() && !best.follower) {
    best.follower = ego;
    best.gap = network.length - e->length;
    best.follower_velocity = e->velocity;
  }
  return best;
}

double insertion_probability(double rate_veh_per_hr, double dt) {
  return std::clamp(rate_veh_per_hr * dt / 3600.0, 0.0, 1.0);
}

std::vector<VehicleState> spawn_inflows(const Network& network,
                                        std::span<const VehicleState> states,
                                        const ScenarioConfig& config, InflowState& inflow,
                                        Rng& rng) {
  if (network.kind != ScenarioKind::Merge)
    throw std::invalid_argument("spawn_inflows: merge network only");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<VehicleState> spawned;

  auto handle_stream = [&](Road road, double rate, int& pending, bool cav_allowed) {
    if (unit(rng) < insertion_probability(rate, config.dt)) ++pending;
    if (pending == 0) return;
    double headroom = std::numeric_limits<double>::infinity();
    double downstream_speed = config.insertion_speed;
    for (const auto& s : states) {
      if (s.road != road) continue;
      const double rear = s.pos - s.length;
      if (rear < headroom) {
        headroom = rear;
        if (s.pos <= kInsertionLookahead) downstream_speed = s.velocity;
      }
    }
    if (headroom < config.min_insertion_gap) return;
    VehicleState v;
    v.id = VehicleId{inflow.next_id++};
    v.road = road;
    v.pos = 0.0;
    v.velocity = std::min(config.insertion_speed, downstream_speed);
    v.length = config.vehicle_length;
    v.kind = VehicleKind::Hdv;
    if (cav_allowed && unit(rng) < config.cav_penetration) v.kind = VehicleKind::Cav;
    spawned.push_back(v);
    --pending;
  };

  handle_stream(Road::Main, config.highway_inflow, inflow.pending_main, true);
  handle_stream(Road::Ramp, config.ramp_inflow, inflow.pending_ramp, false);
  return spawned;
}

std::vector<std::pair<VehicleId, VehicleId>> detect_collisions(
    const Network& network, std::span<const VehicleState> states) {
  std::vector<std::pair<VehicleId, VehicleId>> pairs;
  for (const auto& ego : states) {
    const LeaderInfo info =
        network.closed() ? closed_leader(network, states, ego) : open_road_leader(states, ego);
    if (!info.leader || *info.leader == ego.id) continue;
    if (info.gap <= 0.0) pairs.emplace_back(ego.id, *info.leader);
  }
  return pairs;
}

std::vector<VehicleState> place_closed_fleet(const Network& network,
                                             const ScenarioConfig& config, Rng& rng) {
  if (!network.closed()) throw std::invalid_argument("place_closed_fleet: closed network only");
  const int n = config.n_vehicles;
  const double spacing = network.length / n;
  const double jitter = std::min(config.initial_jitter, 0.25 * (spacing - config.vehicle_length));
  std::uniform_real_distribution<double> offset(-jitter, jitter);
  std::vector<VehicleState> fleet;
  fleet.reserve(n);
  for (int i = 0; i < n; ++i) {
    VehicleState v;
    v.id = VehicleId{static_cast<std::uint32_t>(i)};
    v.pos = std::fmod(i * spacing + offset(rng) + network.length, network.length);
    v.length = config.vehicle_length;
    v.kind = i == 0 ? VehicleKind::Cav : VehicleKind::Hdv;
    fleet.push_back(v);
  }
  return fleet;
}

}  // namespace kirl
