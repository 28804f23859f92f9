#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kirl {

using Rng = std::mt19937_64;

/// Raised when a configuration record violates its invariants.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ScenarioKind { Ring, FigureEight, Merge };

std::string_view to_string(ScenarioKind kind);
ScenarioKind scenario_kind_from_string(std::string_view name);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct ScenarioConfig {
  ScenarioKind kind = ScenarioKind::Ring;

  Range ring_length{220.0, 270.0};
  Range loop_radius{32.0, 35.0};
  double highway_length = 700.0;
  double ramp_length = 100.0;
  // Highway coordinate where the ramp joins.
  double merge_position = 600.0;

  int n_vehicles = 22;
  double cav_penetration = 0.10;
  double highway_inflow = 2000.0;  // veh/hr
  double ramp_inflow = 100.0;      // veh/hr

  double dt = 0.1;
  int horizon = 3000;
  int warmup = 750;
  std::uint64_t seed = 0;

  double vehicle_length = 5.0;
  double min_insertion_gap = 10.0;
  double insertion_speed = 10.0;
  double initial_jitter = 0.5;

  // Figure-eight right-of-way.
  double conflict_zone_length = 8.0;
  double approach_window = 15.0;
  double yield_visibility = 50.0;

  // Merge junction.
  double merge_zone = 50.0;
  // Ramp vehicles wait at the junction while a highway vehicle is alongside.
  double merge_clearance = 2.0;
  int max_cav_slots = 5;

  static ScenarioConfig ring();
  static ScenarioConfig figure_eight();
  static ScenarioConfig merge();

  /// Throws ConfigError when any invariant is violated.
  void validate() const;
};

enum class VehicleKind { Cav, Hdv };

/// Road a vehicle currently drives on. Closed networks only use Main.
enum class Road { Main, Ramp };

struct VehicleId {
  std::uint32_t value = 0;
  auto operator<=>(const VehicleId&) const = default;
};

struct VehicleState {
  VehicleId id;
  Road road = Road::Main;
  double pos = 0.0;  // front bumper, meters along the road
  double velocity = 0.0;
  double accel = 0.0;
  double length = 5.0;
  VehicleKind kind = VehicleKind::Hdv;
};

struct Interval {
  double begin = 0.0;
  double end = 0.0;
  bool contains(double x) const { return x >= begin && x < end; }
};

struct Network {
  ScenarioKind kind = ScenarioKind::Ring;
  double length = 0.0;  // main route length (closed: circumference)
  double loop_radius = 0.0;
  // Figure-eight: the single physical crossing appears twice on the route.
  std::array<Interval, 2> conflict_zones{};
  double ramp_length = 0.0;
  double merge_point = 0.0;

  bool closed() const { return kind != ScenarioKind::Merge; }
};

Network build_network(const ScenarioConfig& config, Rng& rng);

/// Euler step: v' = max(0, v + a dt), pos' = pos + v' dt. Closed routes wrap;
/// on the merge network ramp vehicles passing the junction move onto Main.
std::vector<VehicleState> step_kinematics(const Network& network,
                                          std::span<const VehicleState> states,
                                          std::span<const double> accels, double dt);

/// Figure-eight reservation of the conflict zone. The vehicle whose front
/// bumper first enters the approach window holds the zone until its rear
/// bumper leaves it.
struct RightOfWay {
  std::optional<VehicleId> holder;
  std::map<VehicleId, long> window_entry;
};

void update_right_of_way(const Network& network, std::span<const VehicleState> states,
                         const ScenarioConfig& config, RightOfWay& row, long step);

inline constexpr double kFreeRoadGap = std::numeric_limits<double>::infinity();

struct LeaderInfo {
  std::optional<VehicleId> leader;  // empty for virtual or free road
  bool is_virtual = false;
  double gap = kFreeRoadGap;
  double leader_velocity = 0.0;
};

struct FollowerInfo {
  std::optional<VehicleId> follower;
  double gap = kFreeRoadGap;
  double follower_velocity = 0.0;
};

/// Resolves the leader of `ego`. `row` is consulted on the figure-eight only.
LeaderInfo leader_of(const Network& network, std::span<const VehicleState> states,
                     VehicleId ego, const ScenarioConfig& config,
                     const RightOfWay* row = nullptr);

FollowerInfo follower_of(const Network& network, std::span<const VehicleState> states,
                         VehicleId ego);

/// Bookkeeping for deferred insertions at the merge network boundaries.
struct InflowState {
  int pending_main = 0;
  int pending_ramp = 0;
  std::uint32_t next_id = 0;
};

double insertion_probability(double rate_veh_per_hr, double dt);

std::vector<VehicleState> spawn_inflows(const Network& network,
                                        std::span<const VehicleState> states,
                                        const ScenarioConfig& config, InflowState& inflow,
                                        Rng& rng);

/// Every (follower, leader) pair of real vehicles whose bumper gap is <= 0.
std::vector<std::pair<VehicleId, VehicleId>> detect_collisions(
    const Network& network, std::span<const VehicleState> states);

/// Evenly spaced placement with uniform positional jitter. Vehicle 0 is the CAV.
std::vector<VehicleState> place_closed_fleet(const Network& network,
                                             const ScenarioConfig& config, Rng& rng);

const VehicleState* find_vehicle(std::span<const VehicleState> states, VehicleId id);

}  // namespace kirl
