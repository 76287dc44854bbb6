#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace trajmae {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

enum class PolylineType { LaneCenter, LaneBoundary, Crosswalk };

std::string_view to_string(PolylineType t);
PolylineType parse_polyline_type(std::string_view s);

struct Polyline {
  std::vector<Point2> points;
  PolylineType type = PolylineType::LaneCenter;
  bool operator==(const Polyline&) const = default;
};

struct VectorMap {
  std::vector<Polyline> polylines;
  bool operator==(const VectorMap&) const = default;

  std::size_t lane_center_count() const;
};

enum class MapLayout { Straight, Curve, FourWay };

std::string_view to_string(MapLayout l);
/// Throws std::invalid_argument for unknown names.
MapLayout parse_layout(std::string_view s);

inline constexpr std::size_t kMapPoints = 10;

/// Synthetic lane map: 4-16 polylines of exactly `points` uniformly spaced key points.
VectorMap build_map(MapLayout layout, std::uint64_t seed, std::size_t points = kMapPoints);

struct SimConfig {
  std::size_t agents = 6;
  std::size_t t_obs = 10;
  std::size_t t_fut = 15;
  double dt = 0.1;
  double v_max = 15.0;
  double late_entry_prob = 0.2;
};

/// M agents x (t_obs + t_fut) steps of 2-D positions, in the ego frame.
struct Scene {
  std::size_t agents = 0;
  std::size_t t_obs = 0;
  std::size_t t_fut = 0;
  double dt = 0.1;
  std::size_t ego_index = 0;
  std::vector<double> positions;  // [agent][step][xy]
  std::vector<std::uint8_t> valid;  // [agent][step]
  VectorMap map;
  std::uint64_t seed = 0;

  std::size_t steps() const noexcept { return t_obs + t_fut; }
  Point2 pos(std::size_t m, std::size_t t) const {
    const std::size_t i = (m * steps() + t) * 2;
    return {positions[i], positions[i + 1]};
  }
  void set_pos(std::size_t m, std::size_t t, Point2 p) {
    const std::size_t i = (m * steps() + t) * 2;
    positions[i] = p.x;
    positions[i + 1] = p.y;
  }
  bool is_valid(std::size_t m, std::size_t t) const { return valid[m * steps() + t] != 0; }
  std::size_t valid_observed(std::size_t m) const;

  bool operator==(const Scene&) const = default;
};

/// Longitudinal car-following (IDM) parameters.
struct IdmParams {
  double max_accel = 1.5;
  double comfort_decel = 2.0;
  double time_headway = 1.2;
  double min_gap = 2.0;
  double vehicle_length = 4.5;
};

/// IDM acceleration; gap <= 0 or no leader (gap = +inf) are handled.
double idm_acceleration(double v, double v_desired, double gap, double closing_speed, const IdmParams& p = {});

struct FollowState {
  double leader_s = 0.0;
  double follower_s = 0.0;
  double follower_v = 0.0;
};

/// One-lane leader/follower integration with the same longitudinal update the
/// scene simulator uses. The leader drives at constant speed.
std::vector<FollowState> follow_constant_leader(double leader_speed, double follower_desired, double initial_gap,
                                                double follower_speed, std::size_t steps, double dt,
                                                const IdmParams& p = {});

/// Simulates M agents following lane centers and transforms to the ego frame.
/// Throws std::invalid_argument when the map has no lane centers or the
/// horizon/agent counts are too small.
Scene simulate_scene(const VectorMap& map, std::uint64_t seed, const SimConfig& cfg);

/// Rigid transform putting the ego at the origin of its last observed step,
/// heading along +x. Invalid slots stay at zero.
void normalize_scene(Scene& scene);

enum class Split { Train, Val, Test };
std::string_view to_string(Split s);

struct DatasetShard {
  std::vector<Scene> scenes;
  std::uint64_t generator_seed = 0;
  Split split = Split::Train;
};

struct DatasetConfig {
  std::size_t train = 2000;
  std::size_t val = 200;
  std::size_t test = 200;
  std::uint64_t seed = 1;
  // Per-split generator seeds; derived from `seed` when unset.
  std::uint64_t train_seed = 0;
  std::uint64_t val_seed = 0;
  std::uint64_t test_seed = 0;
  std::vector<MapLayout> layouts{MapLayout::Straight, MapLayout::Curve, MapLayout::FourWay};
  SimConfig sim;
};

struct Dataset {
  DatasetShard train;
  DatasetShard val;
  DatasetShard test;
};

Dataset generate_dataset(const DatasetConfig& cfg);

nlohmann::ordered_json scene_to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::ordered_json shard_stats(const DatasetShard& shard);

void write_shard(const std::filesystem::path& path, const DatasetShard& shard);
DatasetShard read_shard(const std::filesystem::path& path, Split split);

}  // namespace trajmae
