#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "trajmae/scene.hpp"

using namespace trajmae;

TEST_CASE("straight layout lane centers are collinear") {
  const VectorMap map = build_map(MapLayout::Straight, 1);
  for (const Polyline& pl : map.polylines) {
    if (pl.type != PolylineType::LaneCenter) continue;
    const Point2 a = pl.points.front(), b = pl.points.back();
    for (const Point2& p : pl.points) {
      const double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
      const double len = std::hypot(b.x - a.x, b.y - a.y);
      CHECK(std::abs(cross) / len < 1e-9);
    }
  }
}

TEST_CASE("every layout yields fixed-size polylines") {
  for (MapLayout l : {MapLayout::Straight, MapLayout::Curve, MapLayout::FourWay}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const VectorMap map = build_map(l, seed);
      CHECK(map.polylines.size() >= 4);
      CHECK(map.polylines.size() <= 16);
      for (const Polyline& pl : map.polylines) CHECK(pl.points.size() == kMapPoints);
    }
  }
}

TEST_CASE("map and scene generation are deterministic") {
  const VectorMap a = build_map(MapLayout::FourWay, 7);
  const VectorMap b = build_map(MapLayout::FourWay, 7);
  CHECK(a == b);
  const SimConfig cfg;
  const Scene s1 = simulate_scene(a, 99, cfg);
  const Scene s2 = simulate_scene(b, 99, cfg);
  CHECK(s1 == s2);
  CHECK(scene_to_json(s1).dump() == scene_to_json(s2).dump());
}

TEST_CASE("scenes are normalized to the ego's last observed position") {
  const SimConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene s = simulate_scene(build_map(MapLayout::Curve, seed), seed, cfg);
    const Point2 p = s.pos(s.ego_index, s.t_obs - 1);
    CHECK(std::abs(p.x) < 1e-12);
    CHECK(std::abs(p.y) < 1e-12);
    CHECK(s.is_valid(s.ego_index, s.t_obs - 1));
  }
}

TEST_CASE("follower converges toward a constant-speed leader") {
  const double leader = 8.0, dt = 0.1;
  const auto trace = follow_constant_leader(leader, 12.0, 80.0, leader, 1500, dt);
  REQUIRE(trace.size() > 10);
  // Independent explicit integration of the car-following rule.
  IdmParams p;
  double s = 0.0, v = leader, ls = 80.0;
  for (std::size_t i = 0; i + 1 < trace.size(); ++i) {
    const double gap = ls - s - p.vehicle_length;
    const double a = idm_acceleration(v, 12.0, gap, v - leader, p);
    v = std::max(0.0, v + a * dt);
    s += v * dt;
    ls += leader * dt;
  }
  const FollowState& last = trace.back();
  CHECK(last.follower_v == doctest::Approx(leader).epsilon(0.02));
  CHECK(last.follower_v == doctest::Approx(v).epsilon(1e-9));
  double prev_gap = trace.front().leader_s - trace.front().follower_s;
  bool closing = true;
  for (std::size_t i = 1; i < trace.size() / 2; ++i) {
    const double gap = trace[i].leader_s - trace[i].follower_s;
    closing = closing && gap <= prev_gap + 1e-12;
    prev_gap = gap;
  }
  CHECK(closing);
}

TEST_CASE("IDM acceleration limits") {
  CHECK(idm_acceleration(0.0, 10.0, INFINITY, 0.0) == doctest::Approx(1.5));
  CHECK(idm_acceleration(10.0, 10.0, INFINITY, 0.0) == doctest::Approx(0.0));
  CHECK(idm_acceleration(10.0, 10.0, 1.0, 5.0) < -2.0);
}

TEST_CASE("dataset splits have the requested sizes and disjoint seeds") {
  DatasetConfig cfg;
  cfg.train = 30;
  cfg.val = 7;
  cfg.test = 5;
  const Dataset ds = generate_dataset(cfg);
  CHECK(ds.train.scenes.size() == 30);
  CHECK(ds.val.scenes.size() == 7);
  CHECK(ds.test.scenes.size() == 5);
  std::set<std::uint64_t> seeds;
  for (const DatasetShard* s : {&ds.train, &ds.val, &ds.test}) {
    for (const Scene& sc : s->scenes) seeds.insert(sc.seed);
  }
  CHECK(seeds.size() == 42);

  DatasetConfig other = cfg;
  other.train_seed = 1234;
  other.val_seed = 5678;
  other.test_seed = 91011;
  const Dataset ds2 = generate_dataset(other);
  for (const Scene& sc : ds2.train.scenes) CHECK(seeds.count(sc.seed) == 0);

  const Dataset again = generate_dataset(cfg);
  CHECK(again.train.scenes == ds.train.scenes);
  CHECK(again.test.scenes == ds.test.scenes);
}

TEST_CASE("shards round-trip through JSONL") {
  DatasetConfig cfg;
  cfg.train = 6;
  cfg.val = 1;
  cfg.test = 1;
  const Dataset ds = generate_dataset(cfg);
  const auto path = std::filesystem::temp_directory_path() / "trajmae_shard_test.jsonl";
  write_shard(path, ds.train);
  const DatasetShard back = read_shard(path, Split::Train);
  CHECK(back.scenes == ds.train.scenes);
  std::filesystem::remove(path);
}

TEST_CASE("late entries leave leading slots invalid") {
  SimConfig cfg;
  cfg.late_entry_prob = 1.0;
  const Scene s = simulate_scene(build_map(MapLayout::Straight, 3), 3, cfg);
  bool some_late = false;
  for (std::size_t m = 0; m < s.agents; ++m) {
    if (m == s.ego_index) continue;
    some_late = some_late || !s.is_valid(m, 0);
    bool seen = false;
    for (std::size_t t = 0; t < s.steps(); ++t) {
      if (s.is_valid(m, t)) seen = true;
      else CHECK_FALSE(seen);
    }
  }
  CHECK(some_late);
}
