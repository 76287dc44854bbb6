#include "trajmae/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <stdexcept>

#include "trajmae/rng.hpp"

namespace trajmae {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(PolylineType t) {
  switch (t) {
    case PolylineType::LaneCenter: return "lane-center";
    case PolylineType::LaneBoundary: return "lane-boundary";
    case PolylineType::Crosswalk: return "crosswalk";
  }
  return "?";
}

PolylineType parse_polyline_type(std::string_view s) {
  if (s == "lane-center") return PolylineType::LaneCenter;
  if (s == "lane-boundary") return PolylineType::LaneBoundary;
  if (s == "crosswalk") return PolylineType::Crosswalk;
  throw std::invalid_argument("unknown polyline type '" + std::string(s) + "'");
}

std::size_t VectorMap::lane_center_count() const {
  return static_cast<std::size_t>(std::count_if(polylines.begin(), polylines.end(), [](const Polyline& p) {
    return p.type == PolylineType::LaneCenter;
  }));
}

std::string_view to_string(MapLayout l) {
  switch (l) {
    case MapLayout::Straight: return "straight";
    case MapLayout::Curve: return "curve";
    case MapLayout::FourWay: return "four-way";
  }
  return "?";
}

MapLayout parse_layout(std::string_view s) {
  if (s == "straight") return MapLayout::Straight;
  if (s == "curve") return MapLayout::Curve;
  if (s == "four-way") return MapLayout::FourWay;
  throw std::invalid_argument("unknown map layout '" + std::string(s) + "'");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::size_t Scene::valid_observed(std::size_t m) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < t_obs; ++t) n += is_valid(m, t) ? 1 : 0;
  return n;
}

namespace {

constexpr double kLaneWidth = 3.5;

Polyline segment(Point2 a, Point2 b, std::size_t n, PolylineType type) {
  Polyline pl;
  pl.type = type;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(n - 1);
    pl.points.push_back({a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)});
  }
  return pl;
}

// Equal-angle samples of a circular arc have equal chords.
Polyline arc(Point2 c, double radius, double a0, double a1, std::size_t n, PolylineType type) {
  Polyline pl;
  pl.type = type;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = a0 + (a1 - a0) * static_cast<double>(i) / static_cast<double>(n - 1);
    pl.points.push_back({c.x + radius * std::cos(a), c.y + radius * std::sin(a)});
  }
  return pl;
}

VectorMap build_straight(RngStream& rng, std::size_t n) {
  VectorMap m;
  const std::size_t lanes = 2 + rng.below(2);
  const double x0 = -60.0 + rng.uniform(-5.0, 5.0);
  const double x1 = 60.0 + rng.uniform(-5.0, 5.0);
  const double half = 0.5 * static_cast<double>(lanes - 1);
  for (std::size_t i = 0; i < lanes; ++i) {
    const double y = (static_cast<double>(i) - half) * kLaneWidth;
    m.polylines.push_back(segment({x0, y}, {x1, y}, n, PolylineType::LaneCenter));
  }
  for (std::size_t i = 0; i <= lanes; ++i) {
    const double y = (static_cast<double>(i) - half - 0.5) * kLaneWidth;
    m.polylines.push_back(segment({x0, y}, {x1, y}, n, PolylineType::LaneBoundary));
  }
  if (rng.bernoulli(0.5)) {
    const double xc = rng.uniform(10.0, 40.0);
    const double yb = (half + 0.5) * kLaneWidth;
    m.polylines.push_back(segment({xc, -yb}, {xc, yb}, n, PolylineType::Crosswalk));
  }
  return m;
}

VectorMap build_curve(RngStream& rng, std::size_t n) {
  VectorMap m;
  const std::size_t lanes = 2 + rng.below(2);
  const double radius = rng.uniform(40.0, 80.0);
  const double sweep = rng.uniform(0.5, 0.75) * std::numbers::pi;
  // Centre below the start so the road starts heading +x and turns left.
  const Point2 c{0.0, radius};
  const double a0 = -0.5 * std::numbers::pi - 0.5 * sweep;
  const double a1 = a0 + sweep;
  const double half = 0.5 * static_cast<double>(lanes - 1);
  for (std::size_t i = 0; i < lanes; ++i) {
    const double r = radius + (static_cast<double>(i) - half) * kLaneWidth;
    m.polylines.push_back(arc(c, r, a0, a1, n, PolylineType::LaneCenter));
  }
  for (std::size_t i = 0; i <= lanes; ++i) {
    const double r = radius + (static_cast<double>(i) - half - 0.5) * kLaneWidth;
    m.polylines.push_back(arc(c, r, a0, a1, n, PolylineType::LaneBoundary));
  }
  return m;
}

VectorMap build_four_way(RngStream& rng, std::size_t n) {
  VectorMap m;
  const double len = rng.uniform(45.0, 60.0);
  const double h = 0.5 * kLaneWidth;
  // Horizontal family: eastbound below the axis, westbound above.
  m.polylines.push_back(segment({-len, -h}, {len, -h}, n, PolylineType::LaneCenter));
  m.polylines.push_back(segment({len, h}, {-len, h}, n, PolylineType::LaneCenter));
  // Vertical family: northbound right of the axis, southbound left.
  m.polylines.push_back(segment({h, -len}, {h, len}, n, PolylineType::LaneCenter));
  m.polylines.push_back(segment({-h, len}, {-h, -len}, n, PolylineType::LaneCenter));
  const double b = kLaneWidth;
  m.polylines.push_back(segment({-len, -b}, {len, -b}, n, PolylineType::LaneBoundary));
  m.polylines.push_back(segment({-len, b}, {len, b}, n, PolylineType::LaneBoundary));
  m.polylines.push_back(segment({-b, -len}, {-b, len}, n, PolylineType::LaneBoundary));
  m.polylines.push_back(segment({b, -len}, {b, len}, n, PolylineType::LaneBoundary));
  const double cw = 8.0;
  const std::size_t crosswalks = 2 + rng.below(3);
  const Polyline arms[4] = {
      segment({cw, -b}, {cw, b}, n, PolylineType::Crosswalk),
      segment({-cw, -b}, {-cw, b}, n, PolylineType::Crosswalk),
      segment({-b, cw}, {b, cw}, n, PolylineType::Crosswalk),
      segment({-b, -cw}, {b, -cw}, n, PolylineType::Crosswalk),
  };
  for (std::size_t i = 0; i < crosswalks; ++i) m.polylines.push_back(arms[i]);
  return m;
}

// Arc-length parametrised lane path; extrapolates linearly past both ends.
class LanePath {
 public:
  explicit LanePath(const Polyline& pl) : pts_(pl.points) {
    cum_.push_back(0.0);
    for (std::size_t i = 1; i < pts_.size(); ++i) {
      cum_.push_back(cum_.back() + std::hypot(pts_[i].x - pts_[i - 1].x, pts_[i].y - pts_[i - 1].y));
    }
  }

  double length() const { return cum_.back(); }

  Point2 at(double s) const {
    const std::size_t i = segment_index(s);
    const double seg = cum_[i + 1] - cum_[i];
    const double u = (s - cum_[i]) / seg;
    return {pts_[i].x + u * (pts_[i + 1].x - pts_[i].x), pts_[i].y + u * (pts_[i + 1].y - pts_[i].y)};
  }

  // Unit left normal of the segment containing s.
  Point2 normal(double s) const {
    const std::size_t i = segment_index(s);
    const double seg = cum_[i + 1] - cum_[i];
    const double tx = (pts_[i + 1].x - pts_[i].x) / seg;
    const double ty = (pts_[i + 1].y - pts_[i].y) / seg;
    return {-ty, tx};
  }

 private:
  std::size_t segment_index(double s) const {
    if (s <= cum_[1]) return 0;
    const std::size_t last = pts_.size() - 2;
    if (s >= cum_[last]) return last;
    auto it = std::upper_bound(cum_.begin(), cum_.end(), s);
    return static_cast<std::size_t>(it - cum_.begin()) - 1;
  }

  std::vector<Point2> pts_;
  std::vector<double> cum_;
};

double clampd(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

struct Longitudinal {
  double s;
  double v;
};

Longitudinal step_longitudinal(Longitudinal cur, double v_desired, double gap, double closing, double v_cap, double dt,
                               const IdmParams& p) {
  const double a = clampd(idm_acceleration(cur.v, v_desired, gap, closing, p), -8.0, p.max_accel);
  const double v = clampd(cur.v + a * dt, 0.0, v_cap);
  return {cur.s + v * dt, v};
}

}  // namespace

VectorMap build_map(MapLayout layout, std::uint64_t seed, std::size_t points) {
  if (points < 2) throw std::invalid_argument("build_map: need at least 2 points per polyline");
  RngStream rng(seed, "map");
  switch (layout) {
    case MapLayout::Straight: return build_straight(rng, points);
    case MapLayout::Curve: return build_curve(rng, points);
    case MapLayout::FourWay: return build_four_way(rng, points);
  }
  throw std::invalid_argument("build_map: unknown layout");
}

double idm_acceleration(double v, double v_desired, double gap, double closing_speed, const IdmParams& p) {
  const double free_term = 1.0 - std::pow(v / v_desired, 4.0);
  if (!std::isfinite(gap)) return p.max_accel * free_term;
  const double g = std::max(gap, 0.1);
  const double s_star =
      p.min_gap + std::max(0.0, v * p.time_headway + v * closing_speed / (2.0 * std::sqrt(p.max_accel * p.comfort_decel)));
  return p.max_accel * (free_term - (s_star / g) * (s_star / g));
}

std::vector<FollowState> follow_constant_leader(double leader_speed, double follower_desired, double initial_gap,
                                                double follower_speed, std::size_t steps, double dt,
                                                const IdmParams& p) {
  std::vector<FollowState> out;
  FollowState st{initial_gap + p.vehicle_length, 0.0, follower_speed};
  out.push_back(st);
  for (std::size_t i = 0; i < steps; ++i) {
    const double gap = st.leader_s - st.follower_s - p.vehicle_length;
    const Longitudinal next = step_longitudinal({st.follower_s, st.follower_v}, follower_desired, gap,
                                                st.follower_v - leader_speed, std::numeric_limits<double>::max(), dt, p);
    st.leader_s += leader_speed * dt;
    st.follower_s = next.s;
    st.follower_v = next.v;
    out.push_back(st);
  }
  return out;
}

Scene simulate_scene(const VectorMap& map, std::uint64_t seed, const SimConfig& cfg) {
  if (cfg.agents < 2) throw std::invalid_argument("simulate_scene: need at least 2 agents");
  if (cfg.t_obs < 4) throw std::invalid_argument("simulate_scene: t_obs must be at least 4");
  if (cfg.t_fut < 1) throw std::invalid_argument("simulate_scene: t_fut must be at least 1");
  if (!(cfg.dt > 0.0)) throw std::invalid_argument("simulate_scene: dt must be positive");
  std::vector<LanePath> lanes;
  for (const Polyline& pl : map.polylines) {
    if (pl.type == PolylineType::LaneCenter) lanes.emplace_back(pl);
  }
  if (lanes.empty()) throw std::invalid_argument("simulate_scene: map has no lane-center polylines");

  const IdmParams idm;
  RngStream rng(seed, "scene");
  const std::size_t M = cfg.agents;
  const std::size_t T = cfg.t_obs + cfg.t_fut;
  // Headroom for lateral motion and normal rotation at polyline corners.
  const double v_cap = std::min(12.5, cfg.v_max - 2.5);
  const double max_offset = 0.75;

  Scene scene;
  scene.agents = M;
  scene.t_obs = cfg.t_obs;
  scene.t_fut = cfg.t_fut;
  scene.dt = cfg.dt;
  scene.seed = seed;
  scene.ego_index = rng.below(M);
  scene.positions.assign(M * T * 2, 0.0);
  scene.valid.assign(M * T, 0);

  std::vector<std::size_t> lane(M);
  std::vector<double> v_des(M), d(M);
  std::vector<Longitudinal> lon(M);
  std::vector<std::size_t> entry(M, 0);
  const std::size_t ego = scene.ego_index;
  lane[ego] = rng.below(lanes.size());
  for (std::size_t i = 0; i < M; ++i) {
    if (i != ego) lane[i] = rng.bernoulli(0.6) ? lane[ego] : rng.below(lanes.size());
    v_des[i] = rng.uniform(4.0, std::min(12.0, v_cap));
    lon[i].v = v_des[i] * rng.uniform(0.6, 1.0);
    d[i] = rng.uniform(-0.3, 0.3);
  }
  for (std::size_t i = 0; i < M; ++i) {
    const double L = lanes[lane[i]].length();
    const bool is_ego = i == ego;
    double s = 0.0;
    for (int attempt = 0; attempt < 30; ++attempt) {
      s = is_ego ? rng.uniform(0.35 * L, 0.5 * L) : rng.uniform(0.15 * L, 0.7 * L);
      bool clear = true;
      for (std::size_t j = 0; j < i; ++j) {
        if (lane[j] == lane[i] && std::fabs(lon[j].s - s) < 8.0) clear = false;
      }
      if (clear) break;
    }
    lon[i].s = s;
    if (!is_ego && rng.bernoulli(cfg.late_entry_prob)) {
      const std::size_t half = std::max<std::size_t>(1, cfg.t_obs / 2 - 1);
      entry[i] = 1 + rng.below(half);
    }
  }

  auto position = [&](std::size_t i) {
    const LanePath& path = lanes[lane[i]];
    const Point2 c = path.at(lon[i].s);
    const Point2 n = path.normal(lon[i].s);
    return Point2{c.x + d[i] * n.x, c.y + d[i] * n.y};
  };

  const double max_step = cfg.v_max * cfg.dt;
  std::vector<Point2> prev(M);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<Point2> cur(M);
    for (std::size_t i = 0; i < M; ++i) {
      Point2 p = position(i);
      if (t > 0) {
        const double dx = p.x - prev[i].x, dy = p.y - prev[i].y;
        const double dist = std::hypot(dx, dy);
        if (dist > max_step) {
          const double f = max_step * (1.0 - 1e-9) / dist;
          p = {prev[i].x + dx * f, prev[i].y + dy * f};
        }
      }
      cur[i] = p;
      if (t >= entry[i]) {
        scene.set_pos(i, t, p);
        scene.valid[i * T + t] = 1;
      }
    }
    prev = cur;

    std::vector<Longitudinal> next(M);
    for (std::size_t i = 0; i < M; ++i) {
      double gap = std::numeric_limits<double>::infinity();
      double closing = 0.0;
      for (std::size_t j = 0; j < M; ++j) {
        if (j == i || lane[j] != lane[i] || lon[j].s <= lon[i].s) continue;
        const double g = lon[j].s - lon[i].s - idm.vehicle_length;
        if (g < gap) {
          gap = g;
          closing = lon[i].v - lon[j].v;
        }
      }
      next[i] = step_longitudinal(lon[i], v_des[i], gap, closing, v_cap, cfg.dt, idm);
    }
    std::vector<double> next_d(M);
    for (std::size_t i = 0; i < M; ++i) {
      double best = 4.0;
      std::size_t nearest = M;
      for (std::size_t j = 0; j < M; ++j) {
        if (j == i) continue;
        const double dist = std::hypot(cur[i].x - cur[j].x, cur[i].y - cur[j].y);
        if (dist < best) {
          best = dist;
          nearest = j;
        }
      }
      double push = 0.0;
      if (nearest < M) {
        const Point2 n = lanes[lane[i]].normal(lon[i].s);
        const double side = (cur[i].x - cur[nearest].x) * n.x + (cur[i].y - cur[nearest].y) * n.y;
        push = (side >= 0.0 ? 1.0 : -1.0) * std::exp(-best / 2.0);
      }
      const double rate = clampd(-d[i] + push + 0.3 * rng.normal(), -1.0, 1.0);
      next_d[i] = clampd(d[i] + rate * cfg.dt, -max_offset, max_offset);
    }
    lon = next;
    d = next_d;
  }

  scene.map = map;
  normalize_scene(scene);
  return scene;
}

void normalize_scene(Scene& scene) {
  const std::size_t e = scene.ego_index;
  const std::size_t last = scene.t_obs - 1;
  const Point2 origin = scene.pos(e, last);
  double heading = 0.0;
  for (std::size_t t = last; t > 0; --t) {
    const Point2 a = scene.pos(e, t - 1);
    const double dx = origin.x - a.x, dy = origin.y - a.y;
    if (std::hypot(dx, dy) > 1e-6) {
      heading = std::atan2(dy, dx);
      break;
    }
  }
  const double c = std::cos(heading), s = std::sin(heading);
  auto xf = [&](Point2 p) {
    const double x = p.x - origin.x, y = p.y - origin.y;
    return Point2{c * x + s * y, -s * x + c * y};
  };
  for (std::size_t m = 0; m < scene.agents; ++m) {
    for (std::size_t t = 0; t < scene.steps(); ++t) {
      scene.set_pos(m, t, scene.is_valid(m, t) ? xf(scene.pos(m, t)) : Point2{});
    }
  }
  for (Polyline& pl : scene.map.polylines) {
    for (Point2& p : pl.points) p = xf(p);
  }
}

Dataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.train == 0 || cfg.val == 0 || cfg.test == 0) {
    throw std::invalid_argument("generate_dataset: every split needs at least one scene");
  }
  if (cfg.layouts.empty()) throw std::invalid_argument("generate_dataset: no map layouts");
  auto split_seed = [&](std::uint64_t explicit_seed, std::string_view tag) {
    return explicit_seed != 0 ? explicit_seed : mix64(cfg.seed ^ hash_tag(tag));
  };
  std::set<std::uint64_t> used;
  auto make = [&](Split split, std::size_t count, std::uint64_t gen_seed) {
    DatasetShard shard;
    shard.split = split;
    shard.generator_seed = gen_seed;
    RngStream rng(gen_seed, std::string("dataset/") + std::string(to_string(split)));
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t s = 0;
      do {
        s = rng.next_u64();
      } while (!used.insert(s).second);
      RngStream pick(s, "layout");
      const MapLayout layout = cfg.layouts[pick.below(cfg.layouts.size())];
      const VectorMap map = build_map(layout, mix64(s ^ 0xa0761d6478bd642fULL));
      shard.scenes.push_back(simulate_scene(map, s, cfg.sim));
    }
    return shard;
  };
  Dataset ds;
  ds.train = make(Split::Train, cfg.train, split_seed(cfg.train_seed, "train"));
  ds.val = make(Split::Val, cfg.val, split_seed(cfg.val_seed, "val"));
  ds.test = make(Split::Test, cfg.test, split_seed(cfg.test_seed, "test"));
  return ds;
}

ordered_json scene_to_json(const Scene& s) {
  ordered_json j;
  j["ego_index"] = s.ego_index;
  j["dt"] = s.dt;
  j["t_obs"] = s.t_obs;
  ordered_json pos = ordered_json::array();
  ordered_json val = ordered_json::array();
  for (std::size_t m = 0; m < s.agents; ++m) {
    ordered_json row = ordered_json::array();
    ordered_json vrow = ordered_json::array();
    for (std::size_t t = 0; t < s.steps(); ++t) {
      const Point2 p = s.pos(m, t);
      row.push_back(ordered_json::array({p.x, p.y}));
      vrow.push_back(s.is_valid(m, t));
    }
    pos.push_back(std::move(row));
    val.push_back(std::move(vrow));
  }
  j["positions"] = std::move(pos);
  j["valid"] = std::move(val);
  ordered_json polys = ordered_json::array();
  for (const Polyline& pl : s.map.polylines) {
    ordered_json pj;
    pj["type_tag"] = std::string(to_string(pl.type));
    ordered_json pts = ordered_json::array();
    for (const Point2& p : pl.points) pts.push_back(ordered_json::array({p.x, p.y}));
    pj["points"] = std::move(pts);
    polys.push_back(std::move(pj));
  }
  j["map"] = ordered_json{{"polylines", std::move(polys)}};
  j["seed"] = s.seed;
  return j;
}

Scene scene_from_json(const json& j) {
  Scene s;
  s.ego_index = j.at("ego_index").get<std::size_t>();
  s.dt = j.at("dt").get<double>();
  s.t_obs = j.at("t_obs").get<std::size_t>();
  const json& pos = j.at("positions");
  const json& val = j.at("valid");
  s.agents = pos.size();
  if (s.agents == 0 || val.size() != s.agents) throw std::runtime_error("scene: positions/valid agent count mismatch");
  const std::size_t T = pos[0].size();
  if (T <= s.t_obs) throw std::runtime_error("scene: no future steps");
  s.t_fut = T - s.t_obs;
  if (s.ego_index >= s.agents) throw std::runtime_error("scene: ego_index out of range");
  s.positions.assign(s.agents * T * 2, 0.0);
  s.valid.assign(s.agents * T, 0);
  for (std::size_t m = 0; m < s.agents; ++m) {
    if (pos[m].size() != T || val[m].size() != T) throw std::runtime_error("scene: ragged agent rows");
    for (std::size_t t = 0; t < T; ++t) {
      s.set_pos(m, t, {pos[m][t].at(0).get<double>(), pos[m][t].at(1).get<double>()});
      s.valid[m * T + t] = val[m][t].get<bool>() ? 1 : 0;
    }
  }
  for (const json& pj : j.at("map").at("polylines")) {
    Polyline pl;
    pl.type = parse_polyline_type(pj.at("type_tag").get<std::string>());
    for (const json& p : pj.at("points")) pl.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    s.map.polylines.push_back(std::move(pl));
  }
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

ordered_json shard_stats(const DatasetShard& shard) {
  std::size_t valid_agents = 0, late = 0, speed_n = 0;
  double speed_sum = 0.0, speed_sq = 0.0, speed_max = 0.0;
  std::vector<std::size_t> speed_hist(16, 0);
  for (const Scene& s : shard.scenes) {
    for (std::size_t m = 0; m < s.agents; ++m) {
      if (s.is_valid(m, s.t_obs - 1)) ++valid_agents;
      if (!s.is_valid(m, 0)) ++late;
      for (std::size_t t = 1; t < s.steps(); ++t) {
        if (!s.is_valid(m, t) || !s.is_valid(m, t - 1)) continue;
        const Point2 a = s.pos(m, t - 1), b = s.pos(m, t);
        const double v = std::hypot(b.x - a.x, b.y - a.y) / s.dt;
        speed_sum += v;
        speed_sq += v * v;
        speed_max = std::max(speed_max, v);
        ++speed_n;
        ++speed_hist[std::min<std::size_t>(15, static_cast<std::size_t>(v))];
      }
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(speed_n, 1));
  const double mean = speed_sum / n;
  ordered_json j;
  j["split"] = std::string(to_string(shard.split));
  j["scenes"] = shard.scenes.size();
  j["generator_seed"] = shard.generator_seed;
  j["mean_agents_at_last_observed"] =
      shard.scenes.empty() ? 0.0 : static_cast<double>(valid_agents) / static_cast<double>(shard.scenes.size());
  j["late_entry_agents"] = late;
  j["speed_mean"] = mean;
  j["speed_std"] = std::sqrt(std::max(0.0, speed_sq / n - mean * mean));
  j["speed_max"] = speed_max;
  j["speed_histogram_1mps"] = speed_hist;
  return j;
}

void write_shard(const std::filesystem::path& path, const DatasetShard& shard) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write shard '" + path.string() + "'");
  for (const Scene& s : shard.scenes) os << scene_to_json(s).dump() << '\n';
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

DatasetShard read_shard(const std::filesystem::path& path, Split split) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read shard '" + path.string() + "'");
  DatasetShard shard;
  shard.split = split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      shard.scenes.push_back(scene_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return shard;
}

}  // namespace trajmae
