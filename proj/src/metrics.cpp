#include "trajmae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace trajmae {

namespace {

double err(const ForecastSample& f, std::size_t k, std::size_t t, std::size_t m) {
  return std::hypot(f.px(k, t, m) - f.tx(t, m), f.py(k, t, m) - f.ty(t, m));
}

// Last valid future step of an agent, or steps when none.
std::size_t final_step(const ForecastSample& f, std::size_t m) {
  for (std::size_t t = f.steps; t-- > 0;) {
    if (f.is_valid(t, m)) return t;
  }
  return f.steps;
}

void check(const ForecastSample& f) {
  if (f.modes == 0) throw std::invalid_argument("metrics: forecast has no modes");
  if (f.pred.size() != f.modes * f.steps * f.agents * 2 || f.truth.size() != f.steps * f.agents * 2 ||
      f.valid.size() != f.steps * f.agents || f.ego >= f.agents) {
    throw std::invalid_argument("metrics: inconsistent forecast sample");
  }
}

bool joint_over(const ForecastSample& f, const std::vector<bool>& use_mode, double threshold, double& jade,
                double& jfde, double& jmr) {
  std::vector<std::size_t> last(f.agents);
  std::size_t active = 0;
  for (std::size_t m = 0; m < f.agents; ++m) {
    last[m] = final_step(f, m);
    if (last[m] < f.steps) ++active;
  }
  if (active == 0) return false;
  jade = std::numeric_limits<double>::infinity();
  jfde = std::numeric_limits<double>::infinity();
  jmr = 1.0;
  bool any = false;
  for (std::size_t k = 0; k < f.modes; ++k) {
    if (!use_mode[k]) continue;
    any = true;
    double sum = 0.0;
    std::size_t n = 0;
    double fsum = 0.0;
    bool all_hit = true;
    for (std::size_t m = 0; m < f.agents; ++m) {
      if (last[m] == f.steps) continue;
      for (std::size_t t = 0; t < f.steps; ++t) {
        if (!f.is_valid(t, m)) continue;
        sum += err(f, k, t, m);
        ++n;
      }
      const double fe = err(f, k, last[m], m);
      fsum += fe;
      if (fe > threshold) all_hit = false;
    }
    jade = std::min(jade, sum / static_cast<double>(n));
    jfde = std::min(jfde, fsum / static_cast<double>(active));
    if (all_hit) jmr = 0.0;
  }
  if (!any) {
    jade = jfde = 0.0;
    jmr = 1.0;
  }
  return true;
}

std::vector<bool> collisions(const ForecastSample& f, double radius, bool ego_only) {
  std::vector<bool> out(f.modes, false);
  const double lim = 2.0 * radius;
  for (std::size_t k = 0; k < f.modes; ++k) {
    for (std::size_t t = 0; t < f.steps && !out[k]; ++t) {
      for (std::size_t i = 0; i < f.agents && !out[k]; ++i) {
        if (!f.is_valid(t, i)) continue;
        for (std::size_t j = i + 1; j < f.agents; ++j) {
          if (!f.is_valid(t, j)) continue;
          if (ego_only && i != f.ego && j != f.ego) continue;
          if (std::hypot(f.px(k, t, i) - f.px(k, t, j), f.py(k, t, i) - f.py(k, t, j)) < lim) {
            out[k] = true;
            break;
          }
        }
      }
    }
  }
  return out;
}

double rate(const std::vector<bool>& flags) {
  const auto n = std::count(flags.begin(), flags.end(), true);
  return static_cast<double>(n) / static_cast<double>(flags.size());
}

}  // namespace

bool ego_displacement(const ForecastSample& f, double threshold, double& min_ade, double& min_fde, double& miss) {
  check(f);
  const std::size_t e = f.ego;
  const std::size_t last = final_step(f, e);
  if (last == f.steps) return false;
  min_ade = std::numeric_limits<double>::infinity();
  min_fde = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < f.modes; ++k) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < f.steps; ++t) {
      if (!f.is_valid(t, e)) continue;
      sum += err(f, k, t, e);
      ++n;
    }
    min_ade = std::min(min_ade, sum / static_cast<double>(n));
    min_fde = std::min(min_fde, err(f, k, last, e));
  }
  miss = min_fde > threshold ? 1.0 : 0.0;
  return true;
}

bool joint_displacement(const ForecastSample& f, double threshold, double& min_joint_ade, double& min_joint_fde,
                        double& min_joint_mr) {
  check(f);
  return joint_over(f, std::vector<bool>(f.modes, true), threshold, min_joint_ade, min_joint_fde, min_joint_mr);
}

std::vector<bool> mode_cross_collisions(const ForecastSample& f, double radius) {
  check(f);
  return collisions(f, radius, false);
}

std::vector<bool> mode_ego_collisions(const ForecastSample& f, double radius) {
  check(f);
  return collisions(f, radius, true);
}

double cross_collision_rate(const ForecastSample& f, double radius) { return rate(mode_cross_collisions(f, radius)); }

double ego_collision_rate(const ForecastSample& f, double radius) { return rate(mode_ego_collisions(f, radius)); }

double consistent_min_joint_mr(const ForecastSample& f, double threshold, double radius) {
  const std::vector<bool> coll = mode_cross_collisions(f, radius);
  std::vector<bool> use(f.modes);
  bool any = false;
  for (std::size_t k = 0; k < f.modes; ++k) {
    use[k] = !coll[k];
    any = any || use[k];
  }
  if (!any) return 1.0;
  double a = 0.0, b = 0.0, mr = 1.0;
  if (!joint_over(f, use, threshold, a, b, mr)) return 1.0;
  return mr;
}

SceneMetrics evaluate_scene(const ForecastSample& f, const MetricParams& p) {
  SceneMetrics s;
  s.ego_evaluated = ego_displacement(f, p.miss_threshold, s.min_ade, s.min_fde, s.miss);
  s.joint_evaluated = joint_displacement(f, p.miss_threshold, s.min_joint_ade, s.min_joint_fde, s.min_joint_mr);
  const std::vector<bool> cross = collisions(f, p.collision_radius, false);
  const std::vector<bool> ego = collisions(f, p.collision_radius, true);
  s.cross_collision = rate(cross);
  s.ego_collision = rate(ego);
  s.consistent_min_joint_mr = consistent_min_joint_mr(f, p.miss_threshold, p.collision_radius);
  if (s.joint_evaluated) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < f.modes; ++k) {
      std::vector<bool> only(f.modes, false);
      only[k] = true;
      double a = 0.0, b = 0.0, mr = 0.0;
      joint_over(f, only, p.miss_threshold, a, b, mr);
      if (a < best) {
        best = a;
        s.best_joint_mode = k;
      }
    }
    s.best_mode_cross_collision = cross[s.best_joint_mode];
    s.best_mode_ego_collision = ego[s.best_joint_mode];
  }
  return s;
}

EvalReport aggregate(const std::vector<SceneMetrics>& per_scene) {
  EvalReport r;
  r.scenes = per_scene.size();
  for (const SceneMetrics& s : per_scene) {
    if (s.ego_evaluated) {
      ++r.ego_scenes;
      r.min_ade += s.min_ade;
      r.min_fde += s.min_fde;
      r.miss_rate += s.miss;
    } else {
      ++r.skipped_ego;
    }
    if (s.joint_evaluated) {
      ++r.joint_scenes;
      r.min_joint_ade += s.min_joint_ade;
      r.min_joint_fde += s.min_joint_fde;
      r.min_joint_mr += s.min_joint_mr;
      r.consistent_min_joint_mr += s.consistent_min_joint_mr;
    }
    r.cross_collision_rate += s.cross_collision;
    r.ego_collision_rate += s.ego_collision;
  }
  auto div = [](double& v, std::size_t n) { v = n == 0 ? 0.0 : v / static_cast<double>(n); };
  div(r.min_ade, r.ego_scenes);
  div(r.min_fde, r.ego_scenes);
  div(r.miss_rate, r.ego_scenes);
  div(r.min_joint_ade, r.joint_scenes);
  div(r.min_joint_fde, r.joint_scenes);
  div(r.min_joint_mr, r.joint_scenes);
  div(r.consistent_min_joint_mr, r.joint_scenes);
  div(r.cross_collision_rate, r.scenes);
  div(r.ego_collision_rate, r.scenes);
  return r;
}

nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["minADE"] = r.min_ade;
  j["minFDE"] = r.min_fde;
  j["MR"] = r.miss_rate;
  j["minJointADE"] = r.min_joint_ade;
  j["minJointFDE"] = r.min_joint_fde;
  j["minJointMR"] = r.min_joint_mr;
  j["crossCollisionRate"] = r.cross_collision_rate;
  j["egoCollisionRate"] = r.ego_collision_rate;
  j["consistentMinJointMR"] = r.consistent_min_joint_mr;
  j["scenes"] = r.scenes;
  j["egoScenes"] = r.ego_scenes;
  j["jointScenes"] = r.joint_scenes;
  j["skippedEgo"] = r.skipped_ego;
  return j;
}

nlohmann::ordered_json scene_metrics_to_json(const SceneMetrics& m) {
  nlohmann::ordered_json j;
  j["egoEvaluated"] = m.ego_evaluated;
  j["minADE"] = m.min_ade;
  j["minFDE"] = m.min_fde;
  j["MR"] = m.miss;
  j["jointEvaluated"] = m.joint_evaluated;
  j["minJointADE"] = m.min_joint_ade;
  j["minJointFDE"] = m.min_joint_fde;
  j["minJointMR"] = m.min_joint_mr;
  j["crossCollisionRate"] = m.cross_collision;
  j["egoCollisionRate"] = m.ego_collision;
  j["consistentMinJointMR"] = m.consistent_min_joint_mr;
  j["bestJointMode"] = m.best_joint_mode;
  j["bestJointModeCrossCollision"] = m.best_mode_cross_collision;
  j["bestJointModeEgoCollision"] = m.best_mode_ego_collision;
  return j;
}

}  // namespace trajmae
