#include "trajmae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace trajmae {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Social: return "S";
    case Strategy::Temporal: return "T";
    case Strategy::SocialTemporal: return "ST";
    case Strategy::Point: return "Po";
    case Strategy::Patch: return "Pa";
    case Strategy::Block: return "B";
  }
  return "?";
}

Strategy parse_strategy(std::string_view s) {
  if (s == "S") return Strategy::Social;
  if (s == "T") return Strategy::Temporal;
  if (s == "ST") return Strategy::SocialTemporal;
  if (s == "Po") return Strategy::Point;
  if (s == "Pa") return Strategy::Patch;
  if (s == "B") return Strategy::Block;
  throw std::invalid_argument("unknown masking strategy '" + std::string(s) + "'");
}

bool is_trajectory_strategy(Strategy s) {
  return s == Strategy::Social || s == Strategy::Temporal || s == Strategy::SocialTemporal;
}

std::size_t MaskPlan::count() const {
  return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), std::uint8_t{1}));
}

std::size_t MaskPlan::count_row(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) n += at(r, c) ? 1 : 0;
  return n;
}

std::size_t masked_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

namespace {

void check_ratio(double ratio) {
  if (!(ratio >= 0.1 - 1e-12 && ratio <= 0.9 + 1e-12)) {
    throw MaskError("masking ratio " + std::to_string(ratio) + " outside [0.1, 0.9]");
  }
}

std::vector<std::size_t> valid_steps(const Scene& s, std::size_t m) {
  std::vector<std::size_t> v;
  for (std::size_t t = 0; t < s.t_obs; ++t) {
    if (s.is_valid(m, t)) v.push_back(t);
  }
  return v;
}

// Last k valid steps; never hides every step of an agent.
void mask_suffix(MaskPlan& plan, std::size_t m, const std::vector<std::size_t>& steps, std::size_t k) {
  if (steps.empty()) return;
  const std::size_t n = steps.size() <= k ? steps.size() - 1 : k;
  for (std::size_t i = steps.size() - n; i < steps.size(); ++i) plan.masked[m * plan.cols + steps[i]] = 1;
}

// First k valid steps; leaves the last valid step visible when short.
void mask_prefix(MaskPlan& plan, std::size_t m, const std::vector<std::size_t>& steps, std::size_t k) {
  if (steps.empty()) return;
  const std::size_t n = steps.size() <= k ? steps.size() - 1 : k;
  for (std::size_t i = 0; i < n; ++i) plan.masked[m * plan.cols + steps[i]] = 1;
}

void mask_random(MaskPlan& plan, std::size_t m, const std::vector<std::size_t>& steps, std::size_t k,
                 RngStream& rng) {
  if (steps.empty()) return;
  const std::size_t n = steps.size() <= k ? steps.size() - 1 : k;
  for (std::size_t i : rng.sample_without_replacement(steps.size(), n)) plan.masked[m * plan.cols + steps[i]] = 1;
}

}  // namespace

std::vector<std::size_t> nearby_agents(const Scene& scene) {
  const std::size_t e = scene.ego_index;
  const Point2 ego = scene.pos(e, scene.t_obs - 1);
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t m = 0; m < scene.agents; ++m) {
    if (m == e) continue;
    double dist = std::numeric_limits<double>::infinity();
    for (std::size_t t = scene.t_obs; t-- > 0;) {
      if (scene.is_valid(m, t)) {
        const Point2 p = scene.pos(m, t);
        dist = std::hypot(p.x - ego.x, p.y - ego.y);
        break;
      }
    }
    cand.emplace_back(dist, m);
  }
  std::sort(cand.begin(), cand.end());
  const std::size_t want = (scene.agents - 1 + 1) / 2;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < want && i < cand.size(); ++i) out.push_back(cand[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

MaskPlan plan_traj_mask(Strategy strategy, double ratio, const Scene& scene, RngStream& rng) {
  if (!is_trajectory_strategy(strategy)) {
    throw std::invalid_argument("plan_traj_mask: '" + std::string(to_string(strategy)) + "' is a map strategy");
  }
  check_ratio(ratio);
  const std::size_t k = masked_count(ratio, scene.t_obs);
  if (k == 0 || k >= scene.t_obs) {
    throw MaskError("degenerate mask: ratio " + std::to_string(ratio) + " over " + std::to_string(scene.t_obs) +
                    " observed steps masks " + std::to_string(k));
  }
  MaskPlan plan;
  plan.strategy = strategy;
  plan.ratio = ratio;
  plan.rows = scene.agents;
  plan.cols = scene.t_obs;
  plan.masked.assign(plan.rows * plan.cols, 0);
  const std::size_t e = scene.ego_index;

  switch (strategy) {
    case Strategy::Social: {
      mask_suffix(plan, e, valid_steps(scene, e), k);
      for (std::size_t m : nearby_agents(scene)) mask_prefix(plan, m, valid_steps(scene, m), k);
      break;
    }
    case Strategy::Temporal: {
      for (std::size_t m = 0; m < scene.agents; ++m) mask_random(plan, m, valid_steps(scene, m), k, rng);
      break;
    }
    case Strategy::SocialTemporal: {
      mask_suffix(plan, e, valid_steps(scene, e), k);
      std::vector<std::size_t> others;
      for (std::size_t m = 0; m < scene.agents; ++m) {
        if (m != e) others.push_back(m);
      }
      rng.shuffle(others);
      const std::size_t first = (others.size() + 1) / 2;
      for (std::size_t i = 0; i < others.size(); ++i) {
        const auto steps = valid_steps(scene, others[i]);
        if (i < first) {
          mask_random(plan, others[i], steps, k, rng);
        } else {
          mask_suffix(plan, others[i], steps, k);
        }
      }
      break;
    }
    default: break;
  }
  return plan;
}

MaskPlan plan_map_mask(Strategy strategy, double ratio, const VectorMap& map, RngStream& rng,
                       std::size_t patch_width) {
  if (is_trajectory_strategy(strategy)) {
    throw std::invalid_argument("plan_map_mask: '" + std::string(to_string(strategy)) + "' is a trajectory strategy");
  }
  check_ratio(ratio);
  if (map.polylines.empty()) throw MaskError("plan_map_mask: empty map");
  const std::size_t P = map.polylines.front().points.size();
  for (const Polyline& pl : map.polylines) {
    if (pl.points.size() != P) throw MaskError("plan_map_mask: polylines have different point counts");
  }
  MaskPlan plan;
  plan.strategy = strategy;
  plan.ratio = ratio;
  plan.rows = map.polylines.size();
  plan.cols = P;
  plan.masked.assign(plan.rows * plan.cols, 0);

  if (strategy == Strategy::Point) {
    const std::size_t total = plan.rows * P;
    const std::size_t k = masked_count(ratio, total);
    if (k == 0 || k >= total) throw MaskError("degenerate mask: point masking would hide " + std::to_string(k) + " points");
    for (std::size_t i : rng.sample_without_replacement(total, k)) plan.masked[i] = 1;
    return plan;
  }

  const std::size_t k = masked_count(ratio, P);
  if (k == 0 || k >= P) {
    throw MaskError("degenerate mask: ratio " + std::to_string(ratio) + " over " + std::to_string(P) + " points masks " +
                    std::to_string(k));
  }
  if (strategy == Strategy::Block) {
    for (std::size_t r = 0; r < plan.rows; ++r) {
      const std::size_t start = rng.below(P - k + 1);
      for (std::size_t c = start; c < start + k; ++c) plan.masked[r * P + c] = 1;
    }
    return plan;
  }

  // Patch: runs of width w separated by at least one visible point, with one
  // shorter run carrying the remainder.
  const std::size_t w = patch_width;
  if (w == 0 || P < w) {
    throw MaskError("patch masking needs at least " + std::to_string(w) + " points per polyline, got " +
                    std::to_string(P));
  }
  std::vector<std::size_t> runs(k / w, w);
  if (k % w != 0) runs.push_back(k % w);
  const std::size_t n_runs = runs.size();
  if (k + n_runs - 1 > P) {
    throw MaskError("patch masking cannot place " + std::to_string(n_runs) + " separated runs covering " +
                    std::to_string(k) + " of " + std::to_string(P) + " points");
  }
  const std::size_t free = P - k - (n_runs - 1);
  for (std::size_t r = 0; r < plan.rows; ++r) {
    std::vector<std::size_t> order = runs;
    rng.shuffle(order);
    // Stars and bars: n_runs bars among free + n_runs slots.
    std::vector<std::size_t> bars = rng.sample_without_replacement(free + n_runs, n_runs);
    std::sort(bars.begin(), bars.end());
    std::size_t pos = 0;
    std::size_t prev_bar = 0;
    for (std::size_t i = 0; i < n_runs; ++i) {
      const std::size_t gap = i == 0 ? bars[0] : bars[i] - prev_bar - 1;
      prev_bar = bars[i];
      pos += gap + (i == 0 ? 0 : 1);
      for (std::size_t c = pos; c < pos + order[i]; ++c) plan.masked[r * P + c] = 1;
      pos += order[i];
    }
  }
  return plan;
}

std::vector<std::uint8_t> observed_validity(const Scene& scene) {
  std::vector<std::uint8_t> v(scene.agents * scene.t_obs);
  for (std::size_t m = 0; m < scene.agents; ++m) {
    for (std::size_t t = 0; t < scene.t_obs; ++t) v[m * scene.t_obs + t] = scene.is_valid(m, t) ? 1 : 0;
  }
  return v;
}

VisibleSplit split_visible(const std::vector<std::uint8_t>& valid, const MaskPlan& plan) {
  if (valid.size() != plan.masked.size()) {
    throw std::invalid_argument("split_visible: lattice of " + std::to_string(valid.size()) + " slots vs plan of " +
                                std::to_string(plan.masked.size()));
  }
  VisibleSplit out;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) continue;
    (plan.masked[i] ? out.targets : out.visible).push_back(i);
  }
  return out;
}

nlohmann::ordered_json mask_to_json(const MaskPlan& plan) {
  nlohmann::ordered_json j;
  j["strategy"] = std::string(to_string(plan.strategy));
  j["ratio"] = plan.ratio;
  j["rows"] = plan.rows;
  j["cols"] = plan.cols;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < plan.rows; ++r) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < plan.cols; ++c) row.push_back(plan.at(r, c) ? 1 : 0);
    rows.push_back(std::move(row));
  }
  j["masked"] = std::move(rows);
  return j;
}

}  // namespace trajmae
