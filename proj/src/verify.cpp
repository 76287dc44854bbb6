#include "trajmae/verify.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>

#include "trajmae/masking.hpp"
#include "trajmae/model.hpp"
#include "trajmae/training.hpp"

namespace trajmae {

void SuiteResult::fail(std::string msg) {
  ++violations;
  if (failures.size() < 8) failures.push_back(std::move(msg));
}

nlohmann::ordered_json SuiteResult::to_json() const {
  nlohmann::ordered_json j;
  j["suite"] = name;
  j["property"] = property;
  j["passed"] = passed();
  j["cases"] = cases;
  j["checks"] = checks;
  j["violations"] = violations;
  j["skipped"] = skipped;
  j["worst"] = worst;
  j["failures"] = failures;
  if (!details.empty()) j["details"] = details;
  return j;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

const MapLayout kLayouts[] = {MapLayout::Straight, MapLayout::Curve, MapLayout::FourWay};
const double kRatioGrid[] = {0.3, 0.4, 0.5, 0.6, 0.7, 0.8};

Scene random_scene(RngStream& rng, std::size_t agents, std::size_t t_obs, std::size_t t_fut,
                   std::size_t points = kMapPoints) {
  const MapLayout layout = kLayouts[rng.below(3)];
  const VectorMap map = build_map(layout, rng.next_u64(), points);
  SimConfig sim;
  sim.agents = agents;
  sim.t_obs = t_obs;
  sim.t_fut = t_fut;
  return simulate_scene(map, rng.next_u64(), sim);
}

// Cuts a random non-ego agent's observed validity to a shorter prefix or
// suffix, to exercise the short-agent rules.
void shorten_agents(Scene& s, RngStream& rng) {
  for (std::size_t m = 0; m < s.agents; ++m) {
    if (m == s.ego_index || !rng.bernoulli(0.3)) continue;
    const std::size_t keep = 1 + rng.below(s.t_obs);
    const bool late = rng.bernoulli(0.5);
    for (std::size_t t = 0; t < s.t_obs; ++t) {
      const bool drop = late ? t < s.t_obs - keep : t >= keep;
      if (!drop) continue;
      s.valid[m * s.steps() + t] = 0;
      s.set_pos(m, t, {0.0, 0.0});
    }
    if (!late) {
      for (std::size_t t = s.t_obs; t < s.steps(); ++t) {
        s.valid[m * s.steps() + t] = 0;
        s.set_pos(m, t, {0.0, 0.0});
      }
    }
  }
}

std::vector<std::size_t> valid_steps_of(const Scene& s, std::size_t m) {
  std::vector<std::size_t> v;
  for (std::size_t t = 0; t < s.t_obs; ++t) {
    if (s.is_valid(m, t)) v.push_back(t);
  }
  return v;
}

std::vector<std::size_t> masked_steps_of(const MaskPlan& p, std::size_t m) {
  std::vector<std::size_t> v;
  for (std::size_t t = 0; t < p.cols; ++t) {
    if (p.at(m, t)) v.push_back(t);
  }
  return v;
}

// Expected masked count of an agent with v valid steps.
std::size_t expected_agent_count(std::size_t v, std::size_t k) { return v == 0 ? 0 : (v <= k ? v - 1 : k); }

std::vector<std::size_t> closest_half(const Scene& s) {
  const std::size_t e = s.ego_index;
  const double ex = s.pos(e, s.t_obs - 1).x, ey = s.pos(e, s.t_obs - 1).y;
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t m = 0; m < s.agents; ++m) {
    if (m == e) continue;
    double best = std::numeric_limits<double>::infinity();
    const auto steps = valid_steps_of(s, m);
    if (!steps.empty()) {
      const Point2 p = s.pos(m, steps.back());
      best = std::sqrt((p.x - ex) * (p.x - ex) + (p.y - ey) * (p.y - ey));
    }
    d.push_back({best, m});
  }
  std::stable_sort(d.begin(), d.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < (s.agents) / 2; ++i) out.push_back(d[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> runs_of(const MaskPlan& p, std::size_t r) {
  std::vector<std::size_t> runs;
  std::size_t len = 0;
  for (std::size_t c = 0; c < p.cols; ++c) {
    if (p.at(r, c)) {
      ++len;
    } else if (len > 0) {
      runs.push_back(len);
      len = 0;
    }
  }
  if (len > 0) runs.push_back(len);
  return runs;
}

std::string fmt_g(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

std::string where(Strategy s, double r, std::size_t i) {
  std::ostringstream os;
  os << to_string(s) << " r=" << r << " case " << i;
  return os.str();
}

void check_traj_plan(SuiteResult& res, const MaskPlan& plan, const Scene& s, double ratio, const std::string& tag) {
  const std::size_t k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(s.t_obs) - 1e-9));
  ++res.checks;
  if (plan.rows != s.agents || plan.cols != s.t_obs) {
    res.fail(tag + ": plan extent");
    return;
  }
  for (std::size_t m = 0; m < s.agents; ++m) {
    for (std::size_t t = 0; t < s.t_obs; ++t) {
      if (plan.at(m, t) && !s.is_valid(m, t)) res.fail(tag + ": masked invalid slot");
    }
  }
  auto suffix = [&](std::size_t m) {
    const auto v = valid_steps_of(s, m);
    const std::size_t n = expected_agent_count(v.size(), k);
    return std::vector<std::size_t>(v.end() - static_cast<std::ptrdiff_t>(n), v.end());
  };
  auto prefix = [&](std::size_t m) {
    const auto v = valid_steps_of(s, m);
    const std::size_t n = expected_agent_count(v.size(), k);
    return std::vector<std::size_t>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n));
  };
  const std::size_t e = s.ego_index;
  switch (plan.strategy) {
    case Strategy::Temporal:
      for (std::size_t m = 0; m < s.agents; ++m) {
        ++res.checks;
        if (masked_steps_of(plan, m).size() != expected_agent_count(valid_steps_of(s, m).size(), k)) {
          res.fail(tag + ": agent " + std::to_string(m) + " count");
        }
      }
      break;
    case Strategy::Social: {
      ++res.checks;
      if (masked_steps_of(plan, e) != suffix(e)) res.fail(tag + ": ego is not masked on its last k valid steps");
      const auto near = closest_half(s);
      for (std::size_t m = 0; m < s.agents; ++m) {
        if (m == e) continue;
        ++res.checks;
        const bool is_near = std::binary_search(near.begin(), near.end(), m);
        const auto want = is_near ? prefix(m) : std::vector<std::size_t>{};
        if (masked_steps_of(plan, m) != want) res.fail(tag + ": agent " + std::to_string(m) + " social pattern");
      }
      break;
    }
    case Strategy::SocialTemporal: {
      ++res.checks;
      if (masked_steps_of(plan, e) != suffix(e)) res.fail(tag + ": ego is not masked on its last k valid steps");
      const std::size_t others = s.agents - 1;
      std::size_t not_suffix = 0;
      for (std::size_t m = 0; m < s.agents; ++m) {
        if (m == e) continue;
        ++res.checks;
        const auto got = masked_steps_of(plan, m);
        if (got.size() != expected_agent_count(valid_steps_of(s, m).size(), k)) {
          res.fail(tag + ": agent " + std::to_string(m) + " count");
        }
        if (got != suffix(m)) ++not_suffix;
      }
      ++res.checks;
      if (not_suffix > (others + 1) / 2) res.fail(tag + ": more temporal-half agents than ceil((M-1)/2)");
      break;
    }
    default: res.fail(tag + ": not a trajectory strategy");
  }
}

void check_map_plan(SuiteResult& res, const MaskPlan& plan, const VectorMap& map, double ratio,
                    const std::string& tag) {
  const std::size_t P = map.polylines.front().points.size();
  ++res.checks;
  if (plan.rows != map.polylines.size() || plan.cols != P) {
    res.fail(tag + ": plan extent");
    return;
  }
  auto ceil_count = [&](std::size_t n) {
    return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  };
  switch (plan.strategy) {
    case Strategy::Point: {
      ++res.checks;
      if (plan.count() != ceil_count(plan.rows * P)) res.fail(tag + ": map-wide point count");
      break;
    }
    case Strategy::Block: {
      const std::size_t k = ceil_count(P);
      for (std::size_t r = 0; r < plan.rows; ++r) {
        ++res.checks;
        const auto runs = runs_of(plan, r);
        if (runs.size() != 1 || runs[0] != k) res.fail(tag + ": polyline " + std::to_string(r) + " block run");
      }
      break;
    }
    case Strategy::Patch: {
      const std::size_t k = ceil_count(P);
      std::vector<std::size_t> want(k / kPatchWidth, kPatchWidth);
      if (k % kPatchWidth != 0) want.push_back(k % kPatchWidth);
      std::sort(want.begin(), want.end());
      for (std::size_t r = 0; r < plan.rows; ++r) {
        ++res.checks;
        auto runs = runs_of(plan, r);
        std::sort(runs.begin(), runs.end());
        if (runs != want) res.fail(tag + ": polyline " + std::to_string(r) + " patch run lengths");
      }
      break;
    }
    default: res.fail(tag + ": not a map strategy");
  }
}

}  // namespace

SuiteResult masking_suite(std::uint64_t seed, std::size_t per_cell) {
  const auto t0 = Clock::now();
  SuiteResult res;
  res.name = "masking";
  res.property = "masking exactness";
  const Strategy strategies[] = {Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal,
                                 Strategy::Point,  Strategy::Patch,    Strategy::Block};
  const std::size_t horizons[] = {8, 10, 20};
  RngStream root(seed, "verify.masking");
  for (Strategy st : strategies) {
    for (double r : kRatioGrid) {
      for (std::size_t i = 0; i < per_cell; ++i) {
        ++res.cases;
        RngStream rng = root.derive(res.cases);
        const std::string tag = where(st, r, i);
        try {
          if (is_trajectory_strategy(st)) {
            Scene s = random_scene(rng, 2 + rng.below(7), horizons[rng.below(3)], 3);
            shorten_agents(s, rng);
            RngStream mr = rng.derive("mask");
            RngStream copy = mr;
            const MaskPlan plan = plan_traj_mask(st, r, s, mr);
            check_traj_plan(res, plan, s, r, tag);
            RngStream again = copy;
            ++res.checks;
            if (plan_traj_mask(st, r, s, again).masked != plan.masked) res.fail(tag + ": not seed-deterministic");
          } else {
            const VectorMap map = build_map(kLayouts[rng.below(3)], rng.next_u64());
            RngStream mr = rng.derive("mask");
            RngStream copy = mr;
            const MaskPlan plan = plan_map_mask(st, r, map, mr);
            check_map_plan(res, plan, map, r, tag);
            ++res.checks;
            if (plan_map_mask(st, r, map, copy).masked != plan.masked) res.fail(tag + ": not seed-deterministic");
          }
        } catch (const std::exception& e) {
          res.fail(tag + ": threw " + e.what());
        }
      }
    }
  }
  res.seconds = seconds_since(t0);
  return res;
}

SuiteResult blindness_suite(std::uint64_t seed, std::size_t cases, bool inject_fault) {
  const auto t0 = Clock::now();
  SuiteResult res;
  res.name = "blindness";
  res.property = "encoder blindness";
  RngStream root(seed, "verify.blindness");
  const Strategy traj[] = {Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal};
  const Strategy map_s[] = {Strategy::Point, Strategy::Patch, Strategy::Block};
  for (std::size_t i = 0; i < cases; ++i) {
    ++res.cases;
    RngStream rng = root.derive(i);
    ModelConfig mc;
    mc.d_model = 8;
    mc.heads = 1 + rng.below(2);
    mc.enc_layers = 1 + rng.below(2);
    mc.dec_layers = 0;
    mc.fore_layers = 1;
    mc.modes = 2;
    mc.t_obs = 10;
    mc.t_fut = 3;
    mc.max_agents = 6;
    const TrajMAE model(mc);
    const ParamStore params = model.make_params(rng.next_u64());
    const bool on_map = i % 2 == 1;
    Scene s = random_scene(rng, 2 + rng.below(5), mc.t_obs, mc.t_fut);
    shorten_agents(s, rng);
    const double r = kRatioGrid[rng.below(6)];
    const Strategy st = on_map ? map_s[rng.below(3)] : traj[rng.below(3)];
    RngStream mr = rng.derive("mask");
    const MaskPlan plan = on_map ? plan_map_mask(st, r, s.map, mr) : plan_traj_mask(st, r, s, mr);
    const std::vector<const Scene*> batch{&s};
    LatticeInput in = on_map ? make_map_input(batch, mc.map_points, mc.max_polylines)
                             : make_traj_input(batch, mc.t_obs, mc.max_agents);
    std::vector<std::uint8_t> masked(in.slots(), 0);
    for (std::size_t row = 0; row < plan.rows; ++row) {
      for (std::size_t c = 0; c < plan.cols; ++c) masked[in.slot(0, row, c)] = plan.at(row, c) ? 1 : 0;
    }
    const std::vector<std::uint8_t> visible = visible_slots(in.valid, masked);
    std::vector<std::uint8_t> include = visible;
    if (inject_fault) {
      for (std::size_t k = 0; k < include.size(); ++k) {
        if (in.valid[k] && masked[k]) {
          include[k] = 1;
          break;
        }
      }
    }
    LatticeInput moved = in;
    for (std::size_t k = 0; k < in.slots(); ++k) {
      if (!masked[k]) continue;
      const double delta = rng.bernoulli(0.5) ? 1000.0 : -1000.0;
      for (std::size_t f = 0; f < in.features; ++f) moved.feats[k * in.features + f] += delta;
      moved.coords[k * 2] += delta;
      moved.coords[k * 2 + 1] += delta;
    }
    auto context = [&](const LatticeInput& x) {
      Graph g;
      ParamBinding p(g, params, false);
      const TokenSet t = on_map ? model.encode_map(p, x, include) : model.encode_traj(p, x, include);
      return context_lattice(t);
    };
    const Tensor a = context(in), b = context(moved);
    double worst = 0.0;
    const std::size_t d = a.cols();
    for (std::size_t k = 0; k < in.slots(); ++k) {
      if (!visible[k] || include[k] != visible[k]) continue;
      for (std::size_t c = 0; c < d; ++c) {
        ++res.checks;
        worst = std::max(worst, std::fabs(a.at(k, c) - b.at(k, c)));
        if (std::isnan(b.at(k, c))) worst = std::numeric_limits<double>::infinity();
      }
    }
    res.worst = std::max(res.worst, worst);
    if (worst != 0.0) {
      res.fail("case " + std::to_string(i) + " (" + std::string(to_string(st)) + "): visible context moved by " +
               std::to_string(worst));
    }
  }
  res.seconds = seconds_since(t0);
  return res;
}

SuiteResult gradient_suite(std::uint64_t seed, std::size_t configs, double tolerance, std::size_t max_params) {
  const auto t0 = Clock::now();
  SuiteResult res;
  res.name = "gradient";
  res.property = "gradient fidelity";
  RngStream root(seed, "verify.gradient");
  const double h = 1e-5;
  std::size_t coords = 0, over_total = 0, unrefined = 0;
  double refined = 0.0;
  for (std::size_t i = 0; i < configs; ++i) {
    ++res.cases;
    RngStream rng = root.derive(i);
    ModelConfig mc;
    ParamStore params;
    std::unique_ptr<TrajMAE> model;
    for (;;) {
      mc.d_model = 4 * (1 + rng.below(2));
      mc.heads = 1 + rng.below(2);
      mc.enc_layers = 1 + rng.below(2);
      mc.dec_layers = rng.below(mc.enc_layers);
      mc.fore_layers = 1;
      mc.ffn_mult = 1 + rng.below(2);
      mc.modes = 1 + rng.below(3);
      mc.t_obs = 4 + rng.below(3);
      mc.t_fut = 2 + rng.below(2);
      mc.max_agents = 3;
      mc.map_points = 5;
      model = std::make_unique<TrajMAE>(mc);
      params = model->make_params(rng.next_u64());
      if (params.total_size() <= max_params) break;
    }
    // Nudge parameters away from their structured initial values.
    for (auto& [_, e] : params.entries()) {
      for (double& x : e.value.storage()) x += 0.1 * rng.normal();
    }
    std::vector<Scene> scenes;
    for (int b = 0; b < 2; ++b) scenes.push_back(random_scene(rng, 2 + rng.below(2), mc.t_obs, mc.t_fut, mc.map_points));
    const std::vector<const Scene*> batch{&scenes[0], &scenes[1]};
    const std::size_t kind = i % 3;
    const double spread = 1.0;
    FinetuneConfig fc;
    std::function<double(GradMap*)> loss;

    if (kind == 2) {
      // Futures never reach the encoders, so they can sit next to one mode.
      const std::vector<ForecastSample> base = predict(*model, params, batch);
      for (std::size_t b = 0; b < scenes.size(); ++b) {
        const ForecastSample& fs = base[b];
        const std::size_t k = rng.below(fs.modes);
        for (std::size_t t = 0; t < fs.steps; ++t) {
          for (std::size_t m = 0; m < scenes[b].agents; ++m) {
            if (!scenes[b].is_valid(m, mc.t_obs + t)) continue;
            scenes[b].set_pos(m, mc.t_obs + t,
                              {fs.px(k, t, m) + spread * rng.normal(), fs.py(k, t, m) + spread * rng.normal()});
          }
        }
      }
      loss = [&](GradMap* grads) { return forecast_step(*model, params, batch, fc, grads); };
    } else {
      const bool traj = kind == 0;
      const Strategy traj_s[] = {Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal};
      const Strategy map_s[] = {Strategy::Point, Strategy::Patch, Strategy::Block};
      const Strategy st = traj ? traj_s[rng.below(3)] : map_s[rng.below(3)];
      const double ratio = st == Strategy::Patch ? 0.6 : 0.3 + 0.1 * static_cast<double>(rng.below(4));
      const LatticeInput in = traj ? make_traj_input(batch, mc.t_obs, mc.max_agents)
                                   : make_map_input(batch, mc.map_points, mc.max_polylines);
      std::vector<std::uint8_t> masked(in.slots(), 0);
      RngStream mask_rng = rng.derive("mask");
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const MaskPlan plan =
            traj ? plan_traj_mask(st, ratio, *batch[b], mask_rng) : plan_map_mask(st, ratio, batch[b]->map, mask_rng);
        for (std::size_t r = 0; r < plan.rows; ++r) {
          for (std::size_t c = 0; c < plan.cols; ++c) masked[in.slot(b, r, c)] = plan.at(r, c) ? 1 : 0;
        }
      }
      auto rebuild = [net = model.get(), in, masked, traj](ParamBinding& p) {
        return traj ? net->reconstruct_traj(p, in, masked) : net->reconstruct_map(p, in, masked);
      };
      // Masked targets are hidden from the encoder; place them near the base prediction.
      Tensor targets;
      {
        Graph g;
        ParamBinding p(g, params, false);
        targets = rebuild(p).coords.value();
      }
      for (double& x : targets.storage()) x += spread * rng.normal();
      loss = [&, rebuild, targets](GradMap* grads) {
        Graph g;
        ParamBinding p(g, params, grads != nullptr);
        Var l = masked_huber_loss(rebuild(p).coords, g.constant(targets), 1.0);
        if (grads != nullptr) {
          g.backward(l);
          *grads = p.gradients();
        }
        return l.value().item();
      };
    }

    auto traced = [&](std::uint64_t& digest) {
      ad::RegionTrace trace;
      const double v = loss(nullptr);
      digest = trace.digest();
      return v;
    };
    GradMap analytic;
    loss(&analytic);
    std::uint64_t base = 0;
    traced(base);
    double worst = 0.0;
    std::string worst_name;
    std::size_t over = 0;
    for (auto& [name, e] : params.entries()) {
      const std::vector<double>& ga = analytic.at(name);
      for (std::size_t j = 0; j < e.value.size(); ++j) {
        double& w = e.value.storage()[j];
        const double saved = w;
        std::uint64_t dp = 0, dm = 0;
        w = saved + h;
        const double lp = traced(dp);
        w = saved - h;
        const double lm = traced(dm);
        w = saved;
        ++coords;
        if (dp != base || dm != base) {
          ++res.skipped;
          continue;
        }
        ++res.checks;
        const double num = (lp - lm) / (2.0 * h);
        const double rel = std::fabs(ga[j] - num) / std::max({std::fabs(ga[j]), std::fabs(num), 1e-8});
        if (!(rel < tolerance)) {
          ++over;
          // Five-point stencil at a wider step, reported alongside the strict check.
          const double H = 1e-3;
          std::uint64_t d[4];
          double f[4];
          const double off[4] = {2 * H, H, -H, -2 * H};
          for (int q = 0; q < 4; ++q) {
            w = saved + off[q];
            f[q] = traced(d[q]);
          }
          w = saved;
          if (d[0] == base && d[1] == base && d[2] == base && d[3] == base) {
            const double fine = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * H);
            refined = std::max(refined,
                               std::fabs(ga[j] - fine) / std::max({std::fabs(ga[j]), std::fabs(fine), 1e-8}));
          } else {
            ++unrefined;
          }
        }
        if (rel > worst) {
          worst = rel;
          worst_name = name + "[" + std::to_string(j) + "] (analytic " + fmt_g(ga[j]) + ", numeric " +
                       fmt_g(num) + ")";
        }
      }
    }
    res.worst = std::max(res.worst, worst);
    if (!(worst < tolerance)) {
      res.fail("config " + std::to_string(i) + " (" + std::to_string(params.total_size()) +
               " params): max relative error " + fmt_g(worst) + " at " + worst_name + "; " + std::to_string(over) +
               " coordinates over tolerance");
    }
    over_total += over;
  }
  res.details["coordinates"] = coords;
  res.details["over_tolerance"] = over_total;
  res.details["five_point_worst"] = refined;
  res.details["five_point_unchecked"] = unrefined;
  if (res.skipped * 100 > coords) {
    res.fail("too many coordinates straddle kinks: " + std::to_string(res.skipped) + " of " + std::to_string(coords));
  }
  res.seconds = seconds_since(t0);
  return res;
}

SuiteResult masked_loss_suite(std::uint64_t seed, std::size_t cases) {
  const auto t0 = Clock::now();
  SuiteResult res;
  res.name = "masked-loss";
  res.property = "masked-only loss";
  RngStream root(seed, "verify.masked_loss");
  for (std::size_t i = 0; i < cases; ++i) {
    ++res.cases;
    RngStream rng = root.derive(i);
    const std::size_t n = 4 + rng.below(60);
    std::vector<std::uint8_t> masked(n, 0);
    for (auto& m : masked) m = rng.bernoulli(0.5) ? 1 : 0;
    masked[rng.below(n)] = 1;
    std::size_t v = rng.below(n);
    while (masked[v]) v = (v + 1) % n;
    Tensor pred(Shape{n, 2}), tgt(Shape{n, 2});
    for (double& x : pred.storage()) x = 3.0 * rng.normal();
    for (double& x : tgt.storage()) x = 3.0 * rng.normal();
    // A visible slot with zero residual would hide a leak, so keep one far off.
    pred.at(v, 0) = tgt.at(v, 0) + 5.0;

    Graph g;
    Var p = g.variable(pred);
    Var t = g.variable(tgt);
    Var loss = lattice_huber_loss(p, t, masked, 1.0);
    g.backward(loss);
    const std::vector<double> gt = g.grad(t), gp = g.grad(p);
    for (std::size_t r = 0; r < n; ++r) {
      if (masked[r]) continue;
      for (std::size_t c = 0; c < 2; ++c) {
        ++res.checks;
        if (gt[r * 2 + c] != 0.0 || gp[r * 2 + c] != 0.0) {
          res.fail("case " + std::to_string(i) + ": nonzero gradient at visible row " + std::to_string(r));
        }
      }
    }
    Tensor pred2 = pred;
    for (std::size_t r = 0; r < n; ++r) {
      if (masked[r]) continue;
      pred2.at(r, 0) = 1e6 * rng.normal();
      pred2.at(r, 1) = std::numeric_limits<double>::quiet_NaN();
    }
    Graph g2;
    const double l2 = lattice_huber_loss(g2.constant(pred2), g2.constant(tgt), masked, 1.0).value().item();
    ++res.checks;
    if (l2 != loss.value().item()) res.fail("case " + std::to_string(i) + ": loss depends on visible predictions");

    // Same value as the compact form over the masked rows alone.
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < n; ++r) {
      if (masked[r]) rows.push_back(r);
    }
    Graph g3;
    const double l3 = masked_huber_loss(ad::gather_rows(g3.constant(pred), rows),
                                        ad::gather_rows(g3.constant(tgt), rows), 1.0)
                          .value()
                          .item();
    ++res.checks;
    const double diff = std::fabs(l3 - loss.value().item());
    res.worst = std::max(res.worst, diff);
    if (diff > 1e-12 * std::max(1.0, std::fabs(l3))) res.fail("case " + std::to_string(i) + ": compact loss differs");
  }
  res.seconds = seconds_since(t0);
  return res;
}

SuiteResult quota_suite(std::uint64_t seed, std::size_t cases) {
  const auto t0 = Clock::now();
  SuiteResult res;
  res.name = "quota";
  res.property = "schedule reproduction";
  const std::vector<Strategy> all{Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal, Strategy::Point,
                                  Strategy::Patch};
  {
    ++res.cases;
    const StagePlan p = build_schedule(ScheduleMode::ContinualPretrain,
                                       {Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal}, 120000, 30000);
    const std::vector<std::vector<std::size_t>> by_strategy{{60000, 30000, 30000}, {0, 90000, 30000}, {0, 0, 120000}};
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t s = 0; s < 3; ++s) {
        ++res.checks;
        if (p.quota[s][i] != by_strategy[i][s]) res.fail("reference schedule mismatch at strategy " + std::to_string(i));
      }
    }
  }
  RngStream rng(seed, "verify.quota");
  for (std::size_t c = 0; c < cases; ++c) {
    ++res.cases;
    const std::size_t n = 1 + rng.below(5);
    const std::size_t N = 1 + rng.below(10000);
    const std::size_t carry = n == 1 ? rng.below(10000) : rng.below((N - 1) / (n - 1) + 1);
    const std::vector<Strategy> order(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    StagePlan p;
    try {
      p = build_schedule(ScheduleMode::ContinualPretrain, order, N, carry);
    } catch (const std::exception& e) {
      res.fail("valid triple rejected: " + std::string(e.what()));
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t total = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t want = s < i ? 0 : (s == i ? N - (n - 1 - i) * carry : carry);
        ++res.checks;
        if (p.quota[s][i] != want) res.fail("quota formula at (" + std::to_string(i) + "," + std::to_string(s) + ")");
        total += p.quota[s][i];
      }
      ++res.checks;
      if (total != N) res.fail("strategy " + std::to_string(i) + " receives " + std::to_string(total) + " != N");
    }
    if (c % 10 == 0) {
      RngStream srng = rng.derive(c);
      for (std::size_t s = 0; s < n; ++s) {
        const auto seq = materialize_stage_sequence(p, s, srng);
        for (std::size_t i = 0; i < n; ++i) {
          ++res.checks;
          if (static_cast<std::size_t>(std::count(seq.begin(), seq.end(), order[i])) != p.quota[s][i]) {
            res.fail("materialized stage does not honor its quota");
          }
        }
      }
    }
    if (n > 1) {
      ++res.checks;
      const std::size_t bad = N / (n - 1) + (N % (n - 1) == 0 ? 0 : 1);
      try {
        build_schedule(ScheduleMode::ContinualPretrain, order, N, bad);
        res.fail("violated constraint accepted");
      } catch (const std::invalid_argument&) {
      }
    }
  }
  res.seconds = seconds_since(t0);
  return res;
}

SceneMetrics reference_metrics(const ForecastSample& f, const MetricParams& prm) {
  const std::size_t C = f.modes, T = f.steps, M = f.agents;
  auto err = [&](std::size_t k, std::size_t t, std::size_t m) {
    const double dx = f.pred[((k * T + t) * M + m) * 2] - f.truth[(t * M + m) * 2];
    const double dy = f.pred[((k * T + t) * M + m) * 2 + 1] - f.truth[(t * M + m) * 2 + 1];
    return std::sqrt(dx * dx + dy * dy);
  };
  auto ok = [&](std::size_t t, std::size_t m) { return f.valid[t * M + m] != 0; };
  SceneMetrics s;

  std::vector<std::size_t> ego_t;
  for (std::size_t t = 0; t < T; ++t) {
    if (ok(t, f.ego)) ego_t.push_back(t);
  }
  if (!ego_t.empty()) {
    s.ego_evaluated = true;
    s.min_ade = s.min_fde = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < C; ++k) {
      double total = 0.0;
      for (std::size_t t : ego_t) total += err(k, t, f.ego);
      s.min_ade = std::min(s.min_ade, total / static_cast<double>(ego_t.size()));
      s.min_fde = std::min(s.min_fde, err(k, ego_t.back(), f.ego));
    }
    s.miss = s.min_fde > prm.miss_threshold ? 1.0 : 0.0;
  }

  std::vector<std::vector<std::size_t>> steps(M);
  std::size_t active = 0;
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t t = 0; t < T; ++t) {
      if (ok(t, m)) steps[m].push_back(t);
    }
    if (!steps[m].empty()) ++active;
  }
  std::vector<double> jade(C), jfde(C);
  std::vector<bool> clears(C);
  if (active > 0) {
    for (std::size_t k = 0; k < C; ++k) {
      double total = 0.0, finals = 0.0;
      std::size_t n = 0;
      bool all = true;
      for (std::size_t m = 0; m < M; ++m) {
        if (steps[m].empty()) continue;
        for (std::size_t t : steps[m]) {
          total += err(k, t, m);
          ++n;
        }
        const double fe = err(k, steps[m].back(), m);
        finals += fe;
        if (!(fe <= prm.miss_threshold)) all = false;
      }
      jade[k] = total / static_cast<double>(n);
      jfde[k] = finals / static_cast<double>(active);
      clears[k] = all;
    }
    s.joint_evaluated = true;
    s.min_joint_ade = *std::min_element(jade.begin(), jade.end());
    s.min_joint_fde = *std::min_element(jfde.begin(), jfde.end());
    s.min_joint_mr = std::find(clears.begin(), clears.end(), true) != clears.end() ? 0.0 : 1.0;
    s.best_joint_mode = static_cast<std::size_t>(std::min_element(jade.begin(), jade.end()) - jade.begin());
  }

  std::vector<bool> cross(C, false), ego(C, false);
  for (std::size_t k = 0; k < C; ++k) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t j = 0; j < M; ++j) {
          if (i >= j || !ok(t, i) || !ok(t, j)) continue;
          const double dx = f.pred[((k * T + t) * M + i) * 2] - f.pred[((k * T + t) * M + j) * 2];
          const double dy = f.pred[((k * T + t) * M + i) * 2 + 1] - f.pred[((k * T + t) * M + j) * 2 + 1];
          if (std::sqrt(dx * dx + dy * dy) < 2.0 * prm.collision_radius) {
            cross[k] = true;
            if (i == f.ego || j == f.ego) ego[k] = true;
          }
        }
      }
    }
  }
  double nc = 0.0, ne = 0.0;
  for (std::size_t k = 0; k < C; ++k) {
    nc += cross[k] ? 1.0 : 0.0;
    ne += ego[k] ? 1.0 : 0.0;
  }
  s.cross_collision = nc / static_cast<double>(C);
  s.ego_collision = ne / static_cast<double>(C);

  s.consistent_min_joint_mr = 1.0;
  if (active > 0) {
    for (std::size_t k = 0; k < C; ++k) {
      if (!cross[k] && clears[k]) s.consistent_min_joint_mr = 0.0;
    }
  }
  if (s.joint_evaluated) {
    s.best_mode_cross_collision = cross[s.best_joint_mode];
    s.best_mode_ego_collision = ego[s.best_joint_mode];
  }
  return s;
}

SuiteResult metric_oracle_suite(std::uint64_t seed, std::size_t cases, double tolerance) {
  const auto t0 = Clock::now();
  SuiteResult res;
  res.name = "metric-oracle";
  res.property = "metric oracle equivalence";
  RngStream root(seed, "verify.metrics");
  for (std::size_t i = 0; i < cases; ++i) {
    ++res.cases;
    RngStream rng = root.derive(i);
    const std::size_t M = 1 + rng.below(4), C = 1 + rng.below(3), T = 1 + rng.below(5);
    ForecastSample f(C, T, M, rng.below(M));
    const double spread = rng.bernoulli(0.5) ? 1.0 : 6.0;
    for (double& x : f.truth) x = rng.uniform(-spread, spread);
    for (std::size_t k = 0; k < C; ++k) {
      const double noise = std::array<double, 4>{0.0, 0.3, 1.5, 4.0}[rng.below(4)];
      for (std::size_t j = 0; j < T * M * 2; ++j) f.pred[k * T * M * 2 + j] = f.truth[j] + noise * rng.normal();
    }
    for (std::size_t m = 0; m < M; ++m) {
      switch (rng.below(4)) {
        case 0: {
          const std::size_t cut = rng.below(T + 1);
          for (std::size_t t = cut; t < T; ++t) f.valid[t * M + m] = 0;
          break;
        }
        case 1: {
          const std::size_t start = rng.below(T + 1);
          for (std::size_t t = 0; t < start; ++t) f.valid[t * M + m] = 0;
          break;
        }
        case 2:
          for (std::size_t t = 0; t < T; ++t) f.valid[t * M + m] = rng.bernoulli(0.6) ? 1 : 0;
          break;
        default: break;
      }
    }
    MetricParams mp;
    mp.miss_threshold = std::array<double, 3>{0.5, 2.0, 4.0}[rng.below(3)];
    mp.collision_radius = std::array<double, 3>{0.25, 0.5, 1.5}[rng.below(3)];
    const SceneMetrics a = evaluate_scene(f, mp);
    const SceneMetrics b = reference_metrics(f, mp);
    auto cmp = [&](const char* what, double x, double y) {
      ++res.checks;
      const double d = std::fabs(x - y);
      res.worst = std::max(res.worst, d);
      if (!(d <= tolerance)) {
        res.fail("case " + std::to_string(i) + ": " + what + " " + std::to_string(x) + " vs " + std::to_string(y));
      }
    };
    auto flag = [&](const char* what, bool x, bool y) {
      ++res.checks;
      if (x != y) res.fail("case " + std::to_string(i) + ": " + what + " flag differs");
    };
    flag("ego evaluated", a.ego_evaluated, b.ego_evaluated);
    flag("joint evaluated", a.joint_evaluated, b.joint_evaluated);
    if (a.ego_evaluated && b.ego_evaluated) {
      cmp("minADE", a.min_ade, b.min_ade);
      cmp("minFDE", a.min_fde, b.min_fde);
      cmp("MR", a.miss, b.miss);
    }
    if (a.joint_evaluated && b.joint_evaluated) {
      cmp("minJointADE", a.min_joint_ade, b.min_joint_ade);
      cmp("minJointFDE", a.min_joint_fde, b.min_joint_fde);
      cmp("minJointMR", a.min_joint_mr, b.min_joint_mr);
      flag("best-mode cross collision", a.best_mode_cross_collision, b.best_mode_cross_collision);
      flag("best-mode ego collision", a.best_mode_ego_collision, b.best_mode_ego_collision);
    }
    cmp("crossCollisionRate", a.cross_collision, b.cross_collision);
    cmp("egoCollisionRate", a.ego_collision, b.ego_collision);
    cmp("consistentMinJointMR", a.consistent_min_joint_mr, b.consistent_min_joint_mr);
  }
  res.seconds = seconds_since(t0);
  return res;
}

}  // namespace trajmae
