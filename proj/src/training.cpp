#include "trajmae/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

namespace trajmae {

// ---- Losses -------------------------------------------------------------

Var masked_huber_loss(Var predictions, Var targets, double delta) {
  if (predictions.shape() != targets.shape()) {
    throw ShapeError("masked_huber_loss: predictions " + shape_str(predictions.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  if (predictions.value().size() == 0) throw std::invalid_argument("masked_huber_loss: empty masked set");
  return ad::mean(ad::huber(ad::sub(predictions, targets), delta));
}

Var lattice_huber_loss(Var predictions, Var targets, const std::vector<std::uint8_t>& masked, double delta) {
  if (predictions.shape() != targets.shape()) {
    throw ShapeError("lattice_huber_loss: predictions " + shape_str(predictions.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const std::size_t cols = predictions.value().cols();
  if (masked.size() * cols != predictions.value().size()) throw ShapeError("lattice_huber_loss: mask size");
  std::vector<bool> sel(predictions.value().size());
  bool any = false;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    sel[i] = masked[i / cols] != 0;
    any = any || sel[i];
  }
  if (!any) throw std::invalid_argument("lattice_huber_loss: empty masked set");
  return ad::masked_mean(ad::huber(ad::sub(predictions, targets), delta), sel);
}

// ---- Schedules ----------------------------------------------------------

std::string_view to_string(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::ContinualPretrain: return "continual-pretrain";
    case ScheduleMode::Sequential: return "sequential";
    case ScheduleMode::Joint: return "joint";
  }
  return "?";
}

ScheduleMode parse_schedule_mode(std::string_view s) {
  if (s == "continual-pretrain") return ScheduleMode::ContinualPretrain;
  if (s == "sequential") return ScheduleMode::Sequential;
  if (s == "joint") return ScheduleMode::Joint;
  throw std::invalid_argument("unknown schedule mode '" + std::string(s) + "'");
}

std::size_t StagePlan::stage_steps(std::size_t stage) const {
  const auto& q = quota.at(stage);
  if (mode == ScheduleMode::Joint) return q.empty() ? 0 : *std::max_element(q.begin(), q.end());
  std::size_t n = 0;
  for (std::size_t x : q) n += x;
  return n;
}

std::size_t StagePlan::total_steps() const {
  std::size_t n = 0;
  for (std::size_t s = 0; s < stages(); ++s) n += stage_steps(s);
  return n;
}

nlohmann::ordered_json StagePlan::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = std::string(to_string(mode));
  nlohmann::ordered_json names = nlohmann::ordered_json::array();
  for (Strategy s : order) names.push_back(std::string(to_string(s)));
  j["order"] = names;
  j["N"] = N;
  j["M_carry"] = carry;
  nlohmann::ordered_json stages_j = nlohmann::ordered_json::array();
  for (std::size_t s = 0; s < stages(); ++s) {
    nlohmann::ordered_json q;
    for (std::size_t i = 0; i < order.size(); ++i) q[std::string(to_string(order[i]))] = quota[s][i];
    nlohmann::ordered_json st;
    st["quota"] = q;
    st["steps"] = stage_steps(s);
    stages_j.push_back(st);
  }
  j["stages"] = stages_j;
  j["total_steps"] = total_steps();
  return j;
}

StagePlan build_schedule(ScheduleMode mode, const std::vector<Strategy>& order, std::size_t N, std::size_t carry) {
  const std::size_t n = order.size();
  if (n == 0) throw std::invalid_argument("build_schedule: empty strategy order");
  if (N == 0) throw std::invalid_argument("build_schedule: N must be positive");
  std::set<Strategy> seen(order.begin(), order.end());
  if (seen.size() != n) throw std::invalid_argument("build_schedule: strategy order repeats a strategy");
  StagePlan plan;
  plan.mode = mode;
  plan.order = order;
  plan.N = N;
  plan.carry = carry;
  switch (mode) {
    case ScheduleMode::ContinualPretrain: {
      // Overflow-safe form of N > (n - 1) * carry.
      if (carry != 0 && (n - 1) > (N - 1) / carry) {
        throw std::invalid_argument("build_schedule: need N > (n-1)*M_carry, got (n=" + std::to_string(n) +
                                    ", N=" + std::to_string(N) + ", M_carry=" + std::to_string(carry) + ")");
      }
      plan.quota.assign(n, std::vector<std::size_t>(n, 0));
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t i = 0; i <= s; ++i) plan.quota[s][i] = (i == s) ? N - (n - 1 - i) * carry : carry;
      }
      break;
    }
    case ScheduleMode::Sequential:
      plan.quota.assign(n, std::vector<std::size_t>(n, 0));
      for (std::size_t s = 0; s < n; ++s) plan.quota[s][s] = N;
      break;
    case ScheduleMode::Joint:
      plan.quota.assign(1, std::vector<std::size_t>(n, N));
      break;
  }
  return plan;
}

std::vector<Strategy> materialize_stage_sequence(const StagePlan& plan, std::size_t stage, RngStream& rng) {
  if (stage >= plan.stages()) {
    throw std::out_of_range("materialize_stage_sequence: stage " + std::to_string(stage) + " of " +
                            std::to_string(plan.stages()));
  }
  std::vector<Strategy> seq;
  for (std::size_t i = 0; i < plan.order.size(); ++i) seq.insert(seq.end(), plan.quota[stage][i], plan.order[i]);
  rng.shuffle(seq);
  return seq;
}

double lr_at(std::size_t step, const LrSchedule& s) {
  if (s.period == 0) return s.lr0;
  const std::size_t h = std::min(s.horizon / s.period, step / s.period);
  return s.lr0 / std::pow(s.factor, static_cast<double>(h));
}

// ---- Shared helpers -----------------------------------------------------

namespace {

std::vector<const Scene*> sample_batch(const DatasetShard& data, std::size_t batch_size, RngStream& rng) {
  std::vector<const Scene*> out(batch_size);
  for (auto& s : out) s = &data.scenes[rng.below(data.scenes.size())];
  return out;
}

void clip_gradients(GradMap& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double f = max_norm / norm;
  for (auto& [_, g] : grads) {
    for (double& x : g) x *= f;
  }
}

LatticeInput make_input(const TrajMAE& model, const std::vector<const Scene*>& batch, Target target) {
  const ModelConfig& c = model.config();
  if (target == Target::Trajectory) return make_traj_input(batch, c.t_obs, c.max_agents);
  return make_map_input(batch, c.map_points, c.max_polylines);
}

std::vector<std::uint8_t> batch_masks(const LatticeInput& in, const std::vector<const Scene*>& batch, Target target,
                                      Strategy strategy, double ratio, RngStream& rng) {
  if (is_trajectory_strategy(strategy) != (target == Target::Trajectory)) {
    throw std::invalid_argument("strategy " + std::string(to_string(strategy)) + " does not apply to the " +
                                std::string(to_string(target)) + " target");
  }
  std::vector<std::uint8_t> masked(in.slots(), 0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const MaskPlan plan = target == Target::Trajectory ? plan_traj_mask(strategy, ratio, *batch[b], rng)
                                                       : plan_map_mask(strategy, ratio, batch[b]->map, rng);
    for (std::size_t r = 0; r < plan.rows; ++r) {
      for (std::size_t c = 0; c < plan.cols; ++c) masked[in.slot(b, r, c)] = plan.at(r, c) ? 1 : 0;
    }
  }
  return masked;
}

Tensor gather_coords(const LatticeInput& in, const std::vector<std::size_t>& slots) {
  Tensor t(Shape{slots.size(), 2});
  for (std::size_t i = 0; i < slots.size(); ++i) {
    t.at(i, 0) = in.coords[slots[i] * 2];
    t.at(i, 1) = in.coords[slots[i] * 2 + 1];
  }
  return t;
}

Reconstruction reconstruct(const TrajMAE& model, ParamBinding& p, const LatticeInput& in,
                           const std::vector<std::uint8_t>& masked, Target target) {
  return target == Target::Trajectory ? model.reconstruct_traj(p, in, masked) : model.reconstruct_map(p, in, masked);
}

}  // namespace

// ---- Pre-training -------------------------------------------------------

std::string_view to_string(Target t) { return t == Target::Trajectory ? "traj" : "map"; }

Target parse_target(std::string_view s) {
  if (s == "traj") return Target::Trajectory;
  if (s == "map") return Target::Map;
  throw std::invalid_argument("unknown pre-training target '" + std::string(s) + "'");
}

double PretrainConfig::ratio_for(Strategy s) const {
  auto it = ratio.find(s);
  return it == ratio.end() ? default_ratio : it->second;
}

void PretrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("pretrain: batch size must be at least 1");
  if (!(lr > 0.0)) throw std::invalid_argument("pretrain: lr must be positive");
  if (!(huber_delta > 0.0)) throw std::invalid_argument("pretrain: huber delta must be positive");
  if (clip_norm < 0.0) throw std::invalid_argument("pretrain: clip norm must be non-negative");
}

NumericalAbort::NumericalAbort(std::size_t s, std::string strat)
    : std::runtime_error("non-finite loss at step " + std::to_string(s) + " (strategy " + strat + ")"),
      step(s),
      strategy(std::move(strat)) {}

double reconstruction_step(const TrajMAE& model, const ParamStore& params, const std::vector<const Scene*>& batch,
                           Target target, Strategy strategy, double ratio, RngStream& mask_rng, double delta,
                           GradMap* grads) {
  Graph g;
  ParamBinding p(g, params, grads != nullptr);
  const LatticeInput in = make_input(model, batch, target);
  const std::vector<std::uint8_t> masked = batch_masks(in, batch, target, strategy, ratio, mask_rng);
  Reconstruction rec = reconstruct(model, p, in, masked, target);
  Var loss = masked_huber_loss(rec.coords, g.constant(gather_coords(in, rec.targets)), delta);
  if (grads != nullptr) {
    g.backward(loss);
    *grads = p.gradients();
  }
  return loss.value().item();
}

PretrainResult run_pretrain(const TrajMAE& model, const PretrainConfig& cfg, const DatasetShard& train, Target target,
                            const PretrainHooks& hooks, const Checkpoint* resume) {
  cfg.validate();
  if (train.scenes.empty()) throw std::invalid_argument("run_pretrain: empty training set");
  for (Strategy s : cfg.order) {
    if (is_trajectory_strategy(s) != (target == Target::Trajectory)) {
      throw std::invalid_argument("run_pretrain: strategy " + std::string(to_string(s)) + " does not apply to the " +
                                  std::string(to_string(target)) + " target");
    }
  }
  const StagePlan plan = build_schedule(cfg.mode, cfg.order, cfg.N, cfg.carry);

  PretrainResult res;
  Checkpoint& ck = res.checkpoint;
  std::size_t stage = 0, in_stage = 0, global = 0;
  RngStream batch_rng(cfg.seed, "pretrain.batch");
  RngStream mask_rng(cfg.seed, "pretrain.mask");
  if (resume != nullptr) {
    if (!(resume->model == model.config())) throw CheckpointError("run_pretrain: resume checkpoint model differs");
    ck = *resume;
    auto counter = [&](const char* name) {
      auto it = ck.counters.find(name);
      if (it == ck.counters.end()) throw CheckpointError(std::string("run_pretrain: resume lacks counter ") + name);
      return static_cast<std::size_t>(it->second);
    };
    if (counter("seed") != cfg.seed) throw CheckpointError("run_pretrain: resume checkpoint was made with another seed");
    stage = counter("stage");
    in_stage = counter("step_in_stage");
    global = counter("global_step");
    if (ck.rng.count("batch") == 0 || ck.rng.count("mask") == 0) {
      throw CheckpointError("run_pretrain: resume lacks rng states");
    }
    batch_rng = ck.rng.at("batch").stream();
    mask_rng = ck.rng.at("mask").stream();
  } else {
    ck.model = model.config();
    ck.params = model.make_params(cfg.seed);
  }

  auto snapshot = [&] {
    ck.counters["seed"] = cfg.seed;
    ck.counters["stage"] = stage;
    ck.counters["step_in_stage"] = in_stage;
    ck.counters["global_step"] = global;
    ck.rng["batch"] = RngState::of(batch_rng);
    ck.rng["mask"] = RngState::of(mask_rng);
  };

  const RngStream schedule_root(cfg.seed, "pretrain.schedule");
  while (stage < plan.stages()) {
    std::vector<Strategy> seq;
    if (plan.mode != ScheduleMode::Joint) {
      RngStream srng = schedule_root.derive(static_cast<std::uint64_t>(stage));
      seq = materialize_stage_sequence(plan, stage, srng);
    }
    const std::size_t steps = plan.stage_steps(stage);
    for (; in_stage < steps; ++in_stage) {
      if (hooks.stop_after && global >= *hooks.stop_after) {
        snapshot();
        return res;
      }
      const std::vector<const Scene*> batch = sample_batch(train, cfg.batch_size, batch_rng);
      GradMap grads;
      double loss = 0.0;
      std::string label;
      const std::vector<Strategy> active = plan.mode == ScheduleMode::Joint ? plan.order : std::vector{seq[in_stage]};
      for (Strategy s : active) {
        GradMap g;
        loss += reconstruction_step(model, ck.params, batch, target, s, cfg.ratio_for(s), mask_rng, cfg.huber_delta,
                                    &g);
        accumulate(grads, g);
        if (!label.empty()) label += "+";
        label += to_string(s);
      }
      if (!std::isfinite(loss)) throw NumericalAbort(global, label);
      clip_gradients(grads, cfg.clip_norm);
      adam_step(ck.params, grads, cfg.lr);
      res.curve.push_back({global, stage, label, loss});
      ++global;
    }
    ++stage;
    in_stage = 0;
    snapshot();
    if (hooks.on_stage_end) hooks.on_stage_end(stage - 1, ck);
  }
  snapshot();
  res.finished = true;
  return res;
}

double reconstruction_rmse(const TrajMAE& model, const ParamStore& params, const DatasetShard& data, Target target,
                           Strategy strategy, double ratio, std::uint64_t seed, std::size_t batch_size) {
  if (data.scenes.empty()) throw std::invalid_argument("reconstruction_rmse: empty data");
  RngStream rng(seed, "rmse");
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t start = 0; start < data.scenes.size(); start += batch_size) {
    std::vector<const Scene*> batch;
    for (std::size_t i = start; i < std::min(start + batch_size, data.scenes.size()); ++i) {
      batch.push_back(&data.scenes[i]);
    }
    Graph g;
    ParamBinding p(g, params, false);
    const LatticeInput in = make_input(model, batch, target);
    const std::vector<std::uint8_t> masked = batch_masks(in, batch, target, strategy, ratio, rng);
    const Reconstruction rec = reconstruct(model, p, in, masked, target);
    const Tensor& pred = rec.coords.value();
    for (std::size_t i = 0; i < rec.targets.size(); ++i) {
      for (std::size_t c = 0; c < 2; ++c) {
        const double d = pred.at(i, c) - in.coords[rec.targets[i] * 2 + c];
        sq += d * d;
        ++n;
      }
    }
  }
  if (n == 0) throw std::invalid_argument("reconstruction_rmse: no masked slots");
  return std::sqrt(sq / static_cast<double>(n));
}

// ---- Fine-tuning --------------------------------------------------------

void FinetuneConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("finetune: batch size must be at least 1");
  if (!(lr.lr0 > 0.0)) throw std::invalid_argument("finetune: lr0 must be positive");
  if (!(lr.factor >= 1.0)) throw std::invalid_argument("finetune: anneal factor must be at least 1");
  if (!(huber_delta > 0.0)) throw std::invalid_argument("finetune: huber delta must be positive");
  if (ce_weight < 0.0) throw std::invalid_argument("finetune: ce weight must be non-negative");
}

ParamStore init_finetune_params(const TrajMAE& model, std::uint64_t seed, const Checkpoint* traj,
                                const Checkpoint* map) {
  ParamStore store = model.make_params(seed);
  std::vector<std::string> mismatched;
  auto load = [&](const Checkpoint* ck, const std::string& prefix) {
    if (ck == nullptr) return;
    for (auto& [name, e] : store.entries()) {
      if (name.rfind(prefix, 0) != 0) continue;
      if (!ck->params.contains(name)) {
        mismatched.push_back(name + " (missing)");
        continue;
      }
      const Tensor& src = ck->params.value(name);
      if (src.shape() != e.value.shape()) {
        mismatched.push_back(name + " (" + shape_str(src.shape()) + " vs " + shape_str(e.value.shape()) + ")");
        continue;
      }
      e.value = src;
    }
  };
  load(traj, "traj_enc.");
  load(map, "map_enc.");
  if (!mismatched.empty()) {
    std::string msg = "checkpoint does not match the model:";
    for (const auto& m : mismatched) msg += " " + m + ";";
    throw CheckpointError(msg);
  }
  return store;
}

namespace {

// Last observed position per (batch, agent); nullopt-like flag when the
// agent has no observed step.
struct Anchors {
  std::vector<double> xy;
  std::vector<std::uint8_t> ok;
};

Anchors anchors(const std::vector<const Scene*>& batch, std::size_t M) {
  Anchors a;
  a.xy.assign(batch.size() * M * 2, 0.0);
  a.ok.assign(batch.size() * M, 0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Scene& s = *batch[b];
    for (std::size_t m = 0; m < s.agents; ++m) {
      for (std::size_t t = s.t_obs; t-- > 0;) {
        if (!s.is_valid(m, t)) continue;
        const Point2 p = s.pos(m, t);
        a.xy[(b * M + m) * 2] = p.x;
        a.xy[(b * M + m) * 2 + 1] = p.y;
        a.ok[b * M + m] = 1;
        break;
      }
    }
  }
  return a;
}

}  // namespace

double forecast_step(const TrajMAE& model, const ParamStore& params, const std::vector<const Scene*>& batch,
                     const FinetuneConfig& cfg, GradMap* grads) {
  const ModelConfig& mc = model.config();
  Graph g;
  ParamBinding p(g, params, grads != nullptr);
  const LatticeInput traj = make_traj_input(batch, mc.t_obs, mc.max_agents);
  const LatticeInput map = make_map_input(batch, mc.map_points, mc.max_polylines);
  const Forecast f = model.forecast(p, traj, map);
  const Tensor& off = f.offsets.value();
  const std::size_t M = f.agents, C = f.modes, T = f.steps;
  const Anchors anc = anchors(batch, M);

  std::vector<std::size_t> rows;
  std::vector<double> tgt;
  std::vector<std::size_t> winners;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Scene& s = *batch[b];
    if (s.t_fut != T) throw std::invalid_argument("forecast_step: scene horizon differs from the model's");
    auto residual = [&](std::size_t k, std::size_t t, std::size_t m) {
      const std::size_t r = f.row(b, k, t, m);
      const Point2 truth = s.pos(m, s.t_obs + t);
      return std::hypot(anc.xy[(b * M + m) * 2] + off.at(r, 0) - truth.x,
                        anc.xy[(b * M + m) * 2 + 1] + off.at(r, 1) - truth.y);
    };
    auto usable = [&](std::size_t m, std::size_t t) { return anc.ok[b * M + m] && s.is_valid(m, s.t_obs + t); };
    // Winner by ego ADE; all agents when the ego has no usable future.
    std::vector<std::size_t> judge{s.ego_index};
    bool ego_usable = false;
    for (std::size_t t = 0; t < T; ++t) ego_usable = ego_usable || usable(s.ego_index, t);
    if (!ego_usable) {
      judge.clear();
      for (std::size_t m = 0; m < s.agents; ++m) judge.push_back(m);
    }
    double best = std::numeric_limits<double>::infinity();
    std::size_t win = C;
    for (std::size_t k = 0; k < C; ++k) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t m : judge) {
        for (std::size_t t = 0; t < T; ++t) {
          if (!usable(m, t)) continue;
          sum += residual(k, t, m);
          ++n;
        }
      }
      if (n == 0) break;
      const double ade = sum / static_cast<double>(n);
      if (ade < best) {
        best = ade;
        win = k;
      }
    }
    if (win == C) continue;
    ad::RegionTrace::note(win);
    winners.push_back(b * C + win);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t m = 0; m < s.agents; ++m) {
        if (!usable(m, t)) continue;
        const Point2 truth = s.pos(m, s.t_obs + t);
        rows.push_back(f.row(b, win, t, m));
        tgt.push_back(truth.x - anc.xy[(b * M + m) * 2]);
        tgt.push_back(truth.y - anc.xy[(b * M + m) * 2 + 1]);
      }
    }
  }
  if (rows.empty()) throw std::invalid_argument("forecast_step: batch has no future targets");
  Var reg = masked_huber_loss(ad::gather_rows(f.offsets, rows), g.constant(Tensor(Shape{rows.size(), 2}, tgt)),
                              cfg.huber_delta);
  Var ce = ad::scale(ad::mean(ad::pick(ad::log_softmax(f.logits), winners)), -cfg.ce_weight);
  Var loss = ad::add(reg, ce);
  if (grads != nullptr) {
    g.backward(loss);
    *grads = p.gradients();
  }
  return loss.value().item();
}

ForecastSample truth_sample(const Scene& s, std::size_t modes) {
  ForecastSample f(modes, s.t_fut, s.agents, s.ego_index);
  for (std::size_t t = 0; t < s.t_fut; ++t) {
    for (std::size_t m = 0; m < s.agents; ++m) {
      const Point2 p = s.pos(m, s.t_obs + t);
      f.truth[(t * s.agents + m) * 2] = p.x;
      f.truth[(t * s.agents + m) * 2 + 1] = p.y;
      f.valid[t * s.agents + m] = s.is_valid(m, s.t_obs + t) ? 1 : 0;
    }
  }
  return f;
}

std::vector<ForecastSample> predict(const TrajMAE& model, const ParamStore& params,
                                    const std::vector<const Scene*>& batch) {
  const ModelConfig& mc = model.config();
  Graph g;
  ParamBinding p(g, params, false);
  const LatticeInput traj = make_traj_input(batch, mc.t_obs, mc.max_agents);
  const LatticeInput map = make_map_input(batch, mc.map_points, mc.max_polylines);
  const Forecast f = model.forecast(p, traj, map);
  const Tensor& off = f.offsets.value();
  const Anchors anc = anchors(batch, f.agents);
  std::vector<ForecastSample> out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Scene& s = *batch[b];
    ForecastSample fs = truth_sample(s, f.modes);
    for (std::size_t k = 0; k < f.modes; ++k) {
      for (std::size_t t = 0; t < f.steps; ++t) {
        for (std::size_t m = 0; m < s.agents; ++m) {
          if (!anc.ok[b * f.agents + m]) continue;
          const std::size_t r = f.row(b, k, t, m);
          const std::size_t i = ((k * fs.steps + t) * fs.agents + m) * 2;
          fs.pred[i] = anc.xy[(b * f.agents + m) * 2] + off.at(r, 0);
          fs.pred[i + 1] = anc.xy[(b * f.agents + m) * 2 + 1] + off.at(r, 1);
        }
      }
    }
    out.push_back(std::move(fs));
  }
  return out;
}

EvalReport evaluate(const TrajMAE& model, const ParamStore& params, const DatasetShard& data, const MetricParams& mp,
                    std::size_t limit, std::size_t batch_size, std::vector<SceneMetrics>* per_scene) {
  const std::size_t n = limit == 0 ? data.scenes.size() : std::min(limit, data.scenes.size());
  std::vector<SceneMetrics> all;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<const Scene*> batch;
    for (std::size_t i = start; i < std::min(start + batch_size, n); ++i) batch.push_back(&data.scenes[i]);
    for (const ForecastSample& fs : predict(model, params, batch)) all.push_back(evaluate_scene(fs, mp));
  }
  if (per_scene != nullptr) *per_scene = all;
  return aggregate(all);
}

FinetuneResult run_finetune(const TrajMAE& model, ParamStore params, const FinetuneConfig& cfg,
                            const DatasetShard& train, const DatasetShard& val) {
  cfg.validate();
  if (train.scenes.empty()) throw std::invalid_argument("run_finetune: empty training set");
  if (cfg.eval_every != 0 && val.scenes.empty()) throw std::invalid_argument("run_finetune: empty validation set");
  FinetuneResult res;
  RngStream batch_rng(cfg.seed, "finetune.batch");
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<const Scene*> batch = sample_batch(train, cfg.batch_size, batch_rng);
    GradMap grads;
    const double loss = forecast_step(model, params, batch, cfg, &grads);
    if (!std::isfinite(loss)) throw NumericalAbort(step, "forecast");
    clip_gradients(grads, cfg.clip_norm);
    adam_step(params, grads, lr_at(step, cfg.lr));
    res.curve.push_back({step, 0, "forecast", loss});
    if (cfg.eval_every != 0 && (step + 1) % cfg.eval_every == 0) {
      res.validations.push_back({step + 1, evaluate(model, params, val, cfg.metrics, cfg.eval_scenes)});
    }
  }
  res.checkpoint.model = model.config();
  res.checkpoint.params = std::move(params);
  res.checkpoint.counters["seed"] = cfg.seed;
  res.checkpoint.counters["global_step"] = cfg.steps;
  res.checkpoint.rng["batch"] = RngState::of(batch_rng);
  return res;
}

std::string curve_csv(const std::vector<LossRecord>& curve) {
  std::string out = "step,stage,strategy,loss\n";
  char buf[64];
  for (const LossRecord& r : curve) {
    std::snprintf(buf, sizeof buf, "%.17g", r.loss);
    out += std::to_string(r.step) + "," + std::to_string(r.stage) + "," + r.strategy + "," + buf + "\n";
  }
  return out;
}

}  // namespace trajmae
