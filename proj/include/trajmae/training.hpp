#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajmae/autodiff.hpp"
#include "trajmae/checkpoint.hpp"
#include "trajmae/masking.hpp"
#include "trajmae/metrics.hpp"
#include "trajmae/model.hpp"
#include "trajmae/scene.hpp"

namespace trajmae {

// ---- Losses -------------------------------------------------------------

/// Mean Huber penalty over every coordinate component of aligned [n, 2]
/// prediction/target sets. Throws on an empty set.
Var masked_huber_loss(Var predictions, Var targets, double delta = 1.0);

/// Reconstruction loss over a full [slots, 2] lattice: only rows flagged in
/// `masked` contribute, so visible rows receive exactly zero gradient.
Var lattice_huber_loss(Var predictions, Var targets, const std::vector<std::uint8_t>& masked, double delta = 1.0);

// ---- Schedules ----------------------------------------------------------

enum class ScheduleMode { ContinualPretrain, Sequential, Joint };

std::string_view to_string(ScheduleMode m);
/// Accepts continual-pretrain, sequential and joint.
ScheduleMode parse_schedule_mode(std::string_view s);

struct StagePlan {
  ScheduleMode mode = ScheduleMode::ContinualPretrain;
  std::vector<Strategy> order;
  std::size_t N = 0;
  std::size_t carry = 0;
  std::vector<std::vector<std::size_t>> quota;  // [stage][strategy index in order]

  std::size_t stages() const noexcept { return quota.size(); }
  /// Optimizer steps in a stage; a joint step trains every strategy at once.
  std::size_t stage_steps(std::size_t stage) const;
  std::size_t total_steps() const;
  nlohmann::ordered_json to_json() const;
};

StagePlan build_schedule(ScheduleMode mode, const std::vector<Strategy>& order, std::size_t N, std::size_t carry);

/// Shuffled multiset with quota[stage][i] copies of order[i].
std::vector<Strategy> materialize_stage_sequence(const StagePlan& plan, std::size_t stage, RngStream& rng);

struct LrSchedule {
  double lr0 = 1e-3;
  std::size_t period = 300;
  std::size_t horizon = 1500;
  double factor = 2.0;
};

/// lr0 / factor^h with h = min(horizon / period, step / period).
double lr_at(std::size_t step, const LrSchedule& s);

// ---- Pre-training -------------------------------------------------------

enum class Target { Trajectory, Map };

std::string_view to_string(Target t);
/// Accepts traj and map.
Target parse_target(std::string_view s);

struct PretrainConfig {
  ScheduleMode mode = ScheduleMode::ContinualPretrain;
  std::vector<Strategy> order{Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal};
  std::size_t N = 2000;
  std::size_t carry = 500;
  std::map<Strategy, double> ratio;  // falls back to default_ratio
  double default_ratio = 0.6;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double huber_delta = 1.0;
  double clip_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;

  double ratio_for(Strategy s) const;
  void validate() const;
};

struct LossRecord {
  std::size_t step = 0;
  std::size_t stage = 0;
  std::string strategy;
  double loss = 0.0;
};

class NumericalAbort : public std::runtime_error {
 public:
  NumericalAbort(std::size_t step, std::string strategy);
  std::size_t step;
  std::string strategy;
};

/// Reconstruction loss of one batch under one strategy; fills `grads` when given.
double reconstruction_step(const TrajMAE& model, const ParamStore& params, const std::vector<const Scene*>& batch,
                           Target target, Strategy strategy, double ratio, RngStream& mask_rng, double delta,
                           GradMap* grads);

struct PretrainHooks {
  /// Called after each completed stage with the stage index and its checkpoint.
  std::function<void(std::size_t, const Checkpoint&)> on_stage_end;
  /// When set, stop once this many global steps have run and return the
  /// resumable state in `PretrainResult::checkpoint`.
  std::optional<std::size_t> stop_after;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> curve;
  bool finished = false;
};

/// Runs the schedule from fresh parameters, or continues from `resume`.
PretrainResult run_pretrain(const TrajMAE& model, const PretrainConfig& cfg, const DatasetShard& train, Target target,
                            const PretrainHooks& hooks = {}, const Checkpoint* resume = nullptr);

/// sqrt of the mean squared coordinate error at masked slots.
double reconstruction_rmse(const TrajMAE& model, const ParamStore& params, const DatasetShard& data, Target target,
                           Strategy strategy, double ratio, std::uint64_t seed, std::size_t batch_size = 32);

// ---- Fine-tuning --------------------------------------------------------

struct FinetuneConfig {
  LrSchedule lr{1e-3, 300, 1500, 2.0};
  std::size_t steps = 3000;
  std::size_t batch_size = 8;
  std::size_t eval_every = 500;  // 0 disables periodic validation
  std::size_t eval_scenes = 0;   // 0 = whole validation split
  double huber_delta = 1.0;
  double ce_weight = 0.1;
  double clip_norm = 0.0;
  std::uint64_t seed = 0;
  MetricParams metrics;

  void validate() const;
};

/// Fresh parameters with traj_enc.* / map_enc.* copied from the checkpoints
/// when given. Throws CheckpointError listing every mismatched tensor.
ParamStore init_finetune_params(const TrajMAE& model, std::uint64_t seed, const Checkpoint* traj,
                                const Checkpoint* map);

/// Winner-takes-all forecasting loss of one batch; fills `grads` when given.
double forecast_step(const TrajMAE& model, const ParamStore& params, const std::vector<const Scene*>& batch,
                     const FinetuneConfig& cfg, GradMap* grads);

struct Validation {
  std::size_t step = 0;
  EvalReport report;
};

struct FinetuneResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> curve;
  std::vector<Validation> validations;
};

FinetuneResult run_finetune(const TrajMAE& model, ParamStore params, const FinetuneConfig& cfg,
                            const DatasetShard& train, const DatasetShard& val);

/// Absolute-coordinate forecast samples of a batch.
std::vector<ForecastSample> predict(const TrajMAE& model, const ParamStore& params,
                                    const std::vector<const Scene*>& batch);

/// Ground truth arranged for metric evaluation (the prediction is left zero).
ForecastSample truth_sample(const Scene& s, std::size_t modes);

/// Evaluates the model over `limit` scenes of the shard (0 = all).
EvalReport evaluate(const TrajMAE& model, const ParamStore& params, const DatasetShard& data, const MetricParams& mp,
                    std::size_t limit = 0, std::size_t batch_size = 32, std::vector<SceneMetrics>* per_scene = nullptr);

/// CSV `step,stage,strategy,loss` with a header row.
std::string curve_csv(const std::vector<LossRecord>& curve);

}  // namespace trajmae
