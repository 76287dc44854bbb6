#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "json.hpp"

namespace trajmae {

/// Multimodal forecast of one scene against its ground-truth future.
/// Positions are absolute (same frame as the truth).
struct ForecastSample {
  std::size_t modes = 0;
  std::size_t steps = 0;
  std::size_t agents = 0;
  std::size_t ego = 0;
  std::vector<double> pred;          // [mode][step][agent][xy]
  std::vector<double> truth;         // [step][agent][xy]
  std::vector<std::uint8_t> valid;   // [step][agent]

  ForecastSample() = default;
  ForecastSample(std::size_t c, std::size_t T, std::size_t M, std::size_t ego_index)
      : modes(c), steps(T), agents(M), ego(ego_index), pred(c * T * M * 2, 0.0), truth(T * M * 2, 0.0),
        valid(T * M, 1) {}

  double px(std::size_t k, std::size_t t, std::size_t m) const { return pred[((k * steps + t) * agents + m) * 2]; }
  double py(std::size_t k, std::size_t t, std::size_t m) const { return pred[((k * steps + t) * agents + m) * 2 + 1]; }
  double tx(std::size_t t, std::size_t m) const { return truth[(t * agents + m) * 2]; }
  double ty(std::size_t t, std::size_t m) const { return truth[(t * agents + m) * 2 + 1]; }
  bool is_valid(std::size_t t, std::size_t m) const { return valid[t * agents + m] != 0; }
};

struct MetricParams {
  double miss_threshold = 2.0;
  double collision_radius = 0.5;
};

struct SceneMetrics {
  bool ego_evaluated = false;
  double min_ade = 0.0;
  double min_fde = 0.0;
  double miss = 0.0;
  bool joint_evaluated = false;
  double min_joint_ade = 0.0;
  double min_joint_fde = 0.0;
  double min_joint_mr = 0.0;
  double cross_collision = 0.0;
  double ego_collision = 0.0;
  double consistent_min_joint_mr = 0.0;
  // Collision flags of the mode with the lowest joint ADE.
  std::size_t best_joint_mode = 0;
  bool best_mode_cross_collision = false;
  bool best_mode_ego_collision = false;
};

// Per-scene primitives. Ego metrics return false when the ego has no valid
// future step (the scene is skipped).
bool ego_displacement(const ForecastSample& f, double threshold, double& min_ade, double& min_fde, double& miss);
bool joint_displacement(const ForecastSample& f, double threshold, double& min_joint_ade, double& min_joint_fde,
                        double& min_joint_mr);
/// Per-mode flags: any valid agent pair (or pair with the ego) closer than 2 * radius at some step.
std::vector<bool> mode_cross_collisions(const ForecastSample& f, double radius);
std::vector<bool> mode_ego_collisions(const ForecastSample& f, double radius);
double cross_collision_rate(const ForecastSample& f, double radius);
double ego_collision_rate(const ForecastSample& f, double radius);
double consistent_min_joint_mr(const ForecastSample& f, double threshold, double radius);

SceneMetrics evaluate_scene(const ForecastSample& f, const MetricParams& p = {});

struct EvalReport {
  double min_ade = 0.0;
  double min_fde = 0.0;
  double miss_rate = 0.0;
  double min_joint_ade = 0.0;
  double min_joint_fde = 0.0;
  double min_joint_mr = 0.0;
  double cross_collision_rate = 0.0;
  double ego_collision_rate = 0.0;
  double consistent_min_joint_mr = 0.0;
  std::size_t scenes = 0;
  std::size_t ego_scenes = 0;
  std::size_t joint_scenes = 0;
  std::size_t skipped_ego = 0;
};

EvalReport aggregate(const std::vector<SceneMetrics>& per_scene);
nlohmann::ordered_json report_to_json(const EvalReport& r);
nlohmann::ordered_json scene_metrics_to_json(const SceneMetrics& m);

}  // namespace trajmae
