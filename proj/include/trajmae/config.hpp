#pragma once

// Run configuration shared by every CLI command.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "trajmae/masking.hpp"
#include "trajmae/model.hpp"
#include "trajmae/scene.hpp"
#include "trajmae/training.hpp"

namespace trajmae {

/// Bad configuration; `path` is the dotted key path of the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& msg);
  std::string path;
};

struct MaskingSection {
  double ratio = 0.6;
  std::map<Strategy, double> per_strategy{{Strategy::Block, 0.5}};

  double ratio_for(Strategy s) const;
};

struct PretrainSection {
  ScheduleMode mode = ScheduleMode::ContinualPretrain;
  std::vector<Strategy> traj_order{Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal};
  std::vector<Strategy> map_order{Strategy::Point, Strategy::Patch, Strategy::Block};
  std::size_t steps = 2000;
  std::size_t carry = 500;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double huber_delta = 1.0;
  double clip_norm = 0.0;

  const std::vector<Strategy>& order_for(Target t) const { return t == Target::Trajectory ? traj_order : map_order; }
};

struct EvalSection {
  double miss_threshold = 2.0;
  double collision_radius = 0.5;
  std::size_t batch_size = 32;
};

struct RunConfig {
  DatasetConfig data;
  ModelConfig model;
  MaskingSection masking;
  PretrainSection pretrain;
  FinetuneConfig finetune;
  EvalSection eval;
  std::uint64_t root_seed = 1;
  std::string output_dir = "runs/default";

  /// Strict parse: unknown keys and wrong types raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
  /// Cross-section consistency (model horizon vs data horizon, ratios...).
  void validate() const;

  /// Seed of one consumer, derived from the root seed and a purpose tag.
  std::uint64_t seed_for(std::string_view purpose) const;
  PretrainConfig pretrain_config(Target target) const;
  FinetuneConfig finetune_config() const;
  MetricParams metric_params() const { return {eval.miss_threshold, eval.collision_radius}; }
};

/// Reads and parses a config file.
RunConfig load_run_config(const std::filesystem::path& path);

std::vector<Strategy> parse_order(std::string_view csv);
std::string order_string(const std::vector<Strategy>& order, char sep = ',');

}  // namespace trajmae
