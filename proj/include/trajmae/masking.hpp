#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "trajmae/rng.hpp"
#include "trajmae/scene.hpp"

namespace trajmae {

/// Trajectory strategies S, T, ST and map strategies Po, Pa, B.
enum class Strategy { Social, Temporal, SocialTemporal, Point, Patch, Block };

std::string_view to_string(Strategy s);
/// Accepts the short names S, T, ST, Po, Pa, B.
Strategy parse_strategy(std::string_view s);
bool is_trajectory_strategy(Strategy s);

class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Boolean lattice over trajectory slots (agents x t_obs) or map points
/// (polylines x points). true = hidden from the encoder and reconstructed.
struct MaskPlan {
  Strategy strategy = Strategy::Temporal;
  double ratio = 0.0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> masked;

  bool at(std::size_t r, std::size_t c) const { return masked[r * cols + c] != 0; }
  std::size_t count() const;
  std::size_t count_row(std::size_t r) const;
};

inline constexpr std::size_t kPatchWidth = 3;

/// ceil(ratio * n), robust to representation error in the ratio.
std::size_t masked_count(double ratio, std::size_t n);

/// The ceil((M-1)/2) non-ego agents closest to the ego at the last observed
/// step, ties broken by agent index.
std::vector<std::size_t> nearby_agents(const Scene& scene);

MaskPlan plan_traj_mask(Strategy strategy, double ratio, const Scene& scene, RngStream& rng);
MaskPlan plan_map_mask(Strategy strategy, double ratio, const VectorMap& map, RngStream& rng,
                       std::size_t patch_width = kPatchWidth);

/// Observed-slot validity lattice (agents x t_obs) of a scene.
std::vector<std::uint8_t> observed_validity(const Scene& scene);

struct VisibleSplit {
  std::vector<std::size_t> visible;  // flat slot indices, ascending
  std::vector<std::size_t> targets;
};

/// Partitions the valid slots into visible and masked-target sets.
VisibleSplit split_visible(const std::vector<std::uint8_t>& valid, const MaskPlan& plan);

nlohmann::ordered_json mask_to_json(const MaskPlan& plan);

}  // namespace trajmae
