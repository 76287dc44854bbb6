#pragma once

// Traj-MAE network: axis-factorized attention encoders for trajectories and
// maps, shallow reconstruction decoders with shared mask tokens, and the
// multimodal forecast decoder driven by learnable seed parameters.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajmae/autodiff.hpp"
#include "trajmae/params.hpp"
#include "trajmae/scene.hpp"

namespace trajmae {

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 1;
  std::size_t fore_layers = 2;
  std::size_t heads = 4;
  std::size_t modes = 6;
  std::size_t t_obs = 10;
  std::size_t t_fut = 15;
  std::size_t max_agents = 6;
  std::size_t map_points = kMapPoints;
  std::size_t max_polylines = 16;
  std::size_t ffn_mult = 4;

  static constexpr std::size_t kTrajFeatures = 3;  // x, y, valid
  static constexpr std::size_t kMapFeatures = 5;   // x, y, one-hot polyline type

  /// Throws std::invalid_argument on a broken invariant.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Inputs are scaled by this factor and coordinate heads are scaled back.
inline constexpr double kCoordScale = 0.1;

/// Batched lattice of B x rows x cols slots. For trajectories rows are agents
/// and cols are time steps; for maps rows are polylines and cols are points.
struct LatticeInput {
  std::size_t batch = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t features = 0;
  std::vector<double> feats;         // [slot][features], scaled
  std::vector<double> coords;        // [slot][2], meters
  std::vector<std::uint8_t> valid;   // [slot]

  std::size_t slots() const noexcept { return batch * rows * cols; }
  std::size_t slot(std::size_t b, std::size_t r, std::size_t c) const noexcept { return (b * rows + r) * cols + c; }
};

/// Observed trajectories of the scenes, padded to `agents` rows.
LatticeInput make_traj_input(std::span<const Scene* const> scenes, std::size_t t_obs, std::size_t agents);
/// Map key points, padded to `polylines` rows.
LatticeInput make_map_input(std::span<const Scene* const> scenes, std::size_t points, std::size_t polylines);

/// Compact token matrix: row i lives at lattice slot `slots[i]`.
struct TokenSet {
  Var x;
  std::vector<std::size_t> slots;
  std::size_t batch = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

enum class Axis { Cols, Rows };

/// Self-attention groups along one axis of the lattice: Cols groups tokens of
/// the same (batch, row) (time axis), Rows groups the same (batch, col)
/// (agent / polyline axis).
AttentionLayout axis_layout(const TokenSet& t, Axis axis);

/// Sinusoidal encoding of an integer position.
std::vector<double> sinusoidal_encoding(std::size_t pos, std::size_t d);

/// Hyper-parameters of one axis-factorized attention stack.
struct StackSpec {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t layers = 1;
};

/// Registers parameters of the building blocks under `prefix`.
void init_rffn(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t d, RngStream& rng);
void init_mab(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t ffn_mult, RngStream& rng);
void init_stack(ParamStore& store, const std::string& prefix, const StackSpec& spec, RngStream& rng);

Var rffn(ParamBinding& p, const std::string& prefix, Var x);
/// Pre-norm block: x + Attn(LN(x)), then + FFN(LN(.)).
Var mab(ParamBinding& p, const std::string& prefix, Var x, const AttentionLayout& layout, std::size_t heads);
/// Same block with keys/values projected from a normalized `context`.
Var mab_cross(ParamBinding& p, const std::string& prefix, Var x, Var context, const AttentionLayout& layout,
              std::size_t heads);

/// Embeds the included slots with the shared rFFN plus sinusoidal encoding of
/// the column index. Excluded slots get no token and their inputs are never read.
/// `features`, when given, replaces the lattice's constant features by a graph
/// node of shape [slots, features] (only its included rows are gathered).
TokenSet embed(ParamBinding& p, const std::string& prefix, const LatticeInput& in,
               const std::vector<std::uint8_t>& include, std::size_t d_model, Var features = {});

/// `layers` x (column-axis MAB, then row-axis MAB).
TokenSet encode(ParamBinding& p, const std::string& prefix, TokenSet tokens, const StackSpec& spec);

/// Dense view of a token set: [slots, d] with zeros at excluded slots.
Tensor context_lattice(const TokenSet& t);

struct Reconstruction {
  Var coords;                        // [targets, 2], meters
  std::vector<std::size_t> targets;  // lattice slots, ascending
};

/// Rebuilds the lattice from encoder context (visible slots) and the shared
/// mask token (masked slots), adds learned positional embeddings, runs the
/// shallow decoder and regresses coordinates at the masked slots.
/// `map_layout` adds a per-row (polyline) embedding on top of the per-column one.
Reconstruction decode_reconstruction(ParamBinding& p, const std::string& prefix, const TokenSet& context,
                                     const std::vector<std::uint8_t>& valid, const std::vector<std::uint8_t>& masked,
                                     const StackSpec& spec, bool map_layout);

struct Forecast {
  std::size_t batch = 0;
  std::size_t modes = 0;
  std::size_t steps = 0;
  std::size_t agents = 0;
  Var offsets;  // [batch * modes * steps * agents, 2], rows ordered (b, k, t, m); meters
  Var logits;   // [batch, modes]

  std::size_t row(std::size_t b, std::size_t k, std::size_t t, std::size_t m) const {
    return ((b * modes + k) * steps + t) * agents + m;
  }
};

/// Full network with parameter naming:
///   traj_enc.*, map_enc.*  - embeddings + encoders
///   traj_dec.*, map_dec.*  - reconstruction decoders
///   fore.*                 - forecast decoder
class TrajMAE {
 public:
  explicit TrajMAE(ModelConfig cfg);

  const ModelConfig& config() const noexcept { return cfg_; }
  StackSpec encoder_spec() const;
  StackSpec decoder_spec() const;
  StackSpec forecast_spec() const;

  void init_params(ParamStore& store, RngStream& rng) const;
  ParamStore make_params(std::uint64_t seed) const;

  TokenSet encode_traj(ParamBinding& p, const LatticeInput& in, const std::vector<std::uint8_t>& include) const;
  TokenSet encode_map(ParamBinding& p, const LatticeInput& in, const std::vector<std::uint8_t>& include) const;

  Reconstruction reconstruct_traj(ParamBinding& p, const LatticeInput& in,
                                  const std::vector<std::uint8_t>& masked) const;
  Reconstruction reconstruct_map(ParamBinding& p, const LatticeInput& in,
                                 const std::vector<std::uint8_t>& masked) const;

  Forecast forecast(ParamBinding& p, const TokenSet& traj_context, const TokenSet& map_context) const;
  /// Unmasked encoders followed by the forecast decoder.
  Forecast forecast(ParamBinding& p, const LatticeInput& traj, const LatticeInput& map) const;

 private:
  ModelConfig cfg_;
};

/// Included-slot flags: valid and not masked.
std::vector<std::uint8_t> visible_slots(const std::vector<std::uint8_t>& valid,
                                        const std::vector<std::uint8_t>& masked);

}  // namespace trajmae
