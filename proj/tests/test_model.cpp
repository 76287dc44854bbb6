#include <numeric>

#include "doctest.h"
#include "trajmae/masking.hpp"
#include "trajmae/model.hpp"

using namespace trajmae;
using namespace trajmae::ad;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 1;
  c.fore_layers = 1;
  c.modes = 3;
  c.t_obs = 6;
  c.t_fut = 4;
  c.max_agents = 4;
  return c;
}

Scene make_scene(std::uint64_t seed) {
  SimConfig sim;
  sim.agents = 4;
  sim.t_obs = 6;
  sim.t_fut = 4;
  sim.late_entry_prob = 0.0;
  return simulate_scene(build_map(MapLayout::FourWay, seed), seed, sim);
}

Scene permute_agents(const Scene& s, const std::vector<std::size_t>& perm) {
  // Row i of the result is agent perm[i] of the input.
  Scene out = s;
  for (std::size_t i = 0; i < s.agents; ++i) {
    for (std::size_t t = 0; t < s.steps(); ++t) {
      out.set_pos(i, t, s.pos(perm[i], t));
      out.valid[i * s.steps() + t] = s.valid[perm[i] * s.steps() + t];
    }
    if (perm[i] == s.ego_index) out.ego_index = i;
  }
  return out;
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  return {t.storage().begin() + static_cast<std::ptrdiff_t>(r * t.cols()),
          t.storage().begin() + static_cast<std::ptrdiff_t>((r + 1) * t.cols())};
}

}  // namespace

TEST_CASE("embedding shares weights across agents and has no agent position") {
  const TrajMAE model(small_config());
  const ParamStore store = model.make_params(1);
  Scene s = make_scene(3);
  for (std::size_t t = 0; t < s.steps(); ++t) s.set_pos(2, t, s.pos(1, t));
  const Scene* ptr = &s;
  const LatticeInput in = make_traj_input(std::span<const Scene* const>(&ptr, 1), 6, 4);
  Graph g;
  ParamBinding p(g, store, false);
  const TokenSet tok = embed(p, "traj_enc", in, in.valid, 16);
  const Tensor dense = context_lattice(tok);
  for (std::size_t t = 0; t < 6; ++t) CHECK(row(dense, in.slot(0, 1, t)) == row(dense, in.slot(0, 2, t)));
  // Different time index, different embedding.
  CHECK(row(dense, in.slot(0, 1, 0)) != row(dense, in.slot(0, 1, 1)));
}

TEST_CASE("zero encoder layers leave tokens unchanged") {
  const TrajMAE model(small_config());
  const ParamStore store = model.make_params(2);
  const Scene s = make_scene(4);
  const Scene* ptr = &s;
  const LatticeInput in = make_traj_input(std::span<const Scene* const>(&ptr, 1), 6, 4);
  Graph g;
  ParamBinding p(g, store, false);
  const TokenSet tok = embed(p, "traj_enc", in, in.valid, 16);
  StackSpec spec = model.encoder_spec();
  spec.layers = 0;
  const TokenSet out = encode(p, "traj_enc", tok, spec);
  CHECK(out.x.value().storage() == tok.x.value().storage());
}

TEST_CASE("masked inputs never reach the visible context") {
  const TrajMAE model(small_config());
  const ParamStore store = model.make_params(3);
  const Scene s = make_scene(5);
  const Scene* ptr = &s;
  RngStream rng(6);
  const MaskPlan plan = plan_traj_mask(Strategy::SocialTemporal, 0.5, s, rng);
  const LatticeInput in = make_traj_input(std::span<const Scene* const>(&ptr, 1), 6, 4);
  LatticeInput poked = in;
  for (std::size_t slot = 0; slot < in.slots(); ++slot) {
    if (plan.masked[slot] == 0) continue;
    for (std::size_t f = 0; f < in.features; ++f) poked.feats[slot * in.features + f] += 1000.0;
  }
  const auto include = visible_slots(in.valid, plan.masked);
  Graph g1, g2;
  ParamBinding p1(g1, store, false), p2(g2, store, false);
  const Tensor a = context_lattice(model.encode_traj(p1, in, include));
  const Tensor b = context_lattice(model.encode_traj(p2, poked, include));
  CHECK(a.storage() == b.storage());
}

TEST_CASE("encoder context is equivariant to agent order") {
  const TrajMAE model(small_config());
  const ParamStore store = model.make_params(4);
  const Scene s = make_scene(8);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const Scene ps = permute_agents(s, perm);
  const Scene* a_ptr = &s;
  const Scene* b_ptr = &ps;
  const LatticeInput a_in = make_traj_input(std::span<const Scene* const>(&a_ptr, 1), 6, 4);
  const LatticeInput b_in = make_traj_input(std::span<const Scene* const>(&b_ptr, 1), 6, 4);
  Graph g1, g2;
  ParamBinding p1(g1, store, false), p2(g2, store, false);
  const Tensor a = context_lattice(model.encode_traj(p1, a_in, a_in.valid));
  const Tensor b = context_lattice(model.encode_traj(p2, b_in, b_in.valid));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t t = 0; t < 6; ++t) CHECK(row(b, b_in.slot(0, i, t)) == row(a, a_in.slot(0, perm[i], t)));
  }
}

TEST_CASE("forecasts are equivariant to agent order") {
  const TrajMAE model(small_config());
  const ParamStore store = model.make_params(5);
  const Scene s = make_scene(9);
  const std::vector<std::size_t> perm{3, 2, 1, 0};
  const Scene ps = permute_agents(s, perm);
  auto run = [&](const Scene& sc, Graph& g) {
    ParamBinding p(g, store, false);
    const Scene* ptr = &sc;
    const std::span<const Scene* const> batch(&ptr, 1);
    return model.forecast(p, make_traj_input(batch, 6, 4), make_map_input(batch, kMapPoints, 16));
  };
  Graph g1, g2;
  const Forecast a = run(s, g1);
  const Forecast b = run(ps, g2);
  CHECK(a.logits.value().storage() == b.logits.value().storage());
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t t = 0; t < 4; ++t) {
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(row(b.offsets.value(), b.row(0, k, t, i)) == row(a.offsets.value(), a.row(0, k, t, perm[i])));
      }
    }
  }
}

TEST_CASE("single-mode forecasts put all probability on the mode") {
  ModelConfig c = small_config();
  c.modes = 1;
  const TrajMAE model(c);
  const ParamStore store = model.make_params(6);
  const Scene s = make_scene(10);
  const Scene* ptr = &s;
  const std::span<const Scene* const> batch(&ptr, 1);
  Graph g;
  ParamBinding p(g, store, false);
  const Forecast f = model.forecast(p, make_traj_input(batch, 6, 4), make_map_input(batch, kMapPoints, 16));
  CHECK(softmax(f.logits, 1).value().storage() == std::vector<double>{1.0});
}

TEST_CASE("an empty mask plan reconstructs nothing") {
  const TrajMAE model(small_config());
  const ParamStore store = model.make_params(7);
  const Scene s = make_scene(11);
  const Scene* ptr = &s;
  const LatticeInput in = make_traj_input(std::span<const Scene* const>(&ptr, 1), 6, 4);
  Graph g;
  ParamBinding p(g, store, false);
  const Reconstruction rec = model.reconstruct_traj(p, in, std::vector<std::uint8_t>(in.slots(), 0));
  CHECK(rec.targets.empty());
  CHECK(rec.coords.value().size() == 0);
}

TEST_CASE("model config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.dec_layers = c.enc_layers;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(ModelConfig::from_json(small_config().to_json()) == small_config());
}
