#include "trajmae/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace trajmae {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (d_model == 0 || heads == 0 || d_model % heads != 0) fail("d_model must be a positive multiple of heads");
  if (dec_layers >= enc_layers) fail("decoder must be shallower than the encoder (dec_layers < enc_layers)");
  if (modes == 0) fail("modes must be positive");
  if (t_obs == 0 || t_fut == 0) fail("horizons must be positive");
  if (max_agents == 0 || map_points == 0 || max_polylines == 0) fail("lattice extents must be positive");
  if (ffn_mult == 0) fail("ffn_mult must be positive");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["d_model"] = d_model;
  j["enc_layers"] = enc_layers;
  j["dec_layers"] = dec_layers;
  j["fore_layers"] = fore_layers;
  j["heads"] = heads;
  j["modes"] = modes;
  j["t_obs"] = t_obs;
  j["t_fut"] = t_fut;
  j["max_agents"] = max_agents;
  j["map_points"] = map_points;
  j["max_polylines"] = max_polylines;
  j["ffn_mult"] = ffn_mult;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const std::size_t v = it.value().get<std::size_t>();
    if (k == "d_model") c.d_model = v;
    else if (k == "enc_layers") c.enc_layers = v;
    else if (k == "dec_layers") c.dec_layers = v;
    else if (k == "fore_layers") c.fore_layers = v;
    else if (k == "heads") c.heads = v;
    else if (k == "modes") c.modes = v;
    else if (k == "t_obs") c.t_obs = v;
    else if (k == "t_fut") c.t_fut = v;
    else if (k == "max_agents") c.max_agents = v;
    else if (k == "map_points") c.map_points = v;
    else if (k == "max_polylines") c.max_polylines = v;
    else if (k == "ffn_mult") c.ffn_mult = v;
    else throw std::invalid_argument("model config: unknown key '" + k + "'");
  }
  return c;
}

LatticeInput make_traj_input(std::span<const Scene* const> scenes, std::size_t t_obs, std::size_t agents) {
  LatticeInput in;
  in.batch = scenes.size();
  in.rows = agents;
  in.cols = t_obs;
  in.features = ModelConfig::kTrajFeatures;
  in.feats.assign(in.slots() * in.features, 0.0);
  in.coords.assign(in.slots() * 2, 0.0);
  in.valid.assign(in.slots(), 0);
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const Scene& s = *scenes[b];
    if (s.agents > agents) {
      throw std::invalid_argument("trajectory input: scene has " + std::to_string(s.agents) + " agents, model allows " +
                                  std::to_string(agents));
    }
    if (s.t_obs != t_obs) {
      throw std::invalid_argument("trajectory input: scene t_obs " + std::to_string(s.t_obs) + " != model t_obs " +
                                  std::to_string(t_obs));
    }
    for (std::size_t m = 0; m < s.agents; ++m) {
      for (std::size_t t = 0; t < t_obs; ++t) {
        if (!s.is_valid(m, t)) continue;
        const std::size_t slot = in.slot(b, m, t);
        const Point2 p = s.pos(m, t);
        in.valid[slot] = 1;
        in.coords[slot * 2] = p.x;
        in.coords[slot * 2 + 1] = p.y;
        in.feats[slot * 3] = p.x * kCoordScale;
        in.feats[slot * 3 + 1] = p.y * kCoordScale;
        in.feats[slot * 3 + 2] = 1.0;
      }
    }
  }
  return in;
}

LatticeInput make_map_input(std::span<const Scene* const> scenes, std::size_t points, std::size_t polylines) {
  LatticeInput in;
  in.batch = scenes.size();
  in.rows = polylines;
  in.cols = points;
  in.features = ModelConfig::kMapFeatures;
  in.feats.assign(in.slots() * in.features, 0.0);
  in.coords.assign(in.slots() * 2, 0.0);
  in.valid.assign(in.slots(), 0);
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const VectorMap& map = scenes[b]->map;
    if (map.polylines.size() > polylines) {
      throw std::invalid_argument("map input: " + std::to_string(map.polylines.size()) + " polylines, model allows " +
                                  std::to_string(polylines));
    }
    for (std::size_t r = 0; r < map.polylines.size(); ++r) {
      const Polyline& pl = map.polylines[r];
      if (pl.points.size() != points) {
        throw std::invalid_argument("map input: polyline with " + std::to_string(pl.points.size()) + " points, expected " +
                                    std::to_string(points));
      }
      for (std::size_t c = 0; c < points; ++c) {
        const std::size_t slot = in.slot(b, r, c);
        const Point2 p = pl.points[c];
        in.valid[slot] = 1;
        in.coords[slot * 2] = p.x;
        in.coords[slot * 2 + 1] = p.y;
        double* f = in.feats.data() + slot * in.features;
        f[0] = p.x * kCoordScale;
        f[1] = p.y * kCoordScale;
        f[2 + static_cast<std::size_t>(pl.type)] = 1.0;
      }
    }
  }
  return in;
}

AttentionLayout axis_layout(const TokenSet& t, Axis axis) {
  const std::size_t per_batch = t.rows * t.cols;
  const std::size_t buckets = axis == Axis::Cols ? t.batch * t.rows : t.batch * t.cols;
  std::vector<std::vector<std::size_t>> groups(buckets);
  for (std::size_t i = 0; i < t.slots.size(); ++i) {
    const std::size_t s = t.slots[i];
    const std::size_t b = s / per_batch;
    const std::size_t r = (s % per_batch) / t.cols;
    const std::size_t c = s % t.cols;
    groups[axis == Axis::Cols ? b * t.rows + r : b * t.cols + c].push_back(i);
  }
  AttentionLayout layout;
  for (const auto& g : groups) {
    if (!g.empty()) layout.add_group(g, g);
  }
  return layout;
}

std::vector<double> sinusoidal_encoding(std::size_t pos, std::size_t d) {
  std::vector<double> pe(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
    const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
    pe[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

namespace {

void init_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, RngStream& rng,
                 bool bias = true) {
  RngStream r = rng.derive(prefix);
  store.add(prefix + ".w", init_uniform_fan_in(in, out, r));
  if (bias) store.add(prefix + ".b", Tensor(Shape{out}, 0.0));
}

void init_norm(ParamStore& store, const std::string& prefix, std::size_t d) {
  store.add(prefix + ".g", Tensor(Shape{d}, 1.0));
  store.add(prefix + ".b", Tensor(Shape{d}, 0.0));
}

Var lin(ParamBinding& p, const std::string& prefix, Var x) {
  return ad::linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

// Bias-free projection for keys and mode logits.
Var lin_nobias(ParamBinding& p, const std::string& prefix, Var x) { return ad::matmul(x, p(prefix + ".w")); }

Var norm(ParamBinding& p, const std::string& prefix, Var x) {
  return ad::layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
}

Var attend_and_ffn(ParamBinding& p, const std::string& prefix, Var x, Var q, Var k, Var v,
                   const AttentionLayout& layout, std::size_t heads) {
  Var a = ad::attention(q, k, v, layout, heads);
  Var x1 = ad::add(x, lin(p, prefix + ".o", a));
  Var h = norm(p, prefix + ".ln2", x1);
  Var f = lin(p, prefix + ".ff2", ad::relu(lin(p, prefix + ".ff1", h)));
  return ad::add(x1, f);
}

Var empty_rows(Graph& g, std::size_t cols) { return g.constant(Tensor(Shape{0, cols})); }

}  // namespace

void init_rffn(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t d, RngStream& rng) {
  init_linear(store, prefix + ".l1", in, d, rng);
  init_linear(store, prefix + ".l2", d, d, rng);
}

void init_mab(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t ffn_mult, RngStream& rng) {
  init_norm(store, prefix + ".ln1", d);
  init_linear(store, prefix + ".q", d, d, rng);
  init_linear(store, prefix + ".k", d, d, rng, false);
  init_linear(store, prefix + ".v", d, d, rng);
  init_linear(store, prefix + ".o", d, d, rng);
  init_norm(store, prefix + ".ln2", d);
  init_linear(store, prefix + ".ff1", d, d * ffn_mult, rng);
  init_linear(store, prefix + ".ff2", d * ffn_mult, d, rng);
}

void init_stack(ParamStore& store, const std::string& prefix, const StackSpec& spec, RngStream& rng) {
  for (std::size_t i = 0; i < spec.layers; ++i) {
    const std::string l = prefix + ".layer" + std::to_string(i);
    init_mab(store, l + ".time", spec.d_model, spec.ffn_mult, rng);
    init_mab(store, l + ".social", spec.d_model, spec.ffn_mult, rng);
  }
}

Var rffn(ParamBinding& p, const std::string& prefix, Var x) {
  return lin(p, prefix + ".l2", ad::relu(lin(p, prefix + ".l1", x)));
}

Var mab(ParamBinding& p, const std::string& prefix, Var x, const AttentionLayout& layout, std::size_t heads) {
  Var h = norm(p, prefix + ".ln1", x);
  Var q = lin(p, prefix + ".q", h);
  Var k = lin_nobias(p, prefix + ".k", h);
  Var v = lin(p, prefix + ".v", h);
  return attend_and_ffn(p, prefix, x, q, k, v, layout, heads);
}

Var mab_cross(ParamBinding& p, const std::string& prefix, Var x, Var context, const AttentionLayout& layout,
              std::size_t heads) {
  Var h = norm(p, prefix + ".ln1", x);
  Var c = norm(p, prefix + ".lnc", context);
  Var q = lin(p, prefix + ".q", h);
  Var k = lin_nobias(p, prefix + ".k", c);
  Var v = lin(p, prefix + ".v", c);
  return attend_and_ffn(p, prefix, x, q, k, v, layout, heads);
}

TokenSet embed(ParamBinding& p, const std::string& prefix, const LatticeInput& in,
               const std::vector<std::uint8_t>& include, std::size_t d_model, Var features) {
  if (include.size() != in.slots()) {
    throw ShapeError("embed: include flags for " + std::to_string(include.size()) + " slots, lattice has " +
                     std::to_string(in.slots()));
  }
  TokenSet t;
  t.batch = in.batch;
  t.rows = in.rows;
  t.cols = in.cols;
  for (std::size_t s = 0; s < include.size(); ++s) {
    if (include[s]) t.slots.push_back(s);
  }
  Graph& g = p.graph();
  const std::size_t n = t.slots.size();
  if (n == 0) {
    t.x = empty_rows(g, d_model);
    return t;
  }
  Tensor feats(Shape{n, in.features});
  Tensor pe(Shape{n, d_model});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = t.slots[i];
    std::copy_n(in.feats.begin() + static_cast<std::ptrdiff_t>(s * in.features), in.features,
                feats.storage().begin() + static_cast<std::ptrdiff_t>(i * in.features));
    const std::vector<double> enc = sinusoidal_encoding(s % in.cols, d_model);
    std::copy(enc.begin(), enc.end(), pe.storage().begin() + static_cast<std::ptrdiff_t>(i * d_model));
  }
  Var input = features.valid() ? ad::gather_rows(features, t.slots) : g.constant(std::move(feats));
  Var x = rffn(p, prefix + ".embed", input);
  t.x = ad::add(x, g.constant(std::move(pe)));
  return t;
}

TokenSet encode(ParamBinding& p, const std::string& prefix, TokenSet tokens, const StackSpec& spec) {
  if (spec.layers == 0 || tokens.slots.empty()) return tokens;
  const AttentionLayout time = axis_layout(tokens, Axis::Cols);
  const AttentionLayout social = axis_layout(tokens, Axis::Rows);
  for (std::size_t i = 0; i < spec.layers; ++i) {
    const std::string l = prefix + ".layer" + std::to_string(i);
    tokens.x = mab(p, l + ".time", tokens.x, time, spec.heads);
    tokens.x = mab(p, l + ".social", tokens.x, social, spec.heads);
  }
  return tokens;
}

Tensor context_lattice(const TokenSet& t) {
  const Tensor& v = t.x.value();
  const std::size_t d = v.cols();
  Tensor out(Shape{t.batch * t.rows * t.cols, d});
  for (std::size_t i = 0; i < t.slots.size(); ++i) {
    std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                out.storage().begin() + static_cast<std::ptrdiff_t>(t.slots[i] * d));
  }
  return out;
}

Reconstruction decode_reconstruction(ParamBinding& p, const std::string& prefix, const TokenSet& context,
                                     const std::vector<std::uint8_t>& valid, const std::vector<std::uint8_t>& masked,
                                     const StackSpec& spec, bool map_layout) {
  const std::size_t slots = context.batch * context.rows * context.cols;
  if (valid.size() != slots || masked.size() != slots) {
    throw ShapeError("decode_reconstruction: plan covers " + std::to_string(masked.size()) + " slots, context " +
                     std::to_string(slots));
  }
  std::size_t visible = 0;
  Reconstruction rec;
  for (std::size_t s = 0; s < slots; ++s) {
    if (!valid[s]) continue;
    if (masked[s]) {
      rec.targets.push_back(s);
    } else {
      ++visible;
    }
  }
  if (visible != context.slots.size()) {
    throw ShapeError("decode_reconstruction: context holds " + std::to_string(context.slots.size()) +
                     " tokens but the plan leaves " + std::to_string(visible) + " visible");
  }
  for (std::size_t s : context.slots) {
    if (!valid[s] || masked[s]) throw ShapeError("decode_reconstruction: context token at a masked or invalid slot");
  }
  Graph& g = p.graph();
  if (rec.targets.empty()) {
    rec.coords = empty_rows(g, 2);
    return rec;
  }
  const std::size_t nv = context.slots.size();
  const std::size_t nt = rec.targets.size();

  TokenSet full;
  full.batch = context.batch;
  full.rows = context.rows;
  full.cols = context.cols;
  full.slots = context.slots;
  full.slots.insert(full.slots.end(), rec.targets.begin(), rec.targets.end());

  const std::vector<std::size_t> zeros(nt, 0);
  Var mask_tokens = ad::gather_rows(p(prefix + ".mask_token"), zeros);
  Var x = mask_tokens;
  if (nv > 0) {
    const Var parts[2] = {context.x, mask_tokens};
    x = ad::concat(parts, 0);
  }
  std::vector<std::size_t> col_idx(full.slots.size()), row_idx(full.slots.size());
  for (std::size_t i = 0; i < full.slots.size(); ++i) {
    col_idx[i] = full.slots[i] % full.cols;
    row_idx[i] = (full.slots[i] / full.cols) % full.rows;
  }
  x = ad::add(x, ad::gather_rows(p(prefix + ".pos_col"), col_idx));
  if (map_layout) x = ad::add(x, ad::gather_rows(p(prefix + ".pos_row"), row_idx));
  full.x = x;
  full = encode(p, prefix, std::move(full), spec);

  std::vector<std::size_t> target_rows(nt);
  for (std::size_t i = 0; i < nt; ++i) target_rows[i] = nv + i;
  Var out = lin(p, prefix + ".head", ad::gather_rows(full.x, target_rows));
  rec.coords = ad::scale(out, 1.0 / kCoordScale);
  return rec;
}

TrajMAE::TrajMAE(ModelConfig cfg) : cfg_(cfg) { cfg_.validate(); }

StackSpec TrajMAE::encoder_spec() const { return {cfg_.d_model, cfg_.heads, cfg_.ffn_mult, cfg_.enc_layers}; }
StackSpec TrajMAE::decoder_spec() const { return {cfg_.d_model, cfg_.heads, cfg_.ffn_mult, cfg_.dec_layers}; }
StackSpec TrajMAE::forecast_spec() const { return {cfg_.d_model, cfg_.heads, cfg_.ffn_mult, cfg_.fore_layers}; }

void TrajMAE::init_params(ParamStore& store, RngStream& rng) const {
  const std::size_t d = cfg_.d_model;
  auto normal = [&](const std::string& name, Shape s) {
    RngStream r = rng.derive(name);
    store.add(name, init_normal(std::move(s), 0.02, r));
  };
  init_rffn(store, "traj_enc.embed", ModelConfig::kTrajFeatures, d, rng);
  init_stack(store, "traj_enc", encoder_spec(), rng);
  init_rffn(store, "map_enc.embed", ModelConfig::kMapFeatures, d, rng);
  init_stack(store, "map_enc", encoder_spec(), rng);

  normal("traj_dec.mask_token", Shape{1, d});
  normal("traj_dec.pos_col", Shape{cfg_.t_obs, d});
  init_stack(store, "traj_dec", decoder_spec(), rng);
  init_linear(store, "traj_dec.head", d, 2, rng);

  normal("map_dec.mask_token", Shape{1, d});
  normal("map_dec.pos_col", Shape{cfg_.map_points, d});
  normal("map_dec.pos_row", Shape{cfg_.max_polylines, d});
  init_stack(store, "map_dec", decoder_spec(), rng);
  init_linear(store, "map_dec.head", d, 2, rng);

  normal("fore.seeds", Shape{cfg_.modes * cfg_.t_fut, d});
  init_linear(store, "fore.rffn.l1", 2 * d, d, rng);
  init_linear(store, "fore.rffn.l2", d, d, rng);
  for (std::size_t i = 0; i < cfg_.fore_layers; ++i) {
    const std::string l = "fore.layer" + std::to_string(i);
    init_mab(store, l + ".cross", d, cfg_.ffn_mult, rng);
    init_norm(store, l + ".cross.lnc", d);
    init_mab(store, l + ".social", d, cfg_.ffn_mult, rng);
  }
  init_linear(store, "fore.head", d, 2, rng);
  init_linear(store, "fore.logit", d, 1, rng, false);
}

ParamStore TrajMAE::make_params(std::uint64_t seed) const {
  ParamStore store;
  RngStream rng(seed, "init");
  init_params(store, rng);
  return store;
}

TokenSet TrajMAE::encode_traj(ParamBinding& p, const LatticeInput& in, const std::vector<std::uint8_t>& include) const {
  return encode(p, "traj_enc", embed(p, "traj_enc", in, include, cfg_.d_model), encoder_spec());
}

TokenSet TrajMAE::encode_map(ParamBinding& p, const LatticeInput& in, const std::vector<std::uint8_t>& include) const {
  return encode(p, "map_enc", embed(p, "map_enc", in, include, cfg_.d_model), encoder_spec());
}

std::vector<std::uint8_t> visible_slots(const std::vector<std::uint8_t>& valid,
                                        const std::vector<std::uint8_t>& masked) {
  if (valid.size() != masked.size()) throw ShapeError("visible_slots: flag sizes differ");
  std::vector<std::uint8_t> out(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) out[i] = (valid[i] && !masked[i]) ? 1 : 0;
  return out;
}

Reconstruction TrajMAE::reconstruct_traj(ParamBinding& p, const LatticeInput& in,
                                         const std::vector<std::uint8_t>& masked) const {
  TokenSet ctx = encode_traj(p, in, visible_slots(in.valid, masked));
  return decode_reconstruction(p, "traj_dec", ctx, in.valid, masked, decoder_spec(), false);
}

Reconstruction TrajMAE::reconstruct_map(ParamBinding& p, const LatticeInput& in,
                                        const std::vector<std::uint8_t>& masked) const {
  TokenSet ctx = encode_map(p, in, visible_slots(in.valid, masked));
  return decode_reconstruction(p, "map_dec", ctx, in.valid, masked, decoder_spec(), true);
}

Forecast TrajMAE::forecast(ParamBinding& p, const LatticeInput& traj, const LatticeInput& map) const {
  TokenSet tc = encode_traj(p, traj, traj.valid);
  TokenSet mc = encode_map(p, map, map.valid);
  return forecast(p, tc, mc);
}

Forecast TrajMAE::forecast(ParamBinding& p, const TokenSet& ctx, const TokenSet& map_ctx) const {
  Graph& g = p.graph();
  const std::size_t B = ctx.batch, M = ctx.rows, C = cfg_.modes, T = cfg_.t_fut;
  if (map_ctx.batch != B) throw ShapeError("forecast: map batch differs from trajectory batch");
  if (ctx.cols != cfg_.t_obs || M > cfg_.max_agents) throw ShapeError("forecast: trajectory context extents");

  // Context rows per (batch, agent).
  std::vector<std::vector<std::size_t>> agent_keys(B * M);
  for (std::size_t i = 0; i < ctx.slots.size(); ++i) agent_keys[ctx.slots[i] / ctx.cols].push_back(i);

  Segments map_seg;
  {
    std::vector<std::vector<std::size_t>> per(B);
    const std::size_t per_batch = map_ctx.rows * map_ctx.cols;
    for (std::size_t i = 0; i < map_ctx.slots.size(); ++i) per[map_ctx.slots[i] / per_batch].push_back(i);
    for (const auto& r : per) map_seg.add(r);
  }
  Var pooled = map_ctx.slots.empty() ? g.constant(Tensor(Shape{B, cfg_.d_model}))
                                     : ad::segment_mean(map_ctx.x, map_seg);

  // Seed queries per (b, k, t).
  std::vector<std::size_t> seed_idx, pool_idx;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < C; ++k) {
      for (std::size_t t = 0; t < T; ++t) {
        seed_idx.push_back(k * T + t);
        pool_idx.push_back(b);
      }
    }
  }
  const Var parts[2] = {ad::gather_rows(p("fore.seeds"), seed_idx), ad::gather_rows(pooled, pool_idx)};
  Var q0 = rffn(p, "fore.rffn", ad::concat(parts, 1));

  // Future tokens per (b, k, m, t) for agents with observed context.
  std::vector<std::size_t> expand;
  std::vector<std::size_t> out_rows;
  AttentionLayout cross;
  std::vector<std::vector<std::size_t>> social_groups(B * C * T);
  Segments mode_seg;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < C; ++k) {
      std::vector<std::size_t> mode_rows;
      for (std::size_t m = 0; m < M; ++m) {
        const auto& keys = agent_keys[b * M + m];
        if (keys.empty()) continue;
        std::vector<std::size_t> q_rows;
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t r = expand.size();
          expand.push_back((b * C + k) * T + t);
          out_rows.push_back(((b * C + k) * T + t) * M + m);
          q_rows.push_back(r);
          mode_rows.push_back(r);
          social_groups[(b * C + k) * T + t].push_back(r);
        }
        cross.add_group(q_rows, keys);
      }
      mode_seg.add(mode_rows);
    }
  }
  AttentionLayout social;
  for (const auto& grp : social_groups) {
    if (!grp.empty()) social.add_group(grp, grp);
  }

  Forecast f;
  f.batch = B;
  f.modes = C;
  f.steps = T;
  f.agents = M;
  if (expand.empty()) {
    f.offsets = g.constant(Tensor(Shape{B * C * T * M, 2}));
    f.logits = g.constant(Tensor(Shape{B, C}));
    return f;
  }
  Var x = ad::gather_rows(q0, expand);
  for (std::size_t i = 0; i < cfg_.fore_layers; ++i) {
    const std::string l = "fore.layer" + std::to_string(i);
    x = mab_cross(p, l + ".cross", x, ctx.x, cross, cfg_.heads);
    x = mab(p, l + ".social", x, social, cfg_.heads);
  }
  Var off = ad::scale(lin(p, "fore.head", x), 1.0 / kCoordScale);
  f.offsets = ad::scatter_rows(off, out_rows, B * C * T * M);
  Var pooled_modes = ad::segment_mean(x, mode_seg);
  f.logits = ad::reshape(lin_nobias(p, "fore.logit", pooled_modes), Shape{B, C});
  return f;
}

}  // namespace trajmae
