#include "trajmae/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "trajmae/rng.hpp"

namespace trajmae {

using nlohmann::json;
using nlohmann::ordered_json;

ConfigError::ConfigError(std::string p, const std::string& msg)
    : std::runtime_error(p.empty() ? msg : p + ": " + msg), path(std::move(p)) {}

namespace {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string key_path(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  const json* find(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  void read(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(key_path(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(key_path(key), "expected a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(key_path(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  template <class Fn>
  void read_with(const char* key, Fn&& parse) {
    if (const json* v = find(key)) {
      try {
        parse(*v);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError(key_path(key), e.what());
      }
    }
  }

  Section child(const char* key) {
    const json* v = find(key);
    static const json empty = json::object();
    return Section(v != nullptr ? *v : empty, key_path(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (used_.count(it.key()) == 0) throw ConfigError(key_path(it.key()), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

std::vector<Strategy> order_from_json(const json& v) {
  if (v.is_string()) return parse_order(v.get<std::string>());
  if (!v.is_array()) throw std::invalid_argument("expected a list of strategy names");
  std::vector<Strategy> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw std::invalid_argument("expected a list of strategy names");
    out.push_back(parse_strategy(e.get<std::string>()));
  }
  return out;
}

ordered_json order_to_json(const std::vector<Strategy>& order) {
  ordered_json a = ordered_json::array();
  for (Strategy s : order) a.push_back(std::string(to_string(s)));
  return a;
}

void check_ratio(double r, const std::string& path) {
  if (!(r >= 0.1 && r <= 0.9)) throw ConfigError(path, "masking ratio must lie in [0.1, 0.9]");
}

}  // namespace

double MaskingSection::ratio_for(Strategy s) const {
  auto it = per_strategy.find(s);
  return it == per_strategy.end() ? ratio : it->second;
}

std::vector<Strategy> parse_order(std::string_view csv) {
  std::vector<Strategy> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const std::size_t comma = csv.find(',', start);
    const std::string_view tok = csv.substr(start, comma == std::string_view::npos ? csv.npos : comma - start);
    if (tok.empty()) throw std::invalid_argument("empty entry in strategy order '" + std::string(csv) + "'");
    out.push_back(parse_strategy(tok));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string order_string(const std::vector<Strategy>& order, char sep) {
  std::string s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) s += sep;
    s += to_string(order[i]);
  }
  return s;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Section root(j, "");

  {
    Section s = root.child("data");
    s.read("train", c.data.train);
    s.read("val", c.data.val);
    s.read("test", c.data.test);
    s.read_with("layouts", [&](const json& v) {
      if (!v.is_array()) throw std::invalid_argument("expected a list of layout names");
      c.data.layouts.clear();
      for (const auto& e : v) {
        if (!e.is_string()) throw std::invalid_argument("expected a list of layout names");
        c.data.layouts.push_back(parse_layout(e.get<std::string>()));
      }
    });
    s.read("agents", c.data.sim.agents);
    s.read("t_obs", c.data.sim.t_obs);
    s.read("t_fut", c.data.sim.t_fut);
    s.read("dt", c.data.sim.dt);
    s.read("v_max", c.data.sim.v_max);
    s.read("late_entry_prob", c.data.sim.late_entry_prob);
    s.finish();
  }
  {
    Section s = root.child("model");
    ModelConfig& m = c.model;
    s.read("d_model", m.d_model);
    s.read("enc_layers", m.enc_layers);
    s.read("dec_layers", m.dec_layers);
    s.read("fore_layers", m.fore_layers);
    s.read("heads", m.heads);
    s.read("modes", m.modes);
    s.read("t_obs", m.t_obs);
    s.read("t_fut", m.t_fut);
    s.read("max_agents", m.max_agents);
    s.read("map_points", m.map_points);
    s.read("max_polylines", m.max_polylines);
    s.read("ffn_mult", m.ffn_mult);
    s.finish();
  }
  {
    Section s = root.child("masking");
    s.read("ratio", c.masking.ratio);
    s.read_with("per_strategy", [&](const json& v) {
      Section ps(v, s.key_path("per_strategy"));
      std::map<Strategy, double> per;
      for (auto it = v.begin(); it != v.end(); ++it) {
        Strategy st;
        try {
          st = parse_strategy(it.key());
        } catch (const std::exception& e) {
          throw ConfigError(ps.key_path(it.key()), e.what());
        }
        double r = 0.0;
        ps.read(it.key().c_str(), r);
        per[st] = r;
      }
      ps.finish();
      c.masking.per_strategy = std::move(per);
    });
    s.finish();
  }
  {
    Section s = root.child("pretrain");
    PretrainSection& p = c.pretrain;
    s.read_with("mode", [&](const json& v) {
      if (!v.is_string()) throw std::invalid_argument("expected a string");
      p.mode = parse_schedule_mode(v.get<std::string>());
    });
    s.read_with("traj_order", [&](const json& v) { p.traj_order = order_from_json(v); });
    s.read_with("map_order", [&](const json& v) { p.map_order = order_from_json(v); });
    s.read("steps", p.steps);
    s.read("carry", p.carry);
    s.read("batch_size", p.batch_size);
    s.read("lr", p.lr);
    s.read("huber_delta", p.huber_delta);
    s.read("clip_norm", p.clip_norm);
    s.finish();
  }
  {
    Section s = root.child("finetune");
    FinetuneConfig& f = c.finetune;
    s.read("steps", f.steps);
    s.read("batch_size", f.batch_size);
    s.read("lr", f.lr.lr0);
    s.read("lr_period", f.lr.period);
    s.read("lr_horizon", f.lr.horizon);
    s.read("lr_decay", f.lr.factor);
    s.read("eval_every", f.eval_every);
    s.read("eval_scenes", f.eval_scenes);
    s.read("huber_delta", f.huber_delta);
    s.read("ce_weight", f.ce_weight);
    s.read("clip_norm", f.clip_norm);
    s.finish();
  }
  {
    Section s = root.child("eval");
    s.read("miss_threshold", c.eval.miss_threshold);
    s.read("collision_radius", c.eval.collision_radius);
    s.read("batch_size", c.eval.batch_size);
    s.finish();
  }
  {
    Section s = root.child("seeds");
    std::uint64_t r = c.root_seed;
    s.read_with("root", [&](const json& v) {
      if (!v.is_number_unsigned()) throw std::invalid_argument("expected a non-negative integer");
      r = v.get<std::uint64_t>();
    });
    c.root_seed = r;
    s.finish();
  }
  root.read("output_dir", c.output_dir);
  root.finish();
  c.validate();
  return c;
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  ordered_json layouts = ordered_json::array();
  for (MapLayout l : data.layouts) layouts.push_back(std::string(to_string(l)));
  j["data"] = {{"train", data.train},
               {"val", data.val},
               {"test", data.test},
               {"layouts", layouts},
               {"agents", data.sim.agents},
               {"t_obs", data.sim.t_obs},
               {"t_fut", data.sim.t_fut},
               {"dt", data.sim.dt},
               {"v_max", data.sim.v_max},
               {"late_entry_prob", data.sim.late_entry_prob}};
  j["model"] = model.to_json();
  ordered_json per = ordered_json::object();
  for (const auto& [s, r] : masking.per_strategy) per[std::string(to_string(s))] = r;
  j["masking"] = {{"ratio", masking.ratio}, {"per_strategy", per}};
  j["pretrain"] = {{"mode", std::string(to_string(pretrain.mode))},
                   {"traj_order", order_to_json(pretrain.traj_order)},
                   {"map_order", order_to_json(pretrain.map_order)},
                   {"steps", pretrain.steps},
                   {"carry", pretrain.carry},
                   {"batch_size", pretrain.batch_size},
                   {"lr", pretrain.lr},
                   {"huber_delta", pretrain.huber_delta},
                   {"clip_norm", pretrain.clip_norm}};
  j["finetune"] = {{"steps", finetune.steps},
                   {"batch_size", finetune.batch_size},
                   {"lr", finetune.lr.lr0},
                   {"lr_period", finetune.lr.period},
                   {"lr_horizon", finetune.lr.horizon},
                   {"lr_decay", finetune.lr.factor},
                   {"eval_every", finetune.eval_every},
                   {"eval_scenes", finetune.eval_scenes},
                   {"huber_delta", finetune.huber_delta},
                   {"ce_weight", finetune.ce_weight},
                   {"clip_norm", finetune.clip_norm}};
  j["eval"] = {{"miss_threshold", eval.miss_threshold},
               {"collision_radius", eval.collision_radius},
               {"batch_size", eval.batch_size}};
  j["seeds"] = {{"root", root_seed}};
  j["output_dir"] = output_dir;
  return j;
}

void RunConfig::validate() const {
  if (data.train == 0) throw ConfigError("data.train", "every split needs at least one scene");
  if (data.val == 0) throw ConfigError("data.val", "every split needs at least one scene");
  if (data.test == 0) throw ConfigError("data.test", "every split needs at least one scene");
  if (data.layouts.empty()) throw ConfigError("data.layouts", "at least one layout is required");
  if (data.sim.agents < 2) throw ConfigError("data.agents", "scenes need at least two agents");
  if (data.sim.t_obs < 2) throw ConfigError("data.t_obs", "at least two observed steps are required");
  if (data.sim.t_fut < 1) throw ConfigError("data.t_fut", "at least one future step is required");
  if (!(data.sim.dt > 0.0)) throw ConfigError("data.dt", "must be positive");
  try {
    model.validate();
  } catch (const std::exception& e) {
    throw ConfigError("model", e.what());
  }
  if (model.t_obs != data.sim.t_obs) throw ConfigError("model.t_obs", "must equal data.t_obs");
  if (model.t_fut != data.sim.t_fut) throw ConfigError("model.t_fut", "must equal data.t_fut");
  if (model.max_agents < data.sim.agents) throw ConfigError("model.max_agents", "must be at least data.agents");
  if (model.map_points != kMapPoints) {
    throw ConfigError("model.map_points", "synthetic maps carry " + std::to_string(kMapPoints) + " points per polyline");
  }

  check_ratio(masking.ratio, "masking.ratio");
  for (const auto& [s, r] : masking.per_strategy) {
    check_ratio(r, "masking.per_strategy." + std::string(to_string(s)));
  }

  for (const auto& [path, order, traj] :
       {std::tuple{"pretrain.traj_order", &pretrain.traj_order, true},
        std::tuple{"pretrain.map_order", &pretrain.map_order, false}}) {
    if (order->empty()) throw ConfigError(path, "order must not be empty");
    for (Strategy s : *order) {
      if (is_trajectory_strategy(s) != traj) {
        throw ConfigError(path, std::string("strategy ") + std::string(to_string(s)) + " does not belong here");
      }
    }
    try {
      build_schedule(pretrain.mode, *order, pretrain.steps, pretrain.carry);
    } catch (const std::exception& e) {
      throw ConfigError(path, e.what());
    }
  }
  if (pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size", "must be at least 1");
  if (!(pretrain.lr > 0.0)) throw ConfigError("pretrain.lr", "must be positive");
  if (!(pretrain.huber_delta > 0.0)) throw ConfigError("pretrain.huber_delta", "must be positive");
  if (pretrain.clip_norm < 0.0) throw ConfigError("pretrain.clip_norm", "must be non-negative");
  try {
    finetune.validate();
  } catch (const std::exception& e) {
    throw ConfigError("finetune", e.what());
  }
  if (!(eval.miss_threshold > 0.0)) throw ConfigError("eval.miss_threshold", "must be positive");
  if (!(eval.collision_radius > 0.0)) throw ConfigError("eval.collision_radius", "must be positive");
  if (eval.batch_size == 0) throw ConfigError("eval.batch_size", "must be at least 1");
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
}

std::uint64_t RunConfig::seed_for(std::string_view purpose) const { return mix64(mix64(root_seed) ^ hash_tag(purpose)); }

PretrainConfig RunConfig::pretrain_config(Target target) const {
  PretrainConfig p;
  p.mode = pretrain.mode;
  p.order = pretrain.order_for(target);
  p.N = pretrain.steps;
  p.carry = pretrain.carry;
  for (Strategy s : p.order) p.ratio[s] = masking.ratio_for(s);
  p.default_ratio = masking.ratio;
  p.batch_size = pretrain.batch_size;
  p.lr = pretrain.lr;
  p.huber_delta = pretrain.huber_delta;
  p.clip_norm = pretrain.clip_norm;
  p.seed = seed_for(std::string("pretrain/") + std::string(to_string(target)));
  return p;
}

FinetuneConfig RunConfig::finetune_config() const {
  FinetuneConfig f = finetune;
  f.seed = seed_for("finetune");
  f.metrics = metric_params();
  return f;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("", "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

}  // namespace trajmae
