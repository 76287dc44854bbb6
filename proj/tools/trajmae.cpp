// trajmae: synthetic data, masked pre-training, fine-tuning, evaluation,
// ablation sweeps and property verification behind one entry point.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trajmae/checkpoint.hpp"
#include "trajmae/config.hpp"
#include "trajmae/metrics.hpp"
#include "trajmae/model.hpp"
#include "trajmae/scene.hpp"
#include "trajmae/training.hpp"
#include "trajmae/verify.hpp"

namespace fs = std::filesystem;
using namespace trajmae;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kPropertyFailure = 1, kConfigError = 2, kNumericalAbort = 3, kCheckpointMismatch = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

const char* kReportColumns = "min_ade,min_fde,miss_rate,min_joint_ade,min_joint_fde,min_joint_mr,"
                             "cross_collision_rate,ego_collision_rate,consistent_min_joint_mr";

std::string report_cells(const EvalReport& r) {
  return num(r.min_ade) + "," + num(r.min_fde) + "," + num(r.miss_rate) + "," + num(r.min_joint_ade) + "," +
         num(r.min_joint_fde) + "," + num(r.min_joint_mr) + "," + num(r.cross_collision_rate) + "," +
         num(r.ego_collision_rate) + "," + num(r.consistent_min_joint_mr);
}

// ---- Shared state ---------------------------------------------------------

struct Common {
  std::string config_path;
  std::string output_dir;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  cfg.validate();
  return cfg;
}

void echo_config(const RunConfig& cfg) { write_json(fs::path(cfg.output_dir) / "config.resolved.json", cfg.to_json()); }

fs::path data_dir(const RunConfig& cfg) { return fs::path(cfg.output_dir) / "data"; }

DatasetShard load_split(const RunConfig& cfg, Split split) {
  const fs::path p = data_dir(cfg) / (std::string(to_string(split)) + ".jsonl");
  if (!fs::exists(p)) throw UsageError("missing shard " + p.string() + " (run `trajmae synth` first)");
  DatasetShard shard = read_shard(p, split);
  for (const Scene& s : shard.scenes) {
    if (s.t_obs != cfg.model.t_obs || s.t_fut != cfg.model.t_fut || s.agents > cfg.model.max_agents) {
      throw UsageError("shard " + p.string() + " does not match the model horizon or agent count");
    }
  }
  return shard;
}

std::optional<Checkpoint> load_optional(const std::string& path, const ModelConfig& expected) {
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path, expected);
}

// ---- synth ----------------------------------------------------------------

int cmd_synth(const Common& common) {
  RunConfig cfg = resolve(common);
  echo_config(cfg);
  DatasetConfig dc = cfg.data;
  dc.seed = cfg.seed_for("data");
  const Dataset ds = generate_dataset(dc);
  const fs::path dir = data_dir(cfg);
  fs::create_directories(dir);
  ordered_json stats;
  for (const DatasetShard* s : {&ds.train, &ds.val, &ds.test}) {
    const std::string name(to_string(s->split));
    write_shard(dir / (name + ".jsonl"), *s);
    stats[name] = shard_stats(*s);
  }
  write_json(dir / "stats.json", stats);
  std::cout << "wrote " << ds.train.scenes.size() << "/" << ds.val.scenes.size() << "/" << ds.test.scenes.size()
            << " train/val/test scenes to " << dir.string() << "\n";
  return kOk;
}

// ---- pretrain -------------------------------------------------------------

struct PretrainArgs {
  std::string target = "traj";
  std::string mode;
  std::string order;
  std::optional<double> ratio;
};

int cmd_pretrain(const Common& common, const PretrainArgs& a) {
  RunConfig cfg = resolve(common);
  const Target target = parse_target(a.target);
  if (!a.mode.empty()) cfg.pretrain.mode = parse_schedule_mode(a.mode);
  if (!a.order.empty()) {
    (target == Target::Trajectory ? cfg.pretrain.traj_order : cfg.pretrain.map_order) = parse_order(a.order);
  }
  if (a.ratio) cfg.masking.ratio = *a.ratio;
  cfg.validate();
  echo_config(cfg);

  const DatasetShard train = load_split(cfg, Split::Train);
  const PretrainConfig pc = cfg.pretrain_config(target);
  const StagePlan plan = build_schedule(pc.mode, pc.order, pc.N, pc.carry);
  const fs::path dir = fs::path(cfg.output_dir) / "pretrain" / std::string(to_string(target));
  fs::create_directories(dir);

  ordered_json sched;
  sched["target"] = std::string(to_string(target));
  ordered_json ratios = ordered_json::object();
  for (Strategy s : pc.order) ratios[std::string(to_string(s))] = pc.ratio_for(s);
  sched["ratios"] = ratios;
  sched["plan"] = plan.to_json();
  write_json(dir / "schedule.json", sched);

  const TrajMAE model(cfg.model);
  PretrainHooks hooks;
  hooks.on_stage_end = [&](std::size_t stage, const Checkpoint& ck) {
    const fs::path p = dir / ("stage" + std::to_string(stage + 1) + ".tmae");
    save_checkpoint(p, ck);
    std::cout << "stage " << stage + 1 << "/" << plan.stages() << " -> " << p.string() << "\n";
  };
  const PretrainResult res = run_pretrain(model, pc, train, target, hooks);
  write_text(dir / "curve.csv", curve_csv(res.curve));
  if (!res.curve.empty()) std::cout << "final loss " << num(res.curve.back().loss) << "\n";
  return kOk;
}

// ---- finetune / eval ------------------------------------------------------

struct InitArgs {
  std::string traj_ckpt;
  std::string map_ckpt;
};

ordered_json init_json(const InitArgs& a) {
  ordered_json j;
  j["traj_ckpt"] = a.traj_ckpt.empty() ? ordered_json(nullptr) : ordered_json(a.traj_ckpt);
  j["map_ckpt"] = a.map_ckpt.empty() ? ordered_json(nullptr) : ordered_json(a.map_ckpt);
  return j;
}

int cmd_finetune(const Common& common, const InitArgs& a) {
  RunConfig cfg = resolve(common);
  echo_config(cfg);
  const DatasetShard train = load_split(cfg, Split::Train);
  const DatasetShard val = load_split(cfg, Split::Val);
  const TrajMAE model(cfg.model);
  const FinetuneConfig fc = cfg.finetune_config();
  const std::optional<Checkpoint> traj = load_optional(a.traj_ckpt, cfg.model);
  const std::optional<Checkpoint> map = load_optional(a.map_ckpt, cfg.model);
  ParamStore params = init_finetune_params(model, fc.seed, traj ? &*traj : nullptr, map ? &*map : nullptr);
  const FinetuneResult res = run_finetune(model, std::move(params), fc, train, val);

  const fs::path dir = fs::path(cfg.output_dir) / "finetune";
  fs::create_directories(dir);
  save_checkpoint(dir / "model.tmae", res.checkpoint);
  write_text(dir / "curve.csv", curve_csv(res.curve));
  std::string vcsv = std::string("step,") + kReportColumns + "\n";
  for (const Validation& v : res.validations) vcsv += std::to_string(v.step) + "," + report_cells(v.report) + "\n";
  write_text(dir / "validation.csv", vcsv);

  const EvalReport final_report =
      evaluate(model, res.checkpoint.params, val, fc.metrics, fc.eval_scenes, cfg.eval.batch_size);
  ordered_json out;
  out["split"] = "val";
  out["init"] = init_json(a);
  out["steps"] = fc.steps;
  out["report"] = report_to_json(final_report);
  write_json(dir / "metrics.json", out);
  std::cout << "val minADE " << num(final_report.min_ade) << "  minFDE " << num(final_report.min_fde) << "  MR "
            << num(final_report.miss_rate) << "\n";
  return kOk;
}

// Forecast file: one JSON object per test scene, in shard order, with
// "pred" indexed [mode][step][agent] -> [x, y].
std::vector<ForecastSample> read_forecasts(const fs::path& path, const DatasetShard& test) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open forecast file " + path.string());
  std::vector<ForecastSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (out.size() >= test.scenes.size()) throw UsageError(where + ": more forecasts than test scenes");
    const Scene& s = test.scenes[out.size()];
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw UsageError(where + ": " + e.what());
    }
    if (!j.contains("pred") || !j["pred"].is_array() || j["pred"].empty()) {
      throw UsageError(where + ": expected a non-empty \"pred\" array");
    }
    const json& pred = j["pred"];
    ForecastSample fs = truth_sample(s, pred.size());
    for (std::size_t k = 0; k < pred.size(); ++k) {
      if (!pred[k].is_array() || pred[k].size() != s.t_fut) throw UsageError(where + ": mode " + std::to_string(k) + " needs " + std::to_string(s.t_fut) + " steps");
      for (std::size_t t = 0; t < s.t_fut; ++t) {
        const json& row = pred[k][t];
        if (!row.is_array() || row.size() != s.agents) throw UsageError(where + ": step " + std::to_string(t) + " needs " + std::to_string(s.agents) + " agents");
        for (std::size_t m = 0; m < s.agents; ++m) {
          const json& xy = row[m];
          if (!xy.is_array() || xy.size() != 2 || !xy[0].is_number() || !xy[1].is_number()) {
            throw UsageError(where + ": expected [x, y] pairs");
          }
          const std::size_t i = ((k * fs.steps + t) * fs.agents + m) * 2;
          fs.pred[i] = xy[0].get<double>();
          fs.pred[i + 1] = xy[1].get<double>();
        }
      }
    }
    out.push_back(std::move(fs));
  }
  if (out.size() != test.scenes.size()) {
    throw UsageError(path.string() + ": " + std::to_string(out.size()) + " forecasts for " +
                     std::to_string(test.scenes.size()) + " test scenes");
  }
  return out;
}

struct EvalArgs {
  InitArgs init;
  std::string ckpt;
  std::string forecasts;
};

int cmd_eval(const Common& common, const EvalArgs& a) {
  RunConfig cfg = resolve(common);
  echo_config(cfg);
  const DatasetShard test = load_split(cfg, Split::Test);
  const MetricParams mp = cfg.metric_params();
  ordered_json out;
  out["split"] = "test";
  std::vector<SceneMetrics> per_scene;
  EvalReport report;
  if (!a.forecasts.empty()) {
    if (!a.ckpt.empty() || !a.init.traj_ckpt.empty() || !a.init.map_ckpt.empty()) {
      throw UsageError("--forecasts cannot be combined with checkpoints");
    }
    out["source"] = {{"forecasts", a.forecasts}};
    for (const ForecastSample& f : read_forecasts(a.forecasts, test)) per_scene.push_back(evaluate_scene(f, mp));
    report = aggregate(per_scene);
  } else {
    const TrajMAE model(cfg.model);
    ParamStore params;
    if (!a.ckpt.empty()) {
      if (!a.init.traj_ckpt.empty() || !a.init.map_ckpt.empty()) {
        throw UsageError("--ckpt cannot be combined with --traj-ckpt/--map-ckpt");
      }
      params = load_checkpoint(a.ckpt, cfg.model).params;
      out["source"] = {{"ckpt", a.ckpt}};
    } else {
      const std::optional<Checkpoint> traj = load_optional(a.init.traj_ckpt, cfg.model);
      const std::optional<Checkpoint> map = load_optional(a.init.map_ckpt, cfg.model);
      params = init_finetune_params(model, cfg.seed_for("finetune"), traj ? &*traj : nullptr, map ? &*map : nullptr);
      out["source"] = init_json(a.init);
    }
    report = evaluate(model, params, test, mp, 0, cfg.eval.batch_size, &per_scene);
  }
  out["report"] = report_to_json(report);
  const fs::path dir = fs::path(cfg.output_dir) / "eval";
  write_json(dir / "metrics.json", out);
  std::string lines;
  for (const SceneMetrics& m : per_scene) lines += scene_metrics_to_json(m).dump() + "\n";
  write_text(dir / "per_scene.jsonl", lines);
  std::cout << "test minADE " << num(report.min_ade) << "  minFDE " << num(report.min_fde) << "  MR "
            << num(report.miss_rate) << " over " << report.scenes << " scenes\n";
  return kOk;
}

// ---- ablate ---------------------------------------------------------------

struct Cell {
  std::string value;
  std::vector<Strategy> order;
  ScheduleMode mode = ScheduleMode::ContinualPretrain;
  std::map<Strategy, double> ratio;
};

std::string fmt_ratio(double r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

std::vector<Cell> ablation_cells(const RunConfig& cfg, const std::string& axis, Target target) {
  const std::vector<Strategy> all = target == Target::Trajectory
                                        ? std::vector<Strategy>{Strategy::Social, Strategy::Temporal,
                                                                Strategy::SocialTemporal}
                                        : std::vector<Strategy>{Strategy::Point, Strategy::Patch, Strategy::Block};
  std::vector<Cell> cells;
  if (axis == "ratio") {
    for (Strategy s : all) {
      for (int i = 3; i <= 8; ++i) {
        const double r = i / 10.0;
        cells.push_back({fmt_ratio(r), {s}, ScheduleMode::ContinualPretrain, {{s, r}}});
      }
    }
  } else if (axis == "strategy") {
    for (Strategy s : all) {
      cells.push_back({std::string(to_string(s)), {s}, ScheduleMode::ContinualPretrain, {{s, cfg.masking.ratio_for(s)}}});
    }
  } else if (axis == "order") {
    std::vector<std::size_t> idx{0, 1, 2};
    do {
      Cell c;
      for (std::size_t i : idx) c.order.push_back(all[i]);
      c.value = order_string(c.order, '>');
      for (Strategy s : c.order) c.ratio[s] = cfg.masking.ratio_for(s);
      cells.push_back(std::move(c));
    } while (std::next_permutation(idx.begin(), idx.end()));
  } else if (axis == "schedule-mode") {
    for (ScheduleMode m : {ScheduleMode::ContinualPretrain, ScheduleMode::Sequential, ScheduleMode::Joint}) {
      Cell c;
      c.value = std::string(to_string(m));
      c.mode = m;
      c.order = cfg.pretrain.order_for(target);
      for (Strategy s : c.order) c.ratio[s] = cfg.masking.ratio_for(s);
      cells.push_back(std::move(c));
    }
  } else {
    throw UsageError("unknown ablation axis '" + axis + "' (expected ratio, strategy, order or schedule-mode)");
  }
  return cells;
}

double validation_loss(const TrajMAE& model, const ParamStore& params, const DatasetShard& val, Target target,
                       const PretrainConfig& pc, std::uint64_t seed, std::size_t batch_size) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pc.order.size(); ++i) {
    const Strategy s = pc.order[i];
    RngStream rng = RngStream(seed, "ablate.val").derive(i);
    for (std::size_t start = 0; start < val.scenes.size(); start += batch_size) {
      std::vector<const Scene*> batch;
      for (std::size_t j = start; j < std::min(start + batch_size, val.scenes.size()); ++j) batch.push_back(&val.scenes[j]);
      total += reconstruction_step(model, params, batch, target, s, pc.ratio_for(s), rng, pc.huber_delta, nullptr);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

std::size_t pool_width(std::size_t jobs) {
  std::size_t width = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TRAJMAE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw UsageError("TRAJMAE_THREADS must be a positive integer");
    width = static_cast<std::size_t>(v);
  }
  return std::min(width, std::max<std::size_t>(jobs, 1));
}

struct AblateArgs {
  std::string axis;
  std::string target = "traj";
};

int cmd_ablate(const Common& common, const AblateArgs& a) {
  RunConfig cfg = resolve(common);
  const Target target = parse_target(a.target);
  const std::vector<Cell> cells = ablation_cells(cfg, a.axis, target);
  echo_config(cfg);
  const DatasetShard train = load_split(cfg, Split::Train);
  const DatasetShard val = load_split(cfg, Split::Val);
  const TrajMAE model(cfg.model);
  const std::uint64_t seed = cfg.seed_for("ablate/" + a.axis + "/" + std::string(to_string(target)));

  std::vector<std::string> rows(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        const Cell& c = cells[i];
        PretrainConfig pc = cfg.pretrain_config(target);
        pc.order = c.order;
        pc.mode = c.mode;
        pc.ratio = c.ratio;
        pc.seed = seed;
        const StagePlan plan = build_schedule(pc.mode, pc.order, pc.N, pc.carry);
        const PretrainResult pre = run_pretrain(model, pc, train, target);
        const double vloss =
            validation_loss(model, pre.checkpoint.params, val, target, pc, seed, cfg.eval.batch_size);
        FinetuneConfig fc = cfg.finetune_config();
        fc.eval_every = 0;
        const Checkpoint& ck = pre.checkpoint;
        ParamStore params = init_finetune_params(model, fc.seed, target == Target::Trajectory ? &ck : nullptr,
                                                 target == Target::Map ? &ck : nullptr);
        const FinetuneResult ft = run_finetune(model, std::move(params), fc, train, val);
        const EvalReport rep =
            evaluate(model, ft.checkpoint.params, val, fc.metrics, fc.eval_scenes, cfg.eval.batch_size);
        std::string ratios;
        for (Strategy s : c.order) ratios += (ratios.empty() ? "" : ";") + fmt_ratio(pc.ratio_for(s));
        rows[i] = a.axis + "," + c.value + "," + std::string(to_string(target)) + "," + order_string(c.order, '>') +
                  "," + std::string(to_string(c.mode)) + "," + ratios + "," + std::to_string(plan.total_steps()) +
                  "," + num(vloss) + "," + report_cells(rep) + "\n";
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t width = pool_width(cells.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < width; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::string csv = std::string("axis,value,target,strategies,mode,ratios,pretrain_steps,val_loss,") +
                    kReportColumns + "\n";
  for (const auto& r : rows) csv += r;
  const fs::path path = fs::path(cfg.output_dir) / "ablate" / (a.axis + "-" + std::string(to_string(target)) + ".csv");
  write_text(path, csv);
  std::cout << cells.size() << " cells on " << width << " workers -> " << path.string() << "\n";
  return kOk;
}

// ---- verify ---------------------------------------------------------------

struct VerifyArgs {
  bool inject_fault = false;
  std::vector<std::string> suites;
};

int cmd_verify(const Common& common, const VerifyArgs& a) {
  RunConfig cfg = resolve(common);
  echo_config(cfg);
  const std::vector<std::string> known{"masking", "blindness", "gradient", "masked-loss", "quota", "metric-oracle"};
  std::vector<std::string> chosen = a.suites.empty() ? known : a.suites;
  for (const auto& s : chosen) {
    if (std::find(known.begin(), known.end(), s) == known.end()) throw UsageError("unknown suite '" + s + "'");
  }
  const std::uint64_t seed = cfg.seed_for("verify");
  ordered_json results = ordered_json::array();
  bool ok = true;
  for (const auto& name : known) {
    if (std::find(chosen.begin(), chosen.end(), name) == chosen.end()) continue;
    SuiteResult r;
    if (name == "masking") r = masking_suite(seed);
    else if (name == "blindness") r = blindness_suite(seed, 100, a.inject_fault);
    else if (name == "gradient") r = gradient_suite(seed);
    else if (name == "masked-loss") r = masked_loss_suite(seed);
    else if (name == "quota") r = quota_suite(seed);
    else r = metric_oracle_suite(seed);
    ok = ok && r.passed();
    std::printf("%-14s %-4s  %s: %zu cases, %zu checks, %zu violations (%.1fs)\n", r.name.c_str(),
                r.passed() ? "PASS" : "FAIL", r.property.c_str(), r.cases, r.checks, r.violations, r.seconds);
    for (const auto& f : r.failures) std::printf("    %s\n", f.c_str());
    results.push_back(r.to_json());
  }
  ordered_json out;
  out["passed"] = ok;
  out["fault_injected"] = a.inject_fault;
  out["suites"] = results;
  write_json(fs::path(cfg.output_dir) / "verify" / "results.json", out);
  return ok ? kOk : kPropertyFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked trajectory/map autoencoder pre-training on synthetic driving scenes"};
  app.require_subcommand(1);
  Common common;
  app.add_option("-c,--config", common.config_path, "Run configuration (JSON); defaults apply when omitted")
      ->check(CLI::ExistingFile);
  app.add_option("-o,--output-dir", common.output_dir, "Override output_dir from the configuration");

  int rc = kOk;
  auto* synth = app.add_subcommand("synth", "Generate train/val/test scene shards");
  synth->callback([&] { rc = cmd_synth(common); });

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "Masked reconstruction pre-training of one encoder");
  pre->add_option("--target", pa.target, "Encoder to pre-train")->check(CLI::IsMember({"traj", "map"}));
  pre->add_option("--mode", pa.mode, "Schedule mode")->check(CLI::IsMember({"continual-pretrain", "sequential", "joint"}));
  pre->add_option("--order", pa.order, "Comma-separated strategy order, e.g. S,T,ST or Po,Pa,B");
  pre->add_option("--ratio", pa.ratio, "Masking ratio for strategies without a per-strategy override")
      ->check(CLI::Range(0.1, 0.9));
  pre->callback([&] { rc = cmd_pretrain(common, pa); });

  InitArgs fa;
  auto* fin = app.add_subcommand("finetune", "Fine-tune the forecaster, optionally from pre-trained encoders");
  fin->add_option("--traj-ckpt", fa.traj_ckpt, "Trajectory encoder checkpoint")->check(CLI::ExistingFile);
  fin->add_option("--map-ckpt", fa.map_ckpt, "Map encoder checkpoint")->check(CLI::ExistingFile);
  fin->callback([&] { rc = cmd_finetune(common, fa); });

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Metrics on the test split");
  ev->add_option("--ckpt", ea.ckpt, "Fine-tuned model checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--traj-ckpt", ea.init.traj_ckpt, "Trajectory encoder checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--map-ckpt", ea.init.map_ckpt, "Map encoder checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--forecasts", ea.forecasts, "JSONL forecasts, one line per test scene: {\"pred\": [mode][step][agent][x,y]}")
      ->check(CLI::ExistingFile);
  ev->callback([&] { rc = cmd_eval(common, ea); });

  AblateArgs aa;
  auto* abl = app.add_subcommand("ablate", "Pre-train + fine-tune sweep along one axis");
  abl->add_option("--axis", aa.axis, "ratio | strategy | order | schedule-mode")->required();
  abl->add_option("--target", aa.target, "Encoder to pre-train")->check(CLI::IsMember({"traj", "map"}));
  abl->callback([&] { rc = cmd_ablate(common, aa); });

  VerifyArgs va;
  auto* ver = app.add_subcommand("verify", "Run the property suites");
  ver->add_flag("--inject-fault", va.inject_fault, "Expose one masked slot to the encoder (negative control)");
  ver->add_option("--suite", va.suites, "Run only these suites (repeatable)");
  ver->callback([&] { rc = cmd_verify(common, va); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kNumericalAbort;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << "\n";
    return kCheckpointMismatch;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPropertyFailure;
  }
  return rc;
}
