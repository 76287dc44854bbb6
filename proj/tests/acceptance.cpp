// Acceptance harness: one PASS/FAIL line per criterion.
//
//   acceptance                 run criteria 1-10
//   acceptance --criterion N   run one criterion

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajmae/checkpoint.hpp"
#include "trajmae/metrics.hpp"
#include "trajmae/training.hpp"
#include "trajmae/verify.hpp"

namespace fs = std::filesystem;
using namespace trajmae;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSeed = 20240501;

struct Outcome {
  bool pass = false;
  std::string detail;
  std::vector<std::string> notes;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Outcome suite_outcome(const SuiteResult& r, double budget) {
  Outcome o;
  o.pass = r.passed() && r.seconds < budget;
  o.detail = std::to_string(r.cases) + " cases, " + std::to_string(r.checks) + " checks, " +
             std::to_string(r.violations) + " violations, " + fmt("%.2f", r.seconds) + "s of " +
             fmt("%.0f", budget) + "s";
  for (const auto& f : r.failures) o.notes.push_back(f);
  if (!r.details.empty()) o.notes.push_back(r.details.dump());
  return o;
}

// ---- 1-6: property suites --------------------------------------------------

Outcome masking_exactness() { return suite_outcome(masking_suite(kSeed), 10.0); }
Outcome encoder_blindness() { return suite_outcome(blindness_suite(kSeed, 100), 30.0); }
Outcome gradient_fidelity() { return suite_outcome(gradient_suite(kSeed, 20, 1e-5), 300.0); }
Outcome masked_only_loss() { return suite_outcome(masked_loss_suite(kSeed, 50), 60.0); }

Outcome schedule_reproduction() {
  const auto t0 = Clock::now();
  const StagePlan p = build_schedule(ScheduleMode::ContinualPretrain,
                                     {Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal}, 120000, 30000);
  // Per strategy across stages.
  const std::vector<std::vector<std::size_t>> expected{{60000, 30000, 30000}, {0, 90000, 30000}, {0, 0, 120000}};
  bool table = p.stages() == 3;
  for (std::size_t s = 0; table && s < 3; ++s) {
    for (std::size_t st = 0; st < 3; ++st) table = table && p.quota[st][s] == expected[s][st];
  }
  const SuiteResult sweep = quota_suite(kSeed, 500);
  Outcome o = suite_outcome(sweep, 5.0);
  const double elapsed = seconds_since(t0);
  o.pass = o.pass && table && elapsed < 5.0;
  o.detail = std::string("reference table ") + (table ? "matches" : "DIFFERS") + "; " + o.detail;
  return o;
}

ForecastSample lanes(std::size_t modes, std::size_t steps, std::size_t agents) {
  ForecastSample f(modes, steps, agents, 0);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t m = 0; m < agents; ++m) {
      f.truth[(t * agents + m) * 2] = static_cast<double>(t);
      f.truth[(t * agents + m) * 2 + 1] = 10.0 * static_cast<double>(m);
    }
  }
  return f;
}

void offset_mode(ForecastSample& f, std::size_t k, std::size_t m, double dx, double dy) {
  for (std::size_t t = 0; t < f.steps; ++t) {
    const std::size_t i = ((k * f.steps + t) * f.agents + m) * 2;
    f.pred[i] = f.tx(t, m) + dx;
    f.pred[i + 1] = f.ty(t, m) + dy;
  }
}

void place(ForecastSample& f, std::size_t k, std::size_t t, std::size_t m, std::size_t onto) {
  const std::size_t i = ((k * f.steps + t) * f.agents + m) * 2;
  f.pred[i] = f.px(k, t, onto);
  f.pred[i + 1] = f.py(k, t, onto);
}

std::vector<std::string> metric_hand_cases() {
  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  const MetricParams mp{2.0, 0.5};
  double a, f, m;

  ForecastSample exact = lanes(2, 3, 1);
  offset_mode(exact, 0, 0, 4, 4);
  offset_mode(exact, 1, 0, 0, 0);
  expect(ego_displacement(exact, 2.0, a, f, m) && a == 0 && f == 0 && m == 0, "exact mode -> (0,0,0)");

  ForecastSample two = lanes(2, 3, 1);
  offset_mode(two, 0, 0, 1.0, 0.0);
  offset_mode(two, 1, 0, 0.0, 2.5);
  expect(ego_displacement(two, 2.0, a, f, m) && a == 1.0 && f == 1.0 && m == 0.0, "minADE 1, minFDE 1, MR 0");

  ForecastSample off = lanes(2, 3, 1);
  offset_mode(off, 0, 0, 3, 4);
  offset_mode(off, 1, 0, 3, 4);
  expect(ego_displacement(off, 2.0, a, f, m) && f == 5.0 && m == 1.0, "minFDE 5, MR 1");

  ForecastSample jp = lanes(2, 3, 2);
  offset_mode(jp, 0, 0, 6, 0);
  offset_mode(jp, 0, 1, 6, 0);
  offset_mode(jp, 1, 0, 0, 0);
  offset_mode(jp, 1, 1, 0, 0);
  expect(joint_displacement(jp, 2.0, a, f, m) && a == 0 && f == 0 && m == 0, "perfect joint mode -> (0,0,0)");

  ForecastSample j = lanes(2, 3, 2);
  offset_mode(j, 0, 0, 0, 0);
  offset_mode(j, 0, 1, 0, 3);
  offset_mode(j, 1, 0, 1, 0);
  offset_mode(j, 1, 1, 1, 0);
  expect(joint_displacement(j, 2.0, a, f, m) && a == 1.0 && m == 0.0, "minJointADE 1, minJointMR 0");

  ForecastSample jm = lanes(2, 3, 2);
  offset_mode(jm, 0, 0, 0, 0);
  offset_mode(jm, 0, 1, 0, 3);
  offset_mode(jm, 1, 0, 2.5, 0);
  offset_mode(jm, 1, 1, 0, 0);
  expect(joint_displacement(jm, 2.0, a, f, m) && m == 1.0, "every mode misses -> minJointMR 1");

  ForecastSample apart = lanes(2, 3, 2);
  for (std::size_t k = 0; k < 2; ++k) {
    offset_mode(apart, k, 0, 0, 0);
    offset_mode(apart, k, 1, 0, 0);
  }
  expect(cross_collision_rate(apart, 0.5) == 0 && ego_collision_rate(apart, 0.5) == 0, "10 m apart -> (0,0)");
  ForecastSample hit = apart;
  for (std::size_t k = 0; k < 2; ++k) place(hit, k, 1, 1, 0);
  expect(cross_collision_rate(hit, 0.5) == 1 && ego_collision_rate(hit, 0.5) == 1, "coincident with ego -> (1,1)");

  ForecastSample three = lanes(4, 3, 3);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t ag = 0; ag < 3; ++ag) offset_mode(three, k, ag, 0, 0);
  }
  place(three, 1, 2, 2, 1);
  place(three, 3, 0, 2, 1);
  expect(cross_collision_rate(three, 0.5) == 0.5 && ego_collision_rate(three, 0.5) == 0, "half the modes -> (0.5,0)");

  ForecastSample clean = lanes(2, 3, 2);
  offset_mode(clean, 0, 0, 0, 0);
  offset_mode(clean, 0, 1, 0, 0);
  offset_mode(clean, 1, 0, 9, 0);
  offset_mode(clean, 1, 1, 9, 0);
  expect(consistent_min_joint_mr(clean, 2.0, 0.5) == 0, "collision-free perfect mode -> 0");
  ForecastSample only = clean;
  place(only, 0, 0, 1, 0);
  offset_mode(only, 1, 0, 5, 0);
  offset_mode(only, 1, 1, 5, 0);
  expect(consistent_min_joint_mr(only, 2.0, 0.5) == 1, "accurate mode collides, clean mode misses -> 1");
  ForecastSample all = clean;
  offset_mode(all, 1, 0, 0, 0);
  offset_mode(all, 1, 1, 0, 0);
  for (std::size_t k = 0; k < 2; ++k) place(all, k, 2, 1, 0);
  expect(consistent_min_joint_mr(all, 2.0, 0.5) == 1, "all modes collide -> 1");

  const SceneMetrics s = evaluate_scene(two, mp);
  expect(s.min_ade == 1.0 && s.min_fde == 1.0 && s.miss == 0.0, "evaluate_scene agrees with primitives");
  return bad;
}

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  Outcome o = suite_outcome(metric_oracle_suite(kSeed, 200, 1e-12), 30.0);
  const auto bad = metric_hand_cases();
  o.pass = o.pass && bad.empty() && seconds_since(t0) < 30.0;
  o.detail += "; hand cases " + std::to_string(13 - bad.size()) + "/13 exact";
  for (const auto& b : bad) o.notes.push_back("hand case failed: " + b);
  return o;
}

// ---- 7: pre-training learns -------------------------------------------------

Outcome pretraining_learns() {
  const auto t0 = Clock::now();
  std::size_t ok = 0;
  Outcome o;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    DatasetConfig dc;
    dc.train = 2000;
    dc.val = 200;
    dc.test = 1;
    dc.seed = mix64(kSeed + s);
    const Dataset ds = generate_dataset(dc);
    const TrajMAE model{ModelConfig{}};
    PretrainConfig pc;
    pc.order = {Strategy::Temporal};
    pc.N = 2000;
    pc.carry = 0;
    pc.ratio[Strategy::Temporal] = 0.6;
    pc.seed = mix64(kSeed + 100 + s);
    const std::uint64_t eval_seed = mix64(kSeed + 200 + s);
    const double before = reconstruction_rmse(model, model.make_params(pc.seed), ds.val, Target::Trajectory,
                                              Strategy::Temporal, 0.6, eval_seed);
    const PretrainResult r = run_pretrain(model, pc, ds.train, Target::Trajectory);
    const double after = reconstruction_rmse(model, r.checkpoint.params, ds.val, Target::Trajectory,
                                             Strategy::Temporal, 0.6, eval_seed);
    const bool pass = after < 0.5 * before;
    ok += pass ? 1 : 0;
    o.notes.push_back("seed " + std::to_string(s) + ": held-out masked RMSE " + fmt("%.4f", before) + " -> " +
                      fmt("%.4f", after) + " m (" + fmt("%.1f", 100.0 * after / before) + "%)");
  }
  const double elapsed = seconds_since(t0);
  o.pass = ok == 5 && elapsed < 900.0;
  o.detail = "T masking r=0.6, 2000 steps, 2000 scenes: " + std::to_string(ok) + "/5 seeds below 50% of untrained, " +
             fmt("%.0f", elapsed) + "s of 900s";
  return o;
}

// ---- 8: pre-training helps downstream ---------------------------------------

ModelConfig downstream_model() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.modes = 3;
  c.enc_layers = 2;
  c.dec_layers = 1;
  c.fore_layers = 1;
  return c;
}

FinetuneConfig finetune_for(std::size_t steps, std::uint64_t seed) {
  FinetuneConfig fc;
  fc.steps = steps;
  fc.eval_every = 0;
  fc.seed = seed;
  fc.lr.horizon = steps;
  fc.lr.period = steps / 5;
  return fc;
}

Outcome pretraining_helps() {
  const auto t0 = Clock::now();
  constexpr std::size_t kN = 300, kCarry = 100, kFinetune = 600;
  std::size_t wins = 0, equal_ft_wins = 0;
  Outcome o;
  const TrajMAE model(downstream_model());
  for (std::uint64_t s = 1; s <= 5; ++s) {
    DatasetConfig dc;
    dc.seed = mix64(kSeed + 300 + s);
    const Dataset ds = generate_dataset(dc);
    PretrainConfig pc;
    pc.order = {Strategy::Social, Strategy::Temporal, Strategy::SocialTemporal};
    pc.N = kN;
    pc.carry = kCarry;
    pc.seed = mix64(kSeed + 400 + s);
    const PretrainResult pre = run_pretrain(model, pc, ds.train, Target::Trajectory);
    const std::size_t P = build_schedule(pc.mode, pc.order, kN, kCarry).total_steps();
    const std::uint64_t ft_seed = mix64(kSeed + 500 + s);

    const FinetuneResult warm = run_finetune(model, init_finetune_params(model, ft_seed, &pre.checkpoint, nullptr),
                                             finetune_for(kFinetune, ft_seed), ds.train, ds.val);
    const FinetuneResult scratch = run_finetune(model, init_finetune_params(model, ft_seed, nullptr, nullptr),
                                                finetune_for(kFinetune + P, ft_seed), ds.train, ds.val);
    const FinetuneResult short_scratch = run_finetune(model, init_finetune_params(model, ft_seed, nullptr, nullptr),
                                                      finetune_for(kFinetune, ft_seed), ds.train, ds.val);
    const MetricParams mp;
    const double w = evaluate(model, warm.checkpoint.params, ds.test, mp).min_ade;
    const double sc = evaluate(model, scratch.checkpoint.params, ds.test, mp).min_ade;
    const double ss = evaluate(model, short_scratch.checkpoint.params, ds.test, mp).min_ade;
    wins += w < sc ? 1 : 0;
    equal_ft_wins += w < ss ? 1 : 0;
    o.notes.push_back("seed " + std::to_string(s) + ": test minADE pretrained(" + std::to_string(P) + "+" +
                      std::to_string(kFinetune) + ") " + fmt("%.4f", w) + " vs scratch(" +
                      std::to_string(P + kFinetune) + ") " + fmt("%.4f", sc) + "; scratch(" +
                      std::to_string(kFinetune) + ") " + fmt("%.4f", ss));
  }
  const double elapsed = seconds_since(t0);
  o.pass = wins >= 4 && elapsed < 2700.0;
  o.detail = "S>T>ST continual pre-training vs scratch at equal total optimizer steps: " + std::to_string(wins) +
             "/5 paired seeds won, " + fmt("%.0f", elapsed) + "s of 2700s";
  o.notes.push_back("with equal fine-tuning steps only (not the criterion): " + std::to_string(equal_ft_wins) +
                    "/5 won");
  return o;
}

// ---- 9: checkpoint integrity -----------------------------------------------

Outcome checkpoint_integrity() {
  Outcome o;
  ModelConfig mc;
  mc.d_model = 8;
  mc.heads = 2;
  mc.modes = 2;
  mc.t_obs = 5;
  mc.t_fut = 4;
  mc.max_agents = 4;
  DatasetConfig dc;
  dc.train = 32;
  dc.val = 4;
  dc.test = 4;
  dc.seed = kSeed;
  dc.sim.agents = 4;
  dc.sim.t_obs = 5;
  dc.sim.t_fut = 4;
  const Dataset ds = generate_dataset(dc);
  const TrajMAE model(mc);
  PretrainConfig pc;
  pc.N = 40;
  pc.carry = 10;
  pc.batch_size = 4;
  pc.seed = kSeed;

  const fs::path dir = fs::temp_directory_path() / "trajmae_acceptance_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const PretrainResult full = run_pretrain(model, pc, ds.train, Target::Trajectory);
  save_checkpoint(dir / "a.tmae", full.checkpoint);
  save_checkpoint(dir / "b.tmae", load_checkpoint(dir / "a.tmae", mc));
  const bool roundtrip = slurp(dir / "a.tmae") == slurp(dir / "b.tmae");

  // Interrupt in the middle of stage 2, persist, reload and resume.
  PretrainHooks stop;
  const StagePlan plan = build_schedule(pc.mode, pc.order, pc.N, pc.carry);
  stop.stop_after = plan.stage_steps(0) + plan.stage_steps(1) / 2;
  const PretrainResult first = run_pretrain(model, pc, ds.train, Target::Trajectory, stop);
  save_checkpoint(dir / "mid.tmae", first.checkpoint);
  const Checkpoint mid = load_checkpoint(dir / "mid.tmae", mc);
  const PretrainResult rest = run_pretrain(model, pc, ds.train, Target::Trajectory, {}, &mid);
  const bool resumed = rest.finished && rest.checkpoint.params == full.checkpoint.params;
  save_checkpoint(dir / "c.tmae", rest.checkpoint);
  const bool resumed_bytes = slurp(dir / "c.tmae") == slurp(dir / "a.tmae");

  FinetuneConfig fc = finetune_for(6, kSeed);
  fc.batch_size = 4;
  const FinetuneResult ft =
      run_finetune(model, init_finetune_params(model, kSeed, &full.checkpoint, nullptr), fc, ds.train, ds.val);
  save_checkpoint(dir / "f1.tmae", ft.checkpoint);
  save_checkpoint(dir / "f2.tmae", load_checkpoint(dir / "f1.tmae", mc));
  const bool ft_roundtrip = slurp(dir / "f1.tmae") == slurp(dir / "f2.tmae");
  fs::remove_all(dir);

  o.pass = roundtrip && resumed && resumed_bytes && ft_roundtrip;
  o.detail = std::string("save-load-save ") + (roundtrip && ft_roundtrip ? "byte-identical" : "DIFFERS") +
             "; resume at step " + std::to_string(*stop.stop_after) + " of " + std::to_string(plan.total_steps()) +
             (resumed ? " matches" : " DIFFERS from") + " the uninterrupted run" +
             (resumed_bytes ? " (files identical)" : " (files differ)");
  return o;
}

// ---- 10: CLI determinism ----------------------------------------------------

int sh(const std::string& cmd) {
  const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

Outcome cli_determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "trajmae_acceptance_cli";
  const fs::path out = root / "run";
  fs::remove_all(root);
  fs::create_directories(root);
  const json cfg{{"data", {{"train", 40}, {"val", 8}, {"test", 8}, {"agents", 4}, {"t_obs", 5}, {"t_fut", 4}}},
                 {"model",
                  {{"t_obs", 5},
                   {"t_fut", 4},
                   {"max_agents", 4},
                   {"d_model", 8},
                   {"heads", 2},
                   {"modes", 2},
                   {"fore_layers", 1}}},
                 {"pretrain", {{"steps", 12}, {"carry", 3}, {"batch_size", 4}}},
                 {"finetune", {{"steps", 6}, {"batch_size", 4}, {"eval_every", 3}}},
                 {"output_dir", out.string()}};
  std::ofstream(root / "c.json") << cfg.dump(2);
  const std::string bin = std::string(TRAJMAE_CLI) + " -c " + (root / "c.json").string();
  const std::string pre = (out / "pretrain").string();
  struct Cmd {
    std::string name, args;
    int expect;
  };
  const std::vector<Cmd> cmds{
      {"synth", "synth", 0},
      {"pretrain traj", "pretrain --target traj", 0},
      {"pretrain map", "pretrain --target map --mode joint", 0},
      {"finetune", "finetune --traj-ckpt " + pre + "/traj/stage3.tmae --map-ckpt " + pre + "/map/stage1.tmae", 0},
      {"eval", "eval --ckpt " + (out / "finetune" / "model.tmae").string(), 0},
      {"ablate", "ablate --axis order", 0},
      {"verify", "verify", -1},
  };
  std::vector<std::map<std::string, std::string>> runs;
  std::vector<std::string> problems;
  for (const char* threads : {"1", "3"}) {
    fs::remove_all(out);
    std::map<std::string, std::string> files;
    for (const Cmd& c : cmds) {
      const int rc = sh("TRAJMAE_THREADS=" + std::string(threads) + " " + bin + " " + c.args);
      if (c.expect >= 0 && rc != c.expect) problems.push_back(c.name + " exited " + std::to_string(rc));
      // Snapshot after every command so overwritten files are compared too.
      for (auto& [k, v] : snapshot(out)) files[c.name + ": " + k] = std::move(v);
    }
    runs.push_back(std::move(files));
  }
  std::size_t differing = 0;
  for (const auto& [k, v] : runs[0]) {
    auto it = runs[1].find(k);
    if (it == runs[1].end() || it->second != v) {
      ++differing;
      o.notes.push_back("differs: " + k);
    }
  }
  differing += runs[1].size() > runs[0].size() ? runs[1].size() - runs[0].size() : 0;
  for (const auto& p : problems) o.notes.push_back(p);
  fs::remove_all(root);
  o.pass = differing == 0 && problems.empty() && !runs[0].empty();
  o.detail = std::to_string(cmds.size()) + " commands rerun, " + std::to_string(runs[0].size()) +
             " output snapshots compared, " + std::to_string(differing) + " differ";
  return o;
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {"masking exactness", masking_exactness},
      {"encoder blindness", encoder_blindness},
      {"gradient fidelity", gradient_fidelity},
      {"masked-only loss", masked_only_loss},
      {"schedule reproduction", schedule_reproduction},
      {"metric oracle equivalence", metric_oracle},
      {"pre-training learns", pretraining_learns},
      {"pre-training helps downstream", pretraining_helps},
      {"checkpoint integrity", checkpoint_integrity},
      {"CLI determinism", cli_determinism},
  };
  std::vector<std::size_t> chosen;
  if (argc == 3 && std::string(argv[1]) == "--criterion") {
    const int n = std::atoi(argv[2]);
    if (n < 1 || n > static_cast<int>(all.size())) {
      std::fprintf(stderr, "criterion must be 1-%zu\n", all.size());
      return 2;
    }
    chosen.push_back(static_cast<std::size_t>(n - 1));
  } else if (argc == 1) {
    for (std::size_t i = 0; i < all.size(); ++i) chosen.push_back(i);
  } else {
    std::fprintf(stderr, "usage: %s [--criterion N]\n", argv[0]);
    return 2;
  }
  bool ok = true;
  for (std::size_t i : chosen) {
    Outcome o;
    try {
      o = all[i].run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    ok = ok && o.pass;
    std::printf("criterion %2zu  %s  %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL", all[i].name, o.detail.c_str());
    for (const auto& n : o.notes) std::printf("      %s\n", n.c_str());
    std::fflush(stdout);
  }
  return ok ? 0 : 1;
}
