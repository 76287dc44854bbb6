#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "trajmae/checkpoint.hpp"
#include "trajmae/training.hpp"

using namespace trajmae;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 1;
  c.fore_layers = 1;
  c.modes = 2;
  c.t_obs = 4;
  c.t_fut = 3;
  c.max_agents = 3;
  c.ffn_mult = 2;
  return c;
}

const Dataset& tiny_data() {
  static const Dataset ds = [] {
    DatasetConfig dc;
    dc.train = 16;
    dc.val = 4;
    dc.test = 4;
    dc.seed = 21;
    dc.sim.agents = 3;
    dc.sim.t_obs = 4;
    dc.sim.t_fut = 3;
    return generate_dataset(dc);
  }();
  return ds;
}

PretrainConfig tiny_pretrain() {
  PretrainConfig pc;
  pc.N = 12;
  pc.carry = 3;
  pc.batch_size = 4;
  pc.seed = 5;
  return pc;
}

double huber_of(std::vector<double> pred, std::vector<double> target) {
  Graph g;
  const std::size_t n = pred.size() / 2;
  return masked_huber_loss(g.constant(Tensor(Shape{n, 2}, std::move(pred))),
                           g.constant(Tensor(Shape{n, 2}, std::move(target))), 1.0)
      .value()
      .item();
}

std::map<std::string, std::size_t> strategy_totals(const std::vector<LossRecord>& curve) {
  std::map<std::string, std::size_t> out;
  for (const auto& r : curve) {
    std::stringstream ss(r.strategy);
    std::string s;
    while (std::getline(ss, s, '+')) ++out[s];
  }
  return out;
}

}  // namespace

TEST_CASE("huber reconstruction loss closed forms") {
  CHECK(huber_of({1.0, 2.0, -3.0, 0.5}, {1.0, 2.0, -3.0, 0.5}) == 0.0);
  CHECK(huber_of({0.6, 0.8}, {0.0, 0.0}) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(huber_of({3.0, 4.0}, {0.0, 0.0}) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("lattice loss ignores visible rows") {
  Graph g;
  const Var pred = g.variable(Tensor(Shape{3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  const Var tgt = g.variable(Tensor(Shape{3, 2}, std::vector<double>{0, 0, 0, 0, 0, 0}));
  const Var loss = lattice_huber_loss(pred, tgt, {0, 1, 0});
  g.backward(loss);
  const auto gp = g.grad(pred), gt = g.grad(tgt);
  for (std::size_t i : {0u, 1u, 4u, 5u}) {
    CHECK(gp[i] == 0.0);
    CHECK(gt[i] == 0.0);
  }
  CHECK(loss.value().item() == doctest::Approx((2.5 + 3.5) / 2));
}

TEST_CASE("continual schedule quotas") {
  using S = Strategy;
  const StagePlan p = build_schedule(ScheduleMode::ContinualPretrain, {S::Social, S::Temporal, S::SocialTemporal},
                                     120000, 30000);
  REQUIRE(p.stages() == 3);
  // quota is [stage][strategy]; read per strategy across stages.
  CHECK(p.quota[0] == std::vector<std::size_t>{60000, 0, 0});
  CHECK(p.quota[1] == std::vector<std::size_t>{30000, 90000, 0});
  CHECK(p.quota[2] == std::vector<std::size_t>{30000, 30000, 120000});

  const StagePlan two = build_schedule(ScheduleMode::ContinualPretrain, {S::Social, S::Temporal}, 200, 50);
  CHECK(two.quota[0] == std::vector<std::size_t>{150, 0});
  CHECK(two.quota[1] == std::vector<std::size_t>{50, 200});

  const StagePlan one = build_schedule(ScheduleMode::ContinualPretrain, {S::Point}, 77, 10);
  REQUIRE(one.stages() == 1);
  CHECK(one.quota[0] == std::vector<std::size_t>{77});

  CHECK_THROWS(build_schedule(ScheduleMode::ContinualPretrain, {S::Social, S::Temporal, S::SocialTemporal}, 100, 50));
}

TEST_CASE("stage sequences realize the quota multiset") {
  using S = Strategy;
  StagePlan p;
  p.order = {S::Social, S::Temporal};
  p.quota = {{4, 0}, {2, 3}};
  RngStream a(4), b(4);
  const auto seq = materialize_stage_sequence(p, 1, a);
  CHECK(seq == materialize_stage_sequence(p, 1, b));
  CHECK(seq.size() == 5);
  CHECK(std::count(seq.begin(), seq.end(), S::Social) == 2);
  CHECK(std::count(seq.begin(), seq.end(), S::Temporal) == 3);
  CHECK(materialize_stage_sequence(p, 0, a) == std::vector<S>(4, S::Social));
}

TEST_CASE("step-decay learning rate") {
  const LrSchedule s{3e-5, 6000, 30000, 2.0};
  CHECK(lr_at(0, s) == 3e-5);
  CHECK(lr_at(12000, s) == doctest::Approx(7.5e-6).epsilon(1e-15));
  CHECK(lr_at(30000, s) == doctest::Approx(3e-5 / 32).epsilon(1e-15));
  CHECK(lr_at(90000, s) == lr_at(30000, s));
}

TEST_CASE("pre-training is deterministic and hands parameters across stages") {
  const TrajMAE model(tiny_model());
  const PretrainConfig pc = tiny_pretrain();
  std::vector<Checkpoint> stages;
  PretrainHooks hooks;
  hooks.on_stage_end = [&](std::size_t, const Checkpoint& ck) { stages.push_back(ck); };
  const PretrainResult a = run_pretrain(model, pc, tiny_data().train, Target::Trajectory, hooks);
  const PretrainResult b = run_pretrain(model, pc, tiny_data().train, Target::Trajectory);
  CHECK(curve_csv(a.curve) == curve_csv(b.curve));
  CHECK(a.checkpoint.params == b.checkpoint.params);
  REQUIRE(stages.size() == 3);
  CHECK(stages.back().params == a.checkpoint.params);

  // Resuming from the end of stage 1 reproduces the uninterrupted run.
  PretrainHooks stop;
  stop.stop_after = build_schedule(pc.mode, pc.order, pc.N, pc.carry).stage_steps(0);
  const PretrainResult first = run_pretrain(model, pc, tiny_data().train, Target::Trajectory, stop);
  CHECK_FALSE(first.finished);
  CHECK(first.checkpoint.params == stages[0].params);
  const PretrainResult rest = run_pretrain(model, pc, tiny_data().train, Target::Trajectory, {}, &first.checkpoint);
  CHECK(rest.finished);
  CHECK(rest.checkpoint.params == a.checkpoint.params);
}

TEST_CASE("sequential and joint runs train every strategy equally") {
  const TrajMAE model(tiny_model());
  PretrainConfig pc = tiny_pretrain();
  pc.order = {Strategy::Point, Strategy::Patch, Strategy::Block};
  pc.mode = ScheduleMode::Sequential;
  const auto seq = strategy_totals(run_pretrain(model, pc, tiny_data().train, Target::Map).curve);
  pc.mode = ScheduleMode::Joint;
  const auto joint = strategy_totals(run_pretrain(model, pc, tiny_data().train, Target::Map).curve);
  CHECK(seq == joint);
  CHECK(seq.size() == 3);
}

TEST_CASE("checkpoints round-trip byte for byte") {
  const TrajMAE model(tiny_model());
  const PretrainResult r = run_pretrain(model, tiny_pretrain(), tiny_data().train, Target::Trajectory);
  const auto dir = std::filesystem::temp_directory_path() / "trajmae_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "a.tmae", r.checkpoint);
  const Checkpoint back = load_checkpoint(dir / "a.tmae", tiny_model());
  save_checkpoint(dir / "b.tmae", back);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir / "a.tmae") == slurp(dir / "b.tmae"));
  CHECK(back.params == r.checkpoint.params);
  CHECK(back.counters == r.checkpoint.counters);

  ModelConfig other = tiny_model();
  other.d_model = 16;
  CHECK_THROWS_AS(load_checkpoint(dir / "a.tmae", other), CheckpointError);
  const std::string bytes = slurp(dir / "a.tmae");
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() / 2)), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("fine-tuning loads encoder weights and is deterministic") {
  const TrajMAE model(tiny_model());
  const PretrainResult pre = run_pretrain(model, tiny_pretrain(), tiny_data().train, Target::Trajectory);
  const ParamStore init = init_finetune_params(model, 3, &pre.checkpoint, nullptr);
  for (const auto& [name, e] : init.entries()) {
    if (name.rfind("traj_enc.", 0) == 0) CHECK(e.value.storage() == pre.checkpoint.params.value(name).storage());
  }
  FinetuneConfig fc;
  fc.steps = 6;
  fc.batch_size = 4;
  fc.eval_every = 3;
  fc.seed = 3;
  const FinetuneResult a = run_finetune(model, init, fc, tiny_data().train, tiny_data().val);
  const FinetuneResult b = run_finetune(model, init, fc, tiny_data().train, tiny_data().val);
  CHECK(a.checkpoint.params == b.checkpoint.params);
  CHECK(a.validations.size() == 2);
  const auto ra = report_to_json(evaluate(model, a.checkpoint.params, tiny_data().test, fc.metrics)).dump();
  const auto rb = report_to_json(evaluate(model, b.checkpoint.params, tiny_data().test, fc.metrics)).dump();
  CHECK(ra == rb);

  ModelConfig wrong = tiny_model();
  wrong.d_model = 16;
  Checkpoint bad = pre.checkpoint;
  bad.params = TrajMAE(wrong).make_params(1);
  CHECK_THROWS_AS(init_finetune_params(model, 3, &bad, nullptr), CheckpointError);
}
