#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "trajmae/scene.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "trajmae_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

json tiny_config(const fs::path& out) {
  return json{{"data", {{"train", 24}, {"val", 6}, {"test", 6}, {"agents", 3}, {"t_obs", 4}, {"t_fut", 3}}},
              {"model",
               {{"t_obs", 4},
                {"t_fut", 3},
                {"max_agents", 3},
                {"d_model", 8},
                {"heads", 2},
                {"enc_layers", 2},
                {"dec_layers", 1},
                {"fore_layers", 1},
                {"modes", 2},
                {"ffn_mult", 2}}},
              {"pretrain", {{"steps", 9}, {"carry", 2}, {"batch_size", 4}}},
              {"finetune", {{"steps", 4}, {"batch_size", 4}, {"eval_every", 2}}},
              {"output_dir", out.string()}};
}

fs::path write_config(const std::string& name, const json& j) {
  const fs::path p = workdir() / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const fs::path log = workdir() / "last.log";
  const std::string cmd = std::string(TRAJMAE_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

std::size_t csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n == 0 ? 0 : n - 1;
}

std::map<std::string, std::size_t> strategy_totals(const fs::path& curve) {
  std::ifstream in(curve);
  std::string line;
  std::getline(in, line);
  std::map<std::string, std::size_t> out;
  while (std::getline(in, line)) {
    std::stringstream row(line);
    std::string cell;
    for (int i = 0; i < 3; ++i) std::getline(row, cell, ',');
    std::stringstream parts(cell);
    std::string s;
    while (std::getline(parts, s, '+')) ++out[s];
  }
  return out;
}

const fs::path& main_run() {
  static const fs::path out = [] {
    const fs::path o = workdir() / "main";
    const fs::path cfg = write_config("main.json", tiny_config(o));
    REQUIRE(run("-c " + cfg.string() + " synth").code == 0);
    return o;
  }();
  return out;
}

std::string main_cfg() { return "-c " + (workdir() / "main.json").string(); }

}  // namespace

TEST_CASE("synth writes the three splits and reruns identically") {
  const fs::path out = main_run();
  for (const char* split : {"train", "val", "test"}) CHECK(fs::exists(out / "data" / (std::string(split) + ".jsonl")));
  const std::string before = slurp(out / "data" / "train.jsonl");
  CHECK(run(main_cfg() + " synth").code == 0);
  CHECK(slurp(out / "data" / "train.jsonl") == before);
  CHECK(json::parse(slurp(out / "config.resolved.json"))["data"]["train"] == 24);
}

TEST_CASE("malformed configs exit 2 naming the key") {
  json bad = tiny_config(workdir() / "bad");
  bad["model"]["dmodel"] = 4;
  const Run r = run("-c " + write_config("bad.json", bad).string() + " synth");
  CHECK(r.code == 2);
  CHECK(r.out.find("model.dmodel") != std::string::npos);

  json typed = tiny_config(workdir() / "bad");
  typed["finetune"]["steps"] = -3;
  const Run t = run("-c " + write_config("typed.json", typed).string() + " synth");
  CHECK(t.code == 2);
  CHECK(t.out.find("finetune.steps") != std::string::npos);

  CHECK(run("-c " + write_config("missing.json", tiny_config(workdir() / "empty")).string() + " finetune").code == 2);
  CHECK(run(main_cfg() + " pretrain --order S,X").code == 2);
  CHECK(run(main_cfg() + " ablate --axis colour").code == 2);
}

TEST_CASE("pretrain writes one checkpoint per stage") {
  const fs::path out = main_run();
  const Run r = run(main_cfg() + " pretrain --target traj --mode continual-pretrain --order S,T,ST --ratio 0.6");
  REQUIRE(r.code == 0);
  for (int k = 1; k <= 3; ++k) CHECK(fs::exists(out / "pretrain" / "traj" / ("stage" + std::to_string(k) + ".tmae")));
  const json sched = json::parse(slurp(out / "pretrain" / "traj" / "schedule.json"));
  CHECK(sched["plan"]["mode"] == "continual-pretrain");
  CHECK(sched["ratios"]["T"] == 0.6);
}

TEST_CASE("sequential and joint schedules spend the same steps per strategy") {
  const json base = tiny_config(workdir() / "seq");
  json joint = base;
  joint["output_dir"] = (workdir() / "joint").string();
  const fs::path seq_cfg = write_config("seq.json", base), joint_cfg = write_config("joint.json", joint);
  REQUIRE(run("-c " + seq_cfg.string() + " synth").code == 0);
  REQUIRE(run("-c " + joint_cfg.string() + " synth").code == 0);
  REQUIRE(run("-c " + seq_cfg.string() + " pretrain --target map --mode sequential").code == 0);
  REQUIRE(run("-c " + joint_cfg.string() + " pretrain --target map --mode joint").code == 0);
  const auto a = strategy_totals(workdir() / "seq" / "pretrain" / "map" / "curve.csv");
  const auto b = strategy_totals(workdir() / "joint" / "pretrain" / "map" / "curve.csv");
  CHECK(a == b);
  CHECK(a.at("Po") == 9);
}

TEST_CASE("finetune without checkpoints is the scratch baseline") {
  const fs::path out = main_run();
  REQUIRE(run(main_cfg() + " finetune").code == 0);
  const json m = json::parse(slurp(out / "finetune" / "metrics.json"));
  CHECK(m["init"]["traj_ckpt"].is_null());
  CHECK(m["split"] == "val");
  CHECK(csv_rows(out / "finetune" / "validation.csv") == 2);
  CHECK(fs::exists(out / "finetune" / "model.tmae"));
  REQUIRE(run(main_cfg() + " eval --ckpt " + (out / "finetune" / "model.tmae").string()).code == 0);
  CHECK(json::parse(slurp(out / "eval" / "metrics.json"))["report"]["scenes"] == 6);
}

TEST_CASE("a perfect oracle forecast file scores zero error") {
  const fs::path out = main_run();
  const trajmae::DatasetShard test = trajmae::read_shard(out / "data" / "test.jsonl", trajmae::Split::Test);
  const fs::path file = workdir() / "oracle.jsonl";
  {
    std::ofstream f(file);
    for (const trajmae::Scene& s : test.scenes) {
      json steps = json::array();
      for (std::size_t t = 0; t < s.t_fut; ++t) {
        json agents = json::array();
        for (std::size_t m = 0; m < s.agents; ++m) {
          const trajmae::Point2 p = s.pos(m, s.t_obs + t);
          agents.push_back({p.x, p.y});
        }
        steps.push_back(agents);
      }
      f << json{{"pred", json::array({steps, steps})}}.dump() << "\n";
    }
  }
  REQUIRE(run(main_cfg() + " eval --forecasts " + file.string()).code == 0);
  const json r = json::parse(slurp(out / "eval" / "metrics.json"))["report"];
  for (const char* k : {"minADE", "minFDE", "MR", "minJointADE", "minJointFDE", "minJointMR"}) {
    CHECK(r[k] == 0.0);
  }

  std::ofstream(workdir() / "short.jsonl") << "{\"pred\": []}\n";
  CHECK(run(main_cfg() + " eval --forecasts " + (workdir() / "short.jsonl").string()).code == 2);
}

TEST_CASE("a checkpoint from another model configuration exits 4") {
  const fs::path out = main_run();
  REQUIRE(run(main_cfg() + " pretrain --target traj").code == 0);
  json other = tiny_config(out);
  other["model"]["d_model"] = 16;
  const fs::path cfg = write_config("other.json", other);
  const Run r = run("-c " + cfg.string() + " finetune --traj-ckpt " +
                    (out / "pretrain" / "traj" / "stage3.tmae").string());
  CHECK(r.code == 4);
}

TEST_CASE("ablation grids have the expected rows") {
  const fs::path out = main_run();
  REQUIRE(run(main_cfg() + " ablate --axis ratio --target map").code == 0);
  CHECK(csv_rows(out / "ablate" / "ratio-map.csv") == 18);
  REQUIRE(run(main_cfg() + " ablate --axis schedule-mode").code == 0);
  const std::string csv = slurp(out / "ablate" / "schedule-mode-traj.csv");
  CHECK(csv_rows(out / "ablate" / "schedule-mode-traj.csv") == 3);
  for (const char* mode : {",continual-pretrain,", ",sequential,", ",joint,"}) CHECK(csv.find(mode) != std::string::npos);
}

TEST_CASE("verify reports the blindness property under an injected fault") {
  const std::string fast = " verify --suite masking --suite blindness --suite masked-loss --suite quota --suite metric-oracle";
  CHECK(run(main_cfg() + fast).code == 0);
  const Run r = run(main_cfg() + " verify --suite blindness --inject-fault");
  CHECK(r.code == 1);
  CHECK(r.out.find("encoder blindness") != std::string::npos);
  const json res = json::parse(slurp(main_run() / "verify" / "results.json"));
  CHECK(res["passed"] == false);
}
