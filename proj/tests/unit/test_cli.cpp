#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include "pemvc/errors.hpp"
#include "pemvc/experiment.hpp"
#include "support.hpp"

using namespace pemvc;
using namespace pemvc::cli;
namespace fs = std::filesystem;

namespace {

Json tiny_experiment(const fs::path& out) {
  auto j = Json::parse(R"({
    "name": "tiny",
    "seed": 3,
    "protocol": {"levels": [0.5, 1.5, 2.5], "hold_s": 20, "steady_window_s": 10},
    "schedule": {"count": 6, "first_gap": 100},
    "runs": [
      {"name": "a", "profile": {"kind": "load_unload", "hold_s": 1}, "degradation": {"k_r": 2e-4, "k_j": 1e-3}},
      {"name": "b", "profile": {"kind": "on_off", "v_low": 0, "hold_s": 1}}
    ],
    "data": {"windows_per_pair": 1, "windows_per_segment": 1},
    "model": {"d_model": 8, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "d_ff": 16},
    "train": {"epochs": 1, "lr": 1e-3, "batch_size": 4},
    "variants": ["patch"]
  })");
  j["output"] = out.string();
  return j;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PEMVC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("experiment parsing") {
  const auto s = parse_experiment(tiny_experiment("x"));
  REQUIRE(s.runs.size() == 2);
  CHECK(s.runs[0].checkpoints == std::vector<std::uint64_t>{100, 200, 300, 400, 500, 600});
  CHECK(s.runs[1].protocol.levels == s.runs[0].protocol.levels);
  CHECK(s.runs[1].profile.kind == cellsim::ProfileKind::on_off);
  CHECK(s.runs[0].seed != s.runs[1].seed);

  const auto o = parse_experiment(tiny_experiment("x"), {"train.epochs=5", "model.d_model=16", "name=other"});
  CHECK(o.train.epochs == 5);
  CHECK(o.model.d_model == 16);
  CHECK(o.name == "other");

  auto extra = tiny_experiment("x");
  extra["bogus"] = 1;
  CHECK_THROWS_AS(parse_experiment(extra), ConfigError);
  CHECK_THROWS_AS(parse_experiment(tiny_experiment("x"), {"train.epoch=5"}), ConfigError);
  CHECK_THROWS_AS(parse_experiment(tiny_experiment("x"), {"noequals"}), ConfigError);
  CHECK_THROWS_AS(parse_experiment(tiny_experiment("x"), {"variants=[\"big\"]"}), ConfigError);

  const auto round = parse_experiment(to_json(s));
  CHECK(round.runs[1].seed == s.runs[1].seed);
  CHECK(round.runs[0].checkpoints == s.runs[0].checkpoints);
}

TEST_CASE("variants") {
  model::ModelConfig base;
  base.init_seed = 5;
  const auto v = variant_config(base, "vanilla");
  CHECK(v.baseline);
  CHECK(v.init_seed != base.init_seed);
  CHECK_FALSE(variant_config(base, "patch").baseline);
  CHECK_THROWS_AS(variant_config(base, "large"), ConfigError);
}

TEST_CASE("stages run end to end") {
  const auto root = testsupport::temp_dir("stages");
  const auto spec = parse_experiment(tiny_experiment(root / "out"));
  stage_simulate(spec, 0, root / "run");
  stage_simulate(spec, 0, root / "run_again");
  CHECK(testsupport::same_tree(root / "run", root / "run_again"));

  stage_prepare(root / "run", root / "data");
  const auto t = stage_train(root / "data", "patch", root / "patch", nullptr);
  for (const char* f : {"best.json", "last.json", "history.csv", "timing.csv"}) CHECK(fs::exists(root / "patch" / f));

  const auto rep = stage_eval(root / "data", t.best_ckpt, root / "report");
  CHECK(fs::exists(root / "report" / "eval.json"));
  CHECK(fs::exists(root / "report" / "eval.md"));
  CHECK(rep.at("val").at("op_pol").at("physical").get<double>() >= 0);
  CHECK(rep.at("val").contains("pol_curve"));

  const auto pp = stage_predict_pol(root / "run", t.best_ckpt, 3, root / "pp");
  for (const char* f : {"curves.csv", "curves.svg", "prediction.csv", "summary.json"}) CHECK(fs::exists(root / "pp" / f));
  CHECK_THROWS_AS(stage_predict_pol(root / "run", t.best_ckpt, 0, root / "pp"), DataError);

  // A checkpoint trained under a different architecture is refused.
  const auto other = stage_train(root / "data", "patch", root / "wide", nullptr, {"model.d_model=16"});
  CHECK_THROWS_AS(stage_eval(root / "data", other.best_ckpt, root / "report2"), DataError);
}

TEST_CASE("command-line exit codes") {
  const auto root = testsupport::temp_dir("exit");
  {
    std::ofstream(root / "good.json") << tiny_experiment(root / "out").dump();
    auto bad = tiny_experiment(root / "out");
    bad["model"]["depth"] = 2;
    std::ofstream(root / "bad.json") << bad.dump();
    std::ofstream(root / "broken.json") << "{ not json";
  }
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("simulate --config " + (root / "bad.json").string() + " --out " + (root / "r").string()) == 2);
  CHECK(run_cli("simulate --config " + (root / "good.json").string() + " --out " + (root / "r").string() +
                " --run nope") == 2);
  CHECK(run_cli("simulate --config " + (root / "broken.json").string() + " --out " + (root / "r").string()) == 2);
  CHECK(run_cli("simulate --config " + (root / "good.json").string() + " --out " + (root / "r").string() +
                " --run b") == 0);
  CHECK(fs::exists(root / "r" / "manifest.json"));
  CHECK(run_cli("prepare --run " + (root / "r").string() + " --out " + (root / "d").string()) == 0);
  CHECK(run_cli("train --data " + (root / "d").string() + " --out " + (root / "m").string() +
                " --set train.epochs=1") == 0);
  CHECK(run_cli("train --data " + (root / "d").string() + " --out " + (root / "w").string() +
                " --set model.d_model=16") == 0);
  CHECK(run_cli("eval --data " + (root / "d").string() + " --ckpt " + (root / "m" / "best.json").string() +
                " --report " + (root / "e").string()) == 0);
  CHECK(run_cli("eval --data " + (root / "d").string() + " --ckpt " + (root / "w" / "best.json").string() +
                " --report " + (root / "e2").string()) == 3);
  CHECK(run_cli("train --data " + (root / "d").string() + " --out " + (root / "n").string() +
                " --set train.lr=1e30") == 4);
}

}  // TEST_SUITE
