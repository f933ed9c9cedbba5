#include <doctest.h>

#include <cmath>
#include <sstream>

#include "pemvc/errors.hpp"
#include "pemvc/training.hpp"
#include "support.hpp"

using namespace pemvc;
using namespace pemvc::training;

namespace {

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 16;
  c.patch = {1024, 64, 32};
  c.init_seed = 4;
  return c;
}

const datapipe::PreparedData& small_data() {
  static const auto data =
      datapipe::prepare(cellsim::generate_run(testsupport::small_run_config(5, 6)), {2, 1, 3});
  return data;
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = epochs;
  c.lr = 1e-3;
  c.seed = 12;
  return c;
}

std::vector<float> flat_params(const nn::Checkpoint& c) {
  std::vector<float> out;
  for (const auto& p : c.params) out.insert(out.end(), p.values.begin(), p.values.end());
  return out;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("config validation and parsing") {
  auto c = quick();
  c.mix_ratio = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = quick();
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(Json{{"epoch", 3}}, "train"), ConfigError);
  auto m = quick();
  m.mix_ratio = 0.25;
  const auto back = train_config_from_json(to_json(m), "train");
  REQUIRE(back.mix_ratio);
  CHECK(*back.mix_ratio == 0.25);
  CHECK_FALSE(train_config_from_json(to_json(quick()), "train").mix_ratio);
}

TEST_CASE("training is deterministic") {
  const auto a = train(tiny_model(), quick(), small_data());
  const auto b = train(tiny_model(), quick(), small_data());
  CHECK(flat_params(a.last) == flat_params(b.last));
  CHECK(flat_params(a.best) == flat_params(b.best));
  REQUIRE(a.history.epochs.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(a.history.epochs[e].train_loss == b.history.epochs[e].train_loss);
    CHECK(a.history.epochs[e].val_op_pol == b.history.epochs[e].val_op_pol);
  }
  const auto dir = testsupport::temp_dir("hist");
  write_history(dir / "a.csv", a.history);
  write_history(dir / "b.csv", b.history);
  std::ifstream fa(dir / "a.csv"), fb(dir / "b.csv");
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  CHECK(sa.str() == sb.str());
  CHECK(sa.str().rfind("epoch,steps,train_loss,train_op_pol,train_op_op,val_op_pol,val_op_op,lr,best\n", 0) == 0);
}

TEST_CASE("zero mix ratio is OP-POL-only training") {
  auto mixed = quick();
  mixed.mix_ratio = 0.0;
  const auto a = train(tiny_model(), mixed, small_data());
  auto pol_only = small_data();
  pol_only.op_op.train.clear();
  const auto b = train(tiny_model(), quick(), pol_only);
  CHECK(flat_params(a.last) == flat_params(b.last));
  CHECK(std::isnan(a.history.epochs.back().train_op_op));
}

TEST_CASE("mix ratio sets the OP-OP share of each epoch") {
  auto c = quick(1);
  c.mix_ratio = 0.5;
  c.batch_size = 1;
  const auto r = train(tiny_model(), c, small_data());
  // As many OP-OP steps as OP-POL steps.
  CHECK(r.history.epochs[0].steps == 2 * small_data().op_pol.train.size());
}

TEST_CASE("evaluation leaves parameters untouched") {
  auto m = model::Transformer<float>(tiny_model());
  std::vector<float> before;
  for (const auto& p : m.parameters()) before.insert(before.end(), p.data().begin(), p.data().end());
  m.set_training(true);
  evaluate(m, small_data().op_pol.val, small_data().op_op.val, small_data().stats);
  CHECK(m.training());
  std::vector<float> after;
  for (const auto& p : m.parameters()) {
    after.insert(after.end(), p.data().begin(), p.data().end());
    CHECK_FALSE(p.has_grad());
  }
  CHECK(before == after);
}

TEST_CASE("zero predictor scores the mean square of normalized targets") {
  auto m = model::Transformer<float>(tiny_model());
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    if (m.parameter_names()[i].rfind("dec.head", 0) == 0)
      for (auto& v : m.parameters()[i].mutable_data()) v = 0;
  const auto& d = small_data();
  double sq = 0;
  std::size_t n = 0;
  for (const auto& s : d.op_op.train)
    for (std::size_t t = 0; t < s.valid_len; ++t) sq += double(s.y[t]) * s.y[t], ++n;
  const auto r = evaluate(m, d.op_pol.train, d.op_op.train, d.stats);
  CHECK(r.at("op_op").normalized == doctest::Approx(sq / double(n)).epsilon(1e-5));
  CHECK(r.at("op_op").positions == n);
  // Training windows carry roughly unit variance in the current channel.
  CHECK(std::abs(r.at("op_op").normalized - 1.0) < 0.3);
  const double sd = d.stats.std[0];
  CHECK(r.at("op_op").physical == doctest::Approx(r.at("op_op").normalized * sd * sd));
}

TEST_CASE("checkpoint metadata") {
  const auto r = train(tiny_model(), quick(1), small_data());
  for (const char* key : {"model", "config_hash", "norm", "train", "epoch", "val_op_pol"})
    CHECK(r.best.meta.contains(key));
  CHECK(r.last.adam);
  auto m = load_model(r.best);
  CHECK(m.parameter_count() == model::Transformer<float>(tiny_model()).parameter_count());
  CHECK(checkpoint_norm_stats(r.best).mean == small_data().stats.mean);

  auto bad = r.best;
  bad.meta["config_hash"] = "0000000000000000";
  CHECK_THROWS_AS(load_model(bad), DataError);
}

TEST_CASE("empty inputs are data errors") {
  auto d = small_data();
  d.op_pol.train.clear();
  d.op_op.train.clear();
  CHECK_THROWS_AS(train(tiny_model(), quick(), d), DataError);
  auto m = model::Transformer<float>(tiny_model());
  CHECK_THROWS_AS(evaluate(m, {}, small_data().op_op.val, small_data().stats), DataError);
}

TEST_CASE("a small model overfits eight samples") {
  auto d = small_data();
  REQUIRE(d.op_pol.train.size() == 8);
  d.op_op.train.clear();
  d.op_pol.val = d.op_pol.train;
  d.op_op.val.clear();
  auto c = quick(500);
  c.batch_size = 8;
  c.eval_every = 100;
  auto mc = tiny_model();
  mc.d_model = 16;
  mc.d_ff = 32;
  const auto r = train(mc, c, d);
  const double first = r.history.epochs.front().train_loss;
  const double last = r.history.epochs.back().train_loss;
  CHECK(last < 0.05 * first);
}

}  // TEST_SUITE
