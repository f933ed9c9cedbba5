#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "pemvc/datapipe.hpp"
#include "pemvc/errors.hpp"
#include "support.hpp"

using namespace pemvc;
using namespace pemvc::datapipe;

namespace {

cellsim::OperationalRecord record(std::vector<double> j, std::vector<double> v) {
  cellsim::OperationalRecord r;
  r.series.current = std::move(j);
  r.series.voltage = std::move(v);
  return r;
}

const cellsim::RunDataset& small_run() {
  static const auto run = cellsim::generate_run(testsupport::small_run_config(5, 6));
  return run;
}

}  // namespace

TEST_SUITE("datapipe") {

TEST_CASE("every third checkpoint is held out") {
  const std::vector<std::uint64_t> cps{100, 200, 300, 400, 500, 600, 700};
  const auto plan = split_checkpoints(cps);
  CHECK(plan.val == std::vector<std::uint64_t>{300, 600});
  CHECK(plan.train == std::vector<std::uint64_t>{100, 200, 400, 500, 700});
  CHECK(plan.is_val(600));
  CHECK_FALSE(plan.is_val(700));
  CHECK_THROWS_AS(split_checkpoints(std::vector<std::uint64_t>{}), ConfigError);
  CHECK_THROWS_AS(split_checkpoints(std::vector<std::uint64_t>{5, 5}), ConfigError);
}

TEST_CASE("norm stats of a two-point series") {
  const auto r = record({0, 2}, {0, 2});
  const cellsim::OperationalRecord* segs[] = {&r};
  const auto s = fit_norm_stats(segs);
  CHECK(s.mean[0] == 1.0);
  CHECK(s.std[0] == 1.0);
  CHECK(s.mean[1] == 1.0);
  CHECK(s.std[1] == 1.0);

  const auto flat = record({3, 3, 3}, {1, 1, 1});
  const cellsim::OperationalRecord* one[] = {&flat};
  CHECK(fit_norm_stats(one).std[0] == 1e-6);
  CHECK_THROWS_AS(fit_norm_stats({}), DataError);
}

TEST_CASE("norm stats match a streaming oracle") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(1.5, 0.4);
  std::vector<cellsim::OperationalRecord> recs;
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> j(1000 + 37 * k), v(1000 + 37 * k);
    for (auto& x : j) x = n(rng);
    for (auto& x : v) x = 2 * n(rng) - 1;
    recs.push_back(record(j, v));
  }
  // Welford over the concatenation.
  double mean[2] = {0, 0}, m2[2] = {0, 0};
  std::size_t count = 0;
  for (const auto& r : recs)
    for (std::size_t t = 0; t < r.series.size(); ++t) {
      ++count;
      const double x[2] = {r.series.current[t], r.series.voltage[t]};
      for (int c = 0; c < 2; ++c) {
        const double d = x[c] - mean[c];
        mean[c] += d / static_cast<double>(count);
        m2[c] += d * (x[c] - mean[c]);
      }
    }
  std::vector<const cellsim::OperationalRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  const auto s = fit_norm_stats(ptrs);
  for (int c = 0; c < 2; ++c) {
    CHECK(s.mean[c] == doctest::Approx(mean[c]).epsilon(1e-12));
    CHECK(s.std[c] == doctest::Approx(std::sqrt(m2[c] / static_cast<double>(count))).epsilon(1e-10));
  }
}

TEST_CASE("normalize round trip") {
  NormStats s;
  s.mean = {1.2, 1.8};
  s.std = {0.7, 0.05};
  std::vector<double> seq{0.0, 1.5, 2.4, 2.1, 5.0, 1.45};
  const auto orig = seq;
  normalize(seq, s);
  CHECK(seq[0] == doctest::Approx(-1.2 / 0.7));
  CHECK(seq[1] == doctest::Approx(-0.3 / 0.05));
  denormalize(seq, s);
  for (std::size_t i = 0; i < seq.size(); ++i) CHECK(seq[i] == doctest::Approx(orig[i]).epsilon(1e-12));

  const auto back = norm_stats_from_json(to_json(s));
  CHECK(back.mean == s.mean);
  CHECK(back.std == s.std);
}

TEST_CASE("decoder tiling") {
  const auto tiles = tile_windows(12000);
  REQUIRE(tiles.size() == 12);
  CHECK(tiles[11].first == 11 * 1024);
  CHECK(tiles[11].second == 736);
  for (std::size_t i = 0; i < 11; ++i) CHECK(tiles[i].second == 1024);
  CHECK(tile_windows(2048).size() == 2);
  CHECK(tile_windows(1).front().second == 1);
}

TEST_CASE("window offsets") {
  const auto a = window_offsets(5000, 4, true, 11);
  CHECK(a == window_offsets(5000, 4, true, 11));
  for (auto o : a) CHECK(o + kWindow <= 5000);
  const auto even = window_offsets(5000, 3, false, 0);
  CHECK(even.back() == 5000 - kWindow);
  CHECK(std::is_sorted(even.begin(), even.end()));
  CHECK_THROWS_AS(window_offsets(1000, 1, true, 0), DataError);
}

TEST_CASE("paired samples respect the padding contract") {
  const auto& run = small_run();
  const auto data = prepare(run, PrepareOptions{2, 2, 4});
  const std::size_t pol_len = run.config.protocol.total_samples();  // 600
  const auto tiles = tile_windows(pol_len);
  CHECK(data.op_pol.train.size() == 4 * 2 * tiles.size());
  CHECK(data.op_pol.val.size() == 2 * 2 * tiles.size());
  CHECK(data.op_op.train.size() == 4 * 2);
  CHECK(data.op_op.val.size() == 2 * 2);

  for (const auto& s : data.op_pol.train) {
    REQUIRE(s.x_enc.size() == kWindow * kChannels);
    REQUIRE(s.x_dec.size() == kWindow * kChannels);
    REQUIRE(s.y.size() == kWindow);
    CHECK(s.valid_len == pol_len);
    for (std::size_t t = 0; t < kWindow; ++t) {
      CHECK(s.x_dec[t * 2 + 1] == 0.0f);  // voltage is never a decoder input
      if (t >= s.valid_len) {
        CHECK(s.y[t] == 0.0f);
        CHECK(s.x_dec[t * 2] == 0.0f);
      }
    }
  }
  for (const auto& s : data.op_op.train) {
    CHECK(s.valid_len == kWindow);
    for (std::size_t t = 0; t < kWindow; ++t) CHECK(s.x_dec[t * 2] == 0.0f);
  }
  // The decoder target is the normalized measured voltage.
  const auto& s0 = data.op_pol.train.front();
  const std::size_t k = std::find(run.config.checkpoints.begin(), run.config.checkpoints.end(), s0.cycle_index) -
                        run.config.checkpoints.begin();
  const auto& pol = run.pol_tests[k + 1].series;
  for (std::size_t t = 0; t < 10; ++t)
    CHECK(s0.y[t] == doctest::Approx(data.stats.normalize(pol.voltage[t], Channel::voltage)).epsilon(1e-5));
}

TEST_CASE("validation checkpoints never leak into training") {
  const auto& run = small_run();
  const auto data = prepare(run, PrepareOptions{2, 2, 4});
  for (const auto* set : {&data.op_pol, &data.op_op}) {
    for (const auto& s : set->train) CHECK_FALSE(data.plan.is_val(s.cycle_index));
    for (const auto& s : set->val) CHECK(data.plan.is_val(s.cycle_index));
  }

  // Norm stats ignore validation segments entirely.
  auto altered = run;
  for (std::size_t i = 0; i < altered.segments.size(); ++i)
    if (data.plan.is_val(altered.config.checkpoints[i]))
      for (auto& v : altered.segments[i].series.voltage) v += 5.0;
  const auto again = prepare(altered, PrepareOptions{2, 2, 4});
  CHECK(again.stats.mean == data.stats.mean);
  CHECK(again.stats.std == data.stats.std);
}

TEST_CASE("shards round trip") {
  const auto& run = small_run();
  const auto data = prepare(run, PrepareOptions{1, 1, 9});
  const auto dir = testsupport::temp_dir("shards");
  write_prepared(data, dir);
  const auto back = read_prepared(dir);
  CHECK(back.stats.mean == data.stats.mean);
  CHECK(back.plan.val == data.plan.val);
  REQUIRE(back.op_pol.train.size() == data.op_pol.train.size());
  REQUIRE(back.op_op.val.size() == data.op_op.val.size());
  const auto& a = data.op_pol.train.back();
  const auto& b = back.op_pol.train.back();
  CHECK(a.x_enc == b.x_enc);
  CHECK(a.x_dec == b.x_dec);
  CHECK(a.y == b.y);
  CHECK(a.valid_len == b.valid_len);
  CHECK(a.cycle_index == b.cycle_index);
  CHECK(a.window_offset == b.window_offset);

  ShardHeader h;
  const auto direct = read_shard(dir / "val_op_op.bin", &h);
  CHECK(h.task == Task::op_op);
  CHECK(h.validation);
  CHECK(direct.size() == data.op_op.val.size());

  const auto dir2 = testsupport::temp_dir("shards2");
  write_prepared(prepare(run, PrepareOptions{1, 1, 9}), dir2);
  CHECK(testsupport::same_tree(dir, dir2));

  std::ofstream(dir / "train_op_pol.bin", std::ios::binary) << "junk";
  CHECK_THROWS_AS(read_prepared(dir), DataError);
}

}  // TEST_SUITE
