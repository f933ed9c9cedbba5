#include <doctest.h>

#include <cmath>
#include <sstream>

#include "pemvc/characterize.hpp"
#include "pemvc/errors.hpp"
#include "support.hpp"

using namespace pemvc;
using namespace pemvc::characterize;

namespace {

cellsim::PolProtocol three_levels() {
  cellsim::PolProtocol p;
  p.levels = {0.5, 1.5, 2.5};
  p.hold_s = 20;
  p.steady_window_s = 10;
  return p;
}

PolarizationCurve curve(std::vector<double> j, std::vector<double> v, std::uint64_t cycle = 0) {
  PolarizationCurve c;
  c.j = std::move(j);
  c.v = std::move(v);
  c.cycle_index = cycle;
  return c;
}

}  // namespace

TEST_SUITE("characterize") {

TEST_CASE("constant series aggregates to the constant") {
  const auto p = three_levels();
  const std::vector<double> flat(p.total_samples(), 1.75);
  const auto c = aggregate_curve(flat, p, 42);
  CHECK(c.j == p.levels);
  for (double v : c.v) CHECK(v == doctest::Approx(1.75).epsilon(1e-15));
  CHECK(c.cycle_index == 42);
  CHECK_THROWS_AS(aggregate_curve(std::vector<double>(10, 1.0), p), DataError);
}

TEST_CASE("aggregation uses only the steady window") {
  const auto p = three_levels();
  std::vector<double> v(p.total_samples());
  const std::size_t per = p.samples_per_level(), win = p.steady_samples();
  for (std::size_t i = 0; i < p.levels.size(); ++i)
    for (std::size_t t = 0; t < per; ++t) v[i * per + t] = t < per - win ? 99.0 : 1.5 + 0.1 * double(i);
  const auto c = aggregate_curve(v, p);
  CHECK(c.v[0] == doctest::Approx(1.5));
  CHECK(c.v[2] == doctest::Approx(1.7));
}

TEST_CASE("noise-free simulation aggregates onto the steady-state model") {
  cellsim::CellParams cp;
  cp.noise_sigma_v = cp.noise_sigma_j = 0;
  const auto s = cellsim::apply_degradation(cellsim::CellState::beginning_of_life(cp, {2e-4, 1e-3}), 700);
  const auto proto = cellsim::PolProtocol::standard();
  const auto rec = cellsim::simulate_polarization_test(s, proto, 1);
  const auto c = aggregate_curve(rec.series.voltage, proto);
  for (std::size_t i = 0; i < c.j.size(); ++i) {
    const double v = cellsim::steady_state_voltage(c.j[i], s);
    CHECK(std::abs(c.v[i] - v) <= 1e-3 * v);
  }
}

TEST_CASE("curve errors") {
  datapipe::NormStats stats;
  stats.std = {1.0, 0.5};
  const auto m = curve({0.5, 1.5, 2.5}, {1.6, 1.8, 2.0});
  const auto shifted = curve({0.5, 1.5, 2.5}, {1.61, 1.81, 2.01});
  const auto e = curve_mse(shifted, m, stats);
  CHECK(e.physical == doctest::Approx(1e-4).epsilon(1e-9));
  CHECK(e.normalized == doctest::Approx(4e-4).epsilon(1e-9));
  CHECK(curve_mae(shifted, m) == doctest::Approx(0.01));
  CHECK(curve_mse(m, m, stats).physical == 0.0);
  CHECK_THROWS_AS(curve_mse(curve({0.5}, {1.6}), m, stats), DataError);
}

TEST_CASE("voltage at a reference current") {
  const auto c = curve({0.5, 1.5, 2.5}, {1.6, 1.8, 2.1});
  CHECK(c.voltage_at(1.5) == doctest::Approx(1.8));
  CHECK(c.voltage_at(2.0) == doctest::Approx(1.95));
  CHECK(c.voltage_at(3.0) == doctest::Approx(2.25));
  CHECK(c.voltage_at(0.0) == doctest::Approx(1.5));
}

TEST_CASE("degradation report") {
  std::vector<PolarizationCurve> meas, pred;
  const double mv[] = {1.90, 1.92, 1.95, 1.97};
  const double pv[] = {1.91, 1.93, 1.92, 1.99};
  for (int i = 0; i < 4; ++i) {
    meas.push_back(curve({1.0, 3.0}, {mv[i] - 0.1, mv[i] + 0.1}, 100u * (i + 1)));
    pred.push_back(curve({1.0, 3.0}, {pv[i] - 0.1, pv[i] + 0.1}, 100u * (i + 1)));
  }
  const auto r = degradation_report(meas, pred, 2.0);
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows[2].v_measured == doctest::Approx(1.95));
  CHECK(r.rows[2].v_predicted == doctest::Approx(1.92));
  CHECK(r.measured_violations.empty());
  CHECK(r.predicted_violations == std::vector<std::size_t>{1});
  // Six pairs; only (1, 2) is ordered differently.
  CHECK(r.rank_agreement == doctest::Approx(5.0 / 6.0));
  const auto j = to_json(r);
  CHECK(j.at("rows").size() == 4);

  pred[1].cycle_index = 7;
  CHECK_THROWS_AS(degradation_report(meas, pred, 2.0), DataError);
  CHECK(degradation_report(std::span(meas).first(1), std::span(pred).first(1), 2.0).rank_agreement == 1.0);
}

TEST_CASE("virtual test reproduces its own window and writes outputs") {
  const auto run = cellsim::generate_run(testsupport::small_run_config(5, 3));
  model::ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.n_enc_layers = 1;
  mc.n_dec_layers = 1;
  mc.d_ff = 16;
  mc.init_seed = 2;
  model::Transformer<float> m(mc);
  datapipe::NormStats stats;
  stats.mean = {1.0, 1.8};
  stats.std = {0.8, 0.2};

  const auto ctx = context_window(run, 2, stats);
  REQUIRE(ctx.size() == datapipe::kWindow * datapipe::kChannels);
  const auto& seg = run.segments[1].series;
  const std::size_t last = seg.size() - 1;
  CHECK(ctx.back() == doctest::Approx(stats.normalize(seg.voltage[last], datapipe::Channel::voltage)).epsilon(1e-5));
  CHECK_THROWS_AS(context_window(run, 0, stats), DataError);
  CHECK_THROWS_AS(context_window(run, 4, stats), DataError);

  const auto a = characterize_checkpoint(m, run, 2, stats);
  const auto b = characterize_checkpoint(m, run, 2, stats);
  CHECK(a.predicted.v == b.predicted.v);  // idempotent
  CHECK(a.predicted_series.size() == run.config.protocol.total_samples());
  CHECK(a.measured.cycle_index == 200);
  CHECK(a.predicted.source == CurveSource::predicted);

  const auto dir = testsupport::temp_dir("curves");
  std::vector<Characterization> items{a};
  write_curves_csv(dir / "curves.csv", items);
  write_curves_svg(dir / "curves.svg", items, "test");
  std::ifstream csv(dir / "curves.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "j_A_cm2,v_pred_V,v_meas_V,cycle_index");
  std::size_t rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 3);
  std::ifstream svg(dir / "curves.svg");
  std::stringstream ss;
  ss << svg.rdbuf();
  CHECK(ss.str().find("<svg") != std::string::npos);
  CHECK(ss.str().find("stroke-dasharray") != std::string::npos);
}

}  // TEST_SUITE
