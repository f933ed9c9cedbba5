#include "pemvc/characterize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "pemvc/errors.hpp"
#include "pemvc/text.hpp"

namespace pemvc::characterize {

using datapipe::Channel;

std::string to_string(CurveSource s) { return s == CurveSource::measured ? "measured" : "predicted"; }

double PolarizationCurve::voltage_at(double j_ref) const {
  if (j.size() != v.size() || j.empty()) throw DataError("curve has no points");
  if (j.size() == 1) return v[0];
  std::size_t hi = static_cast<std::size_t>(std::upper_bound(j.begin(), j.end(), j_ref) - j.begin());
  hi = std::clamp<std::size_t>(hi, 1, j.size() - 1);
  const std::size_t lo = hi - 1;
  const double w = (j_ref - j[lo]) / (j[hi] - j[lo]);
  return v[lo] + w * (v[hi] - v[lo]);
}

std::vector<float> context_window(const cellsim::RunDataset& run, std::size_t k, const datapipe::NormStats& stats) {
  if (k == 0 || k > run.segments.size())
    throw DataError("checkpoint index " + std::to_string(k) + " outside 1.." + std::to_string(run.segments.size()));
  const auto& seg = run.segments[k - 1].series;
  if (seg.size() < datapipe::kWindow) throw DataError("operational segment shorter than one window");
  return datapipe::normalize_window(seg, seg.size() - datapipe::kWindow, datapipe::kWindow, stats);
}

nn::Tensor<float> encode_window(model::Transformer<float>& model, const std::vector<float>& x_enc) {
  const auto& cfg = model.config();
  if (x_enc.size() != cfg.patch.length * cfg.channels)
    throw ShapeError("encoder window holds " + std::to_string(x_enc.size()) + " values, model expects " +
                     std::to_string(cfg.patch.length * cfg.channels));
  nn::NoGradGuard guard;
  const bool was = model.training();
  model.set_training(false);
  auto z = model.encode(nn::Tensor<float>::from({cfg.patch.length, cfg.channels}, x_enc));
  model.set_training(was);
  return z;
}

std::vector<double> predict_with_latent(model::Transformer<float>& model, const nn::Tensor<float>& z,
                                        const cellsim::PolProtocol& protocol, const datapipe::NormStats& stats) {
  protocol.validate();
  const auto& cfg = model.config();
  if (cfg.channels != datapipe::kChannels) throw ShapeError("model channel count does not match the data");
  const std::size_t len = cfg.patch.length;
  const auto stair = protocol.staircase();
  const auto cur = static_cast<std::size_t>(Channel::current_density);

  nn::NoGradGuard guard;
  const bool was = model.training();
  model.set_training(false);
  std::vector<double> out;
  out.reserve(stair.size());
  for (std::size_t start = 0; start < stair.size(); start += len) {
    const std::size_t valid = std::min(len, stair.size() - start);
    std::vector<float> x(len * cfg.channels, 0.0f);
    for (std::size_t t = 0; t < valid; ++t)
      x[t * cfg.channels + cur] = static_cast<float>(stats.normalize(stair[start + t], Channel::current_density));
    auto pred = model.decode(nn::Tensor<float>::from({len, cfg.channels}, std::move(x)), z);
    const auto p = pred.data();
    for (std::size_t t = 0; t < valid; ++t)
      out.push_back(stats.denormalize(static_cast<double>(p[t]), Channel::voltage));
  }
  model.set_training(was);
  return out;
}

std::vector<double> predict_pol_timeseries(model::Transformer<float>& model, const std::vector<float>& x_enc,
                                           const cellsim::PolProtocol& protocol,
                                           const datapipe::NormStats& stats) {
  return predict_with_latent(model, encode_window(model, x_enc), protocol, stats);
}

PolarizationCurve aggregate_curve(std::span<const double> voltage, const cellsim::PolProtocol& protocol,
                                  std::uint64_t cycle_index, CurveSource source) {
  protocol.validate();
  if (voltage.size() != protocol.total_samples())
    throw DataError("sequence has " + std::to_string(voltage.size()) + " samples, protocol needs " +
                    std::to_string(protocol.total_samples()));
  const std::size_t per = protocol.samples_per_level();
  const std::size_t win = protocol.steady_samples();
  PolarizationCurve c;
  c.cycle_index = cycle_index;
  c.source = source;
  for (std::size_t i = 0; i < protocol.levels.size(); ++i) {
    const std::size_t end = (i + 1) * per;
    double s = 0;
    for (std::size_t t = end - win; t < end; ++t) s += voltage[t];
    c.j.push_back(protocol.levels[i]);
    c.v.push_back(s / static_cast<double>(win));
  }
  return c;
}

namespace {

void check_aligned(const PolarizationCurve& a, const PolarizationCurve& b) {
  if (a.j.size() != b.j.size() || a.v.size() != a.j.size() || b.v.size() != b.j.size() || a.j.empty())
    throw DataError("curves have different level counts");
  for (std::size_t i = 0; i < a.j.size(); ++i)
    if (std::abs(a.j[i] - b.j[i]) > 1e-12) throw DataError("curves are measured at different levels");
}

}  // namespace

CurveError curve_mse(const PolarizationCurve& predicted, const PolarizationCurve& measured,
                     const datapipe::NormStats& stats) {
  check_aligned(predicted, measured);
  double s = 0;
  for (std::size_t i = 0; i < predicted.v.size(); ++i) {
    const double d = predicted.v[i] - measured.v[i];
    s += d * d;
  }
  CurveError e;
  e.physical = s / static_cast<double>(predicted.v.size());
  const double sd = stats.std[static_cast<std::size_t>(Channel::voltage)];
  e.normalized = e.physical / (sd * sd);
  return e;
}

double curve_mae(const PolarizationCurve& predicted, const PolarizationCurve& measured) {
  check_aligned(predicted, measured);
  double s = 0;
  for (std::size_t i = 0; i < predicted.v.size(); ++i) s += std::abs(predicted.v[i] - measured.v[i]);
  return s / static_cast<double>(predicted.v.size());
}

DegradationReport degradation_report(std::span<const PolarizationCurve> measured,
                                     std::span<const PolarizationCurve> predicted, double j_ref) {
  if (measured.size() != predicted.size()) throw DataError("degradation report needs paired curves");
  DegradationReport r;
  r.j_ref = j_ref;
  for (std::size_t i = 0; i < measured.size(); ++i) {
    if (measured[i].cycle_index != predicted[i].cycle_index)
      throw DataError("degradation report: curve cycle indices differ");
    r.rows.push_back({measured[i].cycle_index, measured[i].voltage_at(j_ref), predicted[i].voltage_at(j_ref)});
  }
  std::stable_sort(r.rows.begin(), r.rows.end(),
                   [](const DegradationRow& a, const DegradationRow& b) { return a.cycle_index < b.cycle_index; });
  for (std::size_t i = 0; i + 1 < r.rows.size(); ++i) {
    if (!(r.rows[i + 1].v_measured > r.rows[i].v_measured)) r.measured_violations.push_back(i);
    if (!(r.rows[i + 1].v_predicted > r.rows[i].v_predicted)) r.predicted_violations.push_back(i);
  }
  std::size_t pairs = 0, agree = 0;
  for (std::size_t a = 0; a < r.rows.size(); ++a) {
    for (std::size_t b = a + 1; b < r.rows.size(); ++b) {
      const double dm = r.rows[b].v_measured - r.rows[a].v_measured;
      const double dp = r.rows[b].v_predicted - r.rows[a].v_predicted;
      ++pairs;
      if ((dm > 0 && dp > 0) || (dm < 0 && dp < 0) || (dm == 0 && dp == 0)) ++agree;
    }
  }
  r.rank_agreement = pairs ? static_cast<double>(agree) / static_cast<double>(pairs) : 1.0;
  return r;
}

Json to_json(const DegradationReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back(Json{{"cycle_index", row.cycle_index}, {"v_measured_V", row.v_measured},
                        {"v_predicted_V", row.v_predicted}});
  return Json{{"j_ref_A_cm2", r.j_ref},
              {"rows", rows},
              {"measured_violations", r.measured_violations},
              {"predicted_violations", r.predicted_violations},
              {"rank_agreement", r.rank_agreement}};
}

Characterization characterize_checkpoint(model::Transformer<float>& model, const cellsim::RunDataset& run,
                                         std::size_t k, const datapipe::NormStats& stats) {
  const auto x_enc = context_window(run, k, stats);
  const auto& protocol = run.config.protocol;
  const auto& pol = run.pol_tests.at(k);
  Characterization c;
  c.predicted_series = predict_pol_timeseries(model, x_enc, protocol, stats);
  c.measured = aggregate_curve(pol.series.voltage, protocol, pol.cycle_index, CurveSource::measured);
  c.predicted = aggregate_curve(c.predicted_series, protocol, pol.cycle_index, CurveSource::predicted);
  return c;
}

void write_curves_csv(const std::filesystem::path& path, std::span<const Characterization> items) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "j_A_cm2,v_pred_V,v_meas_V,cycle_index\n";
  for (const auto& it : items) {
    check_aligned(it.predicted, it.measured);
    for (std::size_t i = 0; i < it.measured.j.size(); ++i)
      out << format_double(it.measured.j[i]) << ',' << format_fixed(it.predicted.v[i], 6) << ','
          << format_fixed(it.measured.v[i], 6) << ',' << it.measured.cycle_index << '\n';
  }
}

}  // namespace pemvc::characterize
