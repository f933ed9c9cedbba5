#pragma once

// Virtual polarization testing: decode the commanded current staircase
// against the latent state of an operational window, aggregate the voltage
// prediction into a curve, and compare it with the measured curve.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pemvc/cellsim.hpp"
#include "pemvc/datapipe.hpp"
#include "pemvc/json_util.hpp"
#include "pemvc/model.hpp"

namespace pemvc::characterize {

enum class CurveSource { measured, predicted };
std::string to_string(CurveSource s);

struct PolarizationCurve {
  std::vector<double> j;  // A/cm^2, strictly increasing
  std::vector<double> v;  // steady voltage per level
  std::uint64_t cycle_index = 0;
  CurveSource source = CurveSource::measured;

  /// Linear interpolation in j; linear extrapolation from the end segments.
  double voltage_at(double j_ref) const;
};

/// Encoder input for checkpoint `k` (1-based into the run's checkpoints):
/// the last window of the operational segment that precedes it, normalized.
std::vector<float> context_window(const cellsim::RunDataset& run, std::size_t k,
                                  const datapipe::NormStats& stats);

/// Z for one normalized [kWindow][channels] encoder window.
nn::Tensor<float> encode_window(model::Transformer<float>& model, const std::vector<float>& x_enc);

/// Decodes the protocol's staircase in consecutive windows of the model
/// length conditioned on `z`; returns volts, one per protocol sample.
std::vector<double> predict_with_latent(model::Transformer<float>& model, const nn::Tensor<float>& z,
                                        const cellsim::PolProtocol& protocol, const datapipe::NormStats& stats);

std::vector<double> predict_pol_timeseries(model::Transformer<float>& model, const std::vector<float>& x_enc,
                                           const cellsim::PolProtocol& protocol,
                                           const datapipe::NormStats& stats);

/// Mean of the last steady_window_s of every level.
PolarizationCurve aggregate_curve(std::span<const double> voltage, const cellsim::PolProtocol& protocol,
                                  std::uint64_t cycle_index = 0, CurveSource source = CurveSource::measured);

struct CurveError {
  double physical = 0;    // V^2
  double normalized = 0;  // in voltage-channel std units
};

CurveError curve_mse(const PolarizationCurve& predicted, const PolarizationCurve& measured,
                     const datapipe::NormStats& stats);

/// Mean absolute voltage difference over levels.
double curve_mae(const PolarizationCurve& predicted, const PolarizationCurve& measured);

struct DegradationRow {
  std::uint64_t cycle_index = 0;
  double v_measured = 0;
  double v_predicted = 0;
};

struct DegradationReport {
  double j_ref = 2.0;
  std::vector<DegradationRow> rows;  // ascending cycle_index
  /// Indices i where row i+1 does not exceed row i.
  std::vector<std::size_t> measured_violations;
  std::vector<std::size_t> predicted_violations;
  /// Fraction of row pairs ordered the same way by both columns (1 with < 2 rows).
  double rank_agreement = 1.0;
};

/// Pairs curves by position; both lists must hold the same cycle indices.
DegradationReport degradation_report(std::span<const PolarizationCurve> measured,
                                     std::span<const PolarizationCurve> predicted, double j_ref = 2.0);

Json to_json(const DegradationReport& r);

/// Measured and predicted curve for checkpoint `k` of a run.
struct Characterization {
  PolarizationCurve measured;
  PolarizationCurve predicted;
  std::vector<double> predicted_series;
};

Characterization characterize_checkpoint(model::Transformer<float>& model, const cellsim::RunDataset& run,
                                         std::size_t k, const datapipe::NormStats& stats);

/// `j_A_cm2,v_pred_V,v_meas_V,cycle_index`, one row per level and checkpoint.
void write_curves_csv(const std::filesystem::path& path, std::span<const Characterization> items);

/// Measured (solid) against predicted (dashed) curves, one colour per checkpoint.
void write_curves_svg(const std::filesystem::path& path, std::span<const Characterization> items,
                      const std::string& title);

}  // namespace pemvc::characterize
