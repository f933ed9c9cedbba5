#pragma once

// Synthetic PEM electrolyzer cell.
//
// Steady-state polarization:
//   V(j) = e_ocv + tafel_a * asinh(j / (2 j0)) + r_ohm * j - c_mt * ln(1 - j / j_lim)
// Degradation after n cycles from beginning of life:
//   r_ohm = base.r_ohm * (1 + k_r * n),   j0 = base.j0 * exp(-k_j * n)
// Dynamics are first order with time constant tau, Euler-integrated on the
// sample grid. Voltage-controlled stress cycling advances degradation;
// current-controlled polarization tests do not.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pemvc/json_util.hpp"

namespace pemvc::cellsim {

struct CellParams {
  double e_ocv = 1.23;       // V
  double tafel_a = 0.06;     // V
  double j0 = 1e-3;          // A/cm^2
  double r_ohm = 0.15;       // ohm cm^2
  double j_lim = 6.0;        // A/cm^2
  double c_mt = 0.01;        // V
  double tau = 2.0;          // s
  double noise_sigma_v = 0.002;  // V
  double noise_sigma_j = 0.005;  // A/cm^2

  /// Throws ConfigError when an invariant is broken.
  void validate() const;
};

struct DegradationRates {
  double k_r = 0.0;  // fractional ohmic growth per cycle
  double k_j = 0.0;  // exchange-current decay rate per cycle
};

struct CellState {
  CellParams params;  // current (degraded) values
  CellParams base;    // beginning of life
  DegradationRates rates;
  std::uint64_t cycles = 0;

  static CellState beginning_of_life(const CellParams& base, const DegradationRates& rates);
};

enum class ProfileKind { on_off, load_unload };

std::string to_string(ProfileKind kind);
ProfileKind profile_kind_from_string(const std::string& s);

/// Square-wave voltage stress: each cycle holds v_low then v_high.
struct LoadProfile {
  ProfileKind kind = ProfileKind::load_unload;
  double v_low = 1.45;
  double v_high = 2.0;
  double hold_s = 10.0;
  std::uint64_t cycle_count = 100;

  void validate() const;
};

/// Galvanostatic staircase used for characterization.
struct PolProtocol {
  std::vector<double> levels;  // A/cm^2, strictly increasing
  double hold_s = 120.0;
  double sample_hz = 10.0;
  double steady_window_s = 30.0;

  /// 10 levels linearly spaced over [0.2, 3.0] A/cm^2.
  static PolProtocol standard();

  void validate() const;
  std::size_t samples_per_level() const;
  std::size_t steady_samples() const;
  std::size_t total_samples() const { return levels.size() * samples_per_level(); }
  /// Commanded current for every sample of the test.
  std::vector<double> staircase() const;
};

/// Two-channel record sampled at a fixed rate. Channel order is always
/// (current density, voltage).
struct TimeSeries {
  double sample_hz = 10.0;
  std::vector<double> current;
  std::vector<double> voltage;

  std::size_t size() const { return current.size(); }
};

struct OperationalRecord {
  TimeSeries series;
  std::uint64_t first_cycle = 0;  // 1-based index of the first cycle in the record
  std::uint64_t last_cycle = 0;
};

struct PolRecord {
  TimeSeries series;
  std::uint64_t cycle_index = 0;
};

double steady_state_voltage(double j, const CellState& state);
double steady_state_current(double v, const CellState& state);

CellState apply_degradation(const CellState& state, std::uint64_t n_cycles);

/// Voltage-controlled stress cycling. The current starts from rest (0) and
/// degradation is applied after every completed cycle.
/// `end_state`, when given, receives the state after the last cycle.
OperationalRecord simulate_ast_cycles(const CellState& state, const LoadProfile& profile,
                                      std::uint64_t n, std::uint64_t rng_seed,
                                      double sample_hz = 10.0, CellState* end_state = nullptr);

/// Current-controlled polarization test; the voltage relaxes from open
/// circuit. Does not advance degradation.
PolRecord simulate_polarization_test(const CellState& state, const PolProtocol& protocol,
                                     std::uint64_t rng_seed);

struct RunConfig {
  std::string name = "run";
  CellParams cell;
  DegradationRates rates;
  LoadProfile profile;
  PolProtocol protocol = PolProtocol::standard();
  std::vector<std::uint64_t> checkpoints;  // N_1 < ... < N_m, all > 0
  std::uint64_t seed = 0;

  void validate() const;
};

struct RunDataset {
  RunConfig config;
  /// pol_tests[0] is the beginning-of-life test; pol_tests[i] follows segments[i-1].
  std::vector<PolRecord> pol_tests;
  /// segments[i] covers cycles checkpoints[i-1]+1 .. checkpoints[i] (N_0 = 0).
  std::vector<OperationalRecord> segments;
  /// Cell state at each characterization (same indexing as pol_tests).
  std::vector<CellState> states;
};

RunDataset generate_run(const RunConfig& config);

/// Checkpoints whose spacing grows geometrically from `first_gap`, denser
/// early in life. Spacing is rounded to whole cycles and never shrinks.
std::vector<std::uint64_t> growing_checkpoints(std::size_t count, std::uint64_t first_gap,
                                               double growth);

/// Derives an independent stream seed from a parent seed and a tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

Json to_json(const CellParams& p);
Json to_json(const DegradationRates& r);
Json to_json(const LoadProfile& p);
Json to_json(const PolProtocol& p);
Json to_json(const RunConfig& c);
// Parsers reject unknown keys; absent keys keep their defaults.
CellParams cell_params_from_json(const Json& j, const std::string& path);
DegradationRates rates_from_json(const Json& j, const std::string& path);
LoadProfile load_profile_from_json(const Json& j, const std::string& path);
PolProtocol protocol_from_json(const Json& j, const std::string& path);
RunConfig run_config_from_json(const Json& j, const std::string& path);

// Run directory: manifest.json plus one CSV per record
// (`t_s,current_A_cm2,voltage_V`, one row per sample). `extra` is stored
// verbatim under the manifest's "experiment" key for downstream stages.
void write_run(const RunDataset& run, const std::filesystem::path& dir, const Json& extra = Json());
RunDataset read_run(const std::filesystem::path& dir);
Json read_run_manifest(const std::filesystem::path& dir);

}  // namespace pemvc::cellsim
