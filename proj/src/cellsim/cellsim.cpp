#include "pemvc/cellsim.hpp"

#include <cmath>
#include <random>

#include "pemvc/errors.hpp"

namespace pemvc::cellsim {
namespace {

std::size_t samples_for(double seconds, double hz, const char* what) {
  const double exact = seconds * hz;
  const double rounded = std::round(exact);
  if (rounded < 1.0 || std::abs(exact - rounded) > 1e-9 * std::max(1.0, exact)) {
    throw ConfigError(std::string(what) + ": " + std::to_string(seconds) + " s at " +
                      std::to_string(hz) + " Hz is not a positive whole number of samples");
  }
  return static_cast<std::size_t>(rounded);
}

// Gaussian draws only when sigma > 0, so noise-free records never touch the
// generator and are independent of the seed.
class Noise {
 public:
  Noise(std::uint64_t seed, double sigma) : rng_(seed), sigma_(sigma) {}
  double operator()() { return sigma_ > 0.0 ? dist_(rng_) * sigma_ : 0.0; }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_{0.0, 1.0};
  double sigma_;
};

}  // namespace

void CellParams::validate() const {
  if (!(j0 > 0.0)) throw ConfigError("cell: j0 must be > 0");
  if (!(r_ohm >= 0.0)) throw ConfigError("cell: r_ohm must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("cell: tau must be > 0");
  if (!(j_lim > 0.0)) throw ConfigError("cell: j_lim must be > 0");
  if (!(tafel_a > 0.0)) throw ConfigError("cell: tafel_a must be > 0");
  if (!(c_mt >= 0.0)) throw ConfigError("cell: c_mt must be >= 0");
  if (!(noise_sigma_v >= 0.0) || !(noise_sigma_j >= 0.0))
    throw ConfigError("cell: noise sigmas must be >= 0");
  if (!std::isfinite(e_ocv)) throw ConfigError("cell: e_ocv must be finite");
}

CellState CellState::beginning_of_life(const CellParams& base, const DegradationRates& rates) {
  base.validate();
  if (!(rates.k_r >= 0.0) || !(rates.k_j >= 0.0))
    throw ConfigError("degradation: rates must be >= 0");
  return CellState{base, base, rates, 0};
}

std::string to_string(ProfileKind kind) {
  return kind == ProfileKind::on_off ? "on_off" : "load_unload";
}

ProfileKind profile_kind_from_string(const std::string& s) {
  if (s == "on_off") return ProfileKind::on_off;
  if (s == "load_unload") return ProfileKind::load_unload;
  throw ConfigError("profile.kind: expected 'on_off' or 'load_unload', got '" + s + "'");
}

void LoadProfile::validate() const {
  // Equal levels (a constant hold) are accepted here; run configs require a
  // proper square wave.
  if (!(v_low <= v_high)) throw ConfigError("profile: v_low must be <= v_high");
  if (!(hold_s > 0.0)) throw ConfigError("profile: hold_s must be > 0");
}

PolProtocol PolProtocol::standard() {
  PolProtocol p;
  for (int i = 0; i < 10; ++i) p.levels.push_back(0.2 + (3.0 - 0.2) * i / 9.0);
  return p;
}

void PolProtocol::validate() const {
  if (levels.empty()) throw ConfigError("protocol: no current levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!(levels[i] >= 0.0)) throw ConfigError("protocol: levels must be >= 0");
    if (i > 0 && !(levels[i] > levels[i - 1]))
      throw ConfigError("protocol: levels must be strictly increasing");
  }
  if (!(sample_hz > 0.0)) throw ConfigError("protocol: sample_hz must be > 0");
  samples_for(hold_s, sample_hz, "protocol.hold_s");
  samples_for(steady_window_s, sample_hz, "protocol.steady_window_s");
  if (!(steady_window_s < hold_s)) throw ConfigError("protocol: steady_window_s must be < hold_s");
}

std::size_t PolProtocol::samples_per_level() const {
  return samples_for(hold_s, sample_hz, "protocol.hold_s");
}

std::size_t PolProtocol::steady_samples() const {
  return samples_for(steady_window_s, sample_hz, "protocol.steady_window_s");
}

std::vector<double> PolProtocol::staircase() const {
  const std::size_t per = samples_per_level();
  std::vector<double> out;
  out.reserve(levels.size() * per);
  for (double level : levels) out.insert(out.end(), per, level);
  return out;
}

double steady_state_voltage(double j, const CellState& state) {
  const CellParams& p = state.params;
  if (!std::isfinite(j) || j < 0.0 || j >= p.j_lim) {
    throw DomainError("steady_state_voltage: j = " + std::to_string(j) +
                      " outside [0, j_lim = " + std::to_string(p.j_lim) + ")");
  }
  return p.e_ocv + p.tafel_a * std::asinh(j / (2.0 * p.j0)) + p.r_ohm * j -
         p.c_mt * std::log1p(-j / p.j_lim);
}

double steady_state_current(double v, const CellState& state) {
  if (!std::isfinite(v)) throw DomainError("steady_state_current: non-finite voltage");
  const CellParams& p = state.params;
  if (v <= p.e_ocv) return 0.0;
  double lo = 0.0;
  double hi = p.j_lim * (1.0 - 1e-9);
  if (steady_state_voltage(hi, state) <= v) return hi;
  double mid = 0.5 * (lo + hi);
  for (int iter = 0; iter < 200; ++iter) {
    mid = 0.5 * (lo + hi);
    const double f = steady_state_voltage(mid, state) - v;
    if (std::abs(f) < 1e-9) break;
    (f < 0.0 ? lo : hi) = mid;
    if (hi - lo <= 1e-15 * p.j_lim) break;
  }
  return mid;
}

CellState apply_degradation(const CellState& state, std::uint64_t n_cycles) {
  if (n_cycles == 0) return state;
  CellState next = state;
  next.cycles += n_cycles;
  const double n = static_cast<double>(next.cycles);
  next.params.r_ohm = next.base.r_ohm * (1.0 + next.rates.k_r * n);
  next.params.j0 = next.base.j0 * std::exp(-next.rates.k_j * n);
  return next;
}

OperationalRecord simulate_ast_cycles(const CellState& state, const LoadProfile& profile,
                                      std::uint64_t n, std::uint64_t rng_seed, double sample_hz,
                                      CellState* end_state) {
  if (n == 0) throw ConfigError("simulate_ast_cycles: need at least one cycle");
  profile.validate();
  const std::size_t per_half = samples_for(profile.hold_s, sample_hz, "profile.hold_s");
  const double alpha = 1.0 / (sample_hz * state.params.tau);

  OperationalRecord rec;
  rec.series.sample_hz = sample_hz;
  rec.first_cycle = state.cycles + 1;
  rec.last_cycle = state.cycles + n;
  rec.series.current.reserve(n * 2 * per_half);
  rec.series.voltage.reserve(n * 2 * per_half);

  Noise noise_j(derive_seed(rng_seed, 1), state.params.noise_sigma_j);
  Noise noise_v(derive_seed(rng_seed, 2), state.params.noise_sigma_v);
  CellState cur = state;
  double j = 0.0;
  for (std::uint64_t c = 0; c < n; ++c) {
    for (double v_cmd : {profile.v_low, profile.v_high}) {
      const double j_ss = steady_state_current(v_cmd, cur);
      for (std::size_t k = 0; k < per_half; ++k) {
        rec.series.current.push_back(j + noise_j());
        rec.series.voltage.push_back(v_cmd + noise_v());
        j += alpha * (j_ss - j);
      }
    }
    cur = apply_degradation(cur, 1);
  }
  if (end_state) *end_state = cur;
  return rec;
}

PolRecord simulate_polarization_test(const CellState& state, const PolProtocol& protocol,
                                     std::uint64_t rng_seed) {
  protocol.validate();
  const std::size_t per = protocol.samples_per_level();
  const double alpha = 1.0 / (protocol.sample_hz * state.params.tau);

  PolRecord rec;
  rec.cycle_index = state.cycles;
  rec.series.sample_hz = protocol.sample_hz;
  rec.series.current = protocol.staircase();
  rec.series.voltage.reserve(rec.series.current.size());

  Noise noise_v(derive_seed(rng_seed, 3), state.params.noise_sigma_v);
  double v = state.params.e_ocv;
  for (double level : protocol.levels) {
    const double v_ss = steady_state_voltage(level, state);
    for (std::size_t k = 0; k < per; ++k) {
      rec.series.voltage.push_back(v + noise_v());
      v += alpha * (v_ss - v);
    }
  }
  return rec;
}

void RunConfig::validate() const {
  cell.validate();
  profile.validate();
  if (!(profile.v_low < profile.v_high)) throw ConfigError("profile: v_low must be < v_high");
  protocol.validate();
  if (!(rates.k_r >= 0.0) || !(rates.k_j >= 0.0))
    throw ConfigError("degradation: rates must be >= 0");
  if (protocol.levels.back() >= cell.j_lim)
    throw ConfigError("protocol: highest level must be below j_lim");
  std::uint64_t prev = 0;
  for (std::uint64_t c : checkpoints) {
    if (c <= prev) throw ConfigError("checkpoints must be strictly increasing and > 0");
    prev = c;
  }
}

RunDataset generate_run(const RunConfig& config) {
  config.validate();
  RunDataset run;
  run.config = config;
  CellState state = CellState::beginning_of_life(config.cell, config.rates);
  run.states.push_back(state);
  run.pol_tests.push_back(simulate_polarization_test(state, config.protocol, derive_seed(config.seed, 0)));
  std::uint64_t prev = 0;
  for (std::size_t i = 0; i < config.checkpoints.size(); ++i) {
    const std::uint64_t n = config.checkpoints[i] - prev;
    CellState next;
    run.segments.push_back(simulate_ast_cycles(state, config.profile, n,
                                               derive_seed(config.seed, 1000 + i),
                                               config.protocol.sample_hz, &next));
    state = next;
    run.states.push_back(state);
    run.pol_tests.push_back(
        simulate_polarization_test(state, config.protocol, derive_seed(config.seed, 2000 + i)));
    prev = config.checkpoints[i];
  }
  return run;
}

std::vector<std::uint64_t> growing_checkpoints(std::size_t count, std::uint64_t first_gap,
                                               double growth) {
  if (first_gap == 0 || !(growth >= 1.0)) throw ConfigError("growing_checkpoints: invalid spacing");
  std::vector<std::uint64_t> out;
  std::uint64_t at = 0;
  double gap = static_cast<double>(first_gap);
  std::uint64_t last_gap = first_gap;
  for (std::size_t i = 0; i < count; ++i) {
    const auto g = std::max(last_gap, static_cast<std::uint64_t>(std::llround(gap)));
    at += g;
    out.push_back(at);
    last_gap = g;
    gap *= growth;
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(tag));
}

}  // namespace pemvc::cellsim
