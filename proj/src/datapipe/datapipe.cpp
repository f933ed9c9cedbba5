#include "pemvc/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pemvc/errors.hpp"

namespace pemvc::datapipe {

std::string to_string(Task task) { return task == Task::op_pol ? "op_pol" : "op_op"; }

Json to_json(const NormStats& s) {
  return Json{{"mean", {s.mean[0], s.mean[1]}}, {"std", {s.std[0], s.std[1]}}};
}

NormStats norm_stats_from_json(const Json& j) {
  NormStats s;
  try {
    for (std::size_t c = 0; c < kChannels; ++c) {
      s.mean[c] = j.at("mean").at(c).get<double>();
      s.std[c] = j.at("std").at(c).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("norm stats: ") + e.what());
  }
  for (double sd : s.std)
    if (!(sd > 0.0)) throw DataError("norm stats: std must be > 0");
  return s;
}

bool SplitPlan::is_val(std::uint64_t checkpoint) const {
  return std::find(val.begin(), val.end(), checkpoint) != val.end();
}

SplitPlan split_checkpoints(std::span<const std::uint64_t> checkpoints) {
  if (checkpoints.empty()) throw ConfigError("split_checkpoints: no checkpoints");
  SplitPlan plan;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (i > 0 && checkpoints[i] <= checkpoints[i - 1])
      throw ConfigError("split_checkpoints: checkpoints must be strictly increasing");
    ((i + 1) % 3 == 0 ? plan.val : plan.train).push_back(checkpoints[i]);
  }
  return plan;
}

NormStats fit_norm_stats(std::span<const cellsim::OperationalRecord* const> segments) {
  if (segments.empty()) throw DataError("fit_norm_stats: no training segments");
  NormStats stats;
  std::size_t count = 0;
  std::array<double, kChannels> total{0.0, 0.0};
  for (const auto* seg : segments) {
    for (std::size_t k = 0; k < seg->series.size(); ++k) {
      total[0] += seg->series.current[k];
      total[1] += seg->series.voltage[k];
    }
    count += seg->series.size();
  }
  if (count == 0) throw DataError("fit_norm_stats: training segments are empty");
  for (std::size_t c = 0; c < kChannels; ++c) stats.mean[c] = total[c] / static_cast<double>(count);
  std::array<double, kChannels> sq{0.0, 0.0};
  for (const auto* seg : segments) {
    for (std::size_t k = 0; k < seg->series.size(); ++k) {
      const double dj = seg->series.current[k] - stats.mean[0];
      const double dv = seg->series.voltage[k] - stats.mean[1];
      sq[0] += dj * dj;
      sq[1] += dv * dv;
    }
  }
  for (std::size_t c = 0; c < kChannels; ++c)
    stats.std[c] = std::max(std::sqrt(sq[c] / static_cast<double>(count)), 1e-6);
  return stats;
}

std::vector<float> normalize_window(const cellsim::TimeSeries& s, std::size_t offset,
                                    std::size_t length, const NormStats& stats) {
  if (offset + length > s.size()) throw DataError("normalize_window: window exceeds record");
  std::vector<float> out(length * kChannels);
  for (std::size_t t = 0; t < length; ++t) {
    out[t * kChannels + 0] = static_cast<float>(stats.normalize(s.current[offset + t], Channel::current_density));
    out[t * kChannels + 1] = static_cast<float>(stats.normalize(s.voltage[offset + t], Channel::voltage));
  }
  return out;
}

void normalize(std::span<double> seq, const NormStats& stats) {
  if (seq.size() % kChannels != 0) throw ShapeError("normalize: length is not a multiple of D");
  for (std::size_t i = 0; i < seq.size(); ++i)
    seq[i] = stats.normalize(seq[i], static_cast<Channel>(i % kChannels));
}

void denormalize(std::span<double> seq, const NormStats& stats) {
  if (seq.size() % kChannels != 0) throw ShapeError("denormalize: length is not a multiple of D");
  for (std::size_t i = 0; i < seq.size(); ++i)
    seq[i] = stats.denormalize(seq[i], static_cast<Channel>(i % kChannels));
}

std::vector<std::uint64_t> window_offsets(std::size_t record_len, std::size_t count, bool random,
                                          std::uint64_t seed) {
  if (record_len < kWindow) {
    throw DataError("segment of " + std::to_string(record_len) + " samples is shorter than the " +
                    std::to_string(kWindow) + "-sample window");
  }
  const std::uint64_t span = record_len - kWindow;
  std::vector<std::uint64_t> out;
  out.reserve(count);
  if (random) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint64_t> dist(0, span);
    for (std::size_t i = 0; i < count; ++i) out.push_back(dist(rng));
  } else if (count == 1) {
    out.push_back(span);
  } else {
    for (std::size_t i = 0; i < count; ++i) out.push_back(span * i / (count - 1));
  }
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> tile_windows(std::size_t total) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start < total; start += kWindow)
    out.emplace_back(start, std::min(kWindow, total - start));
  return out;
}

namespace {

// Zero-filled decoder input with only the task's input channel populated, and
// the matching target; positions past `valid` stay zero.
void fill_decoder(PairedSample& s, const cellsim::TimeSeries& series, std::size_t start,
                  std::size_t valid, const NormStats& stats) {
  const Channel in = input_channel(s.task);
  const Channel out = target_channel(s.task);
  const auto& in_data = in == Channel::current_density ? series.current : series.voltage;
  const auto& out_data = out == Channel::current_density ? series.current : series.voltage;
  s.x_dec.assign(kWindow * kChannels, 0.0f);
  s.y.assign(kWindow, 0.0f);
  s.valid_len = static_cast<std::uint32_t>(valid);
  s.dec_offset = start;
  for (std::size_t t = 0; t < valid; ++t) {
    s.x_dec[t * kChannels + static_cast<std::size_t>(in)] =
        static_cast<float>(stats.normalize(in_data[start + t], in));
    s.y[t] = static_cast<float>(stats.normalize(out_data[start + t], out));
  }
}

void check_run(const cellsim::RunDataset& run) {
  if (run.segments.size() != run.config.checkpoints.size() ||
      run.pol_tests.size() != run.config.checkpoints.size() + 1) {
    throw DataError("run dataset is missing segments or polarization tests");
  }
}

}  // namespace

SplitSamples make_op_pol_pairs(const cellsim::RunDataset& run, const SplitPlan& plan,
                               const NormStats& stats, const PairOptions& opts) {
  check_run(run);
  SplitSamples out;
  for (std::size_t i = 0; i < run.config.checkpoints.size(); ++i) {
    const std::uint64_t checkpoint = run.config.checkpoints[i];
    const bool val = plan.is_val(checkpoint);
    const auto& seg = run.segments[i].series;
    const auto& pol = run.pol_tests[i + 1].series;
    const auto offsets =
        window_offsets(seg.size(), opts.windows, !val, cellsim::derive_seed(opts.seed, 10'000 + i));
    const auto tiles = tile_windows(pol.size());
    auto& dst = val ? out.val : out.train;
    for (std::uint64_t off : offsets) {
      const auto x_enc = normalize_window(seg, off, kWindow, stats);
      for (const auto& [start, valid] : tiles) {
        PairedSample s;
        s.task = Task::op_pol;
        s.cycle_index = checkpoint;
        s.window_offset = off;
        s.x_enc = x_enc;
        fill_decoder(s, pol, start, valid, stats);
        dst.push_back(std::move(s));
      }
    }
  }
  return out;
}

SplitSamples make_op_op_pairs(const cellsim::RunDataset& run, const SplitPlan& plan,
                              const NormStats& stats, const PairOptions& opts) {
  check_run(run);
  SplitSamples out;
  for (std::size_t i = 0; i < run.config.checkpoints.size(); ++i) {
    const std::uint64_t checkpoint = run.config.checkpoints[i];
    const bool val = plan.is_val(checkpoint);
    const auto& seg = run.segments[i].series;
    const auto enc = window_offsets(seg.size(), opts.windows, !val,
                                    cellsim::derive_seed(opts.seed, 20'000 + i));
    auto dec = window_offsets(seg.size(), opts.windows, !val,
                              cellsim::derive_seed(opts.seed, 30'000 + i));
    if (val) std::reverse(dec.begin(), dec.end());
    auto& dst = val ? out.val : out.train;
    for (std::size_t w = 0; w < enc.size(); ++w) {
      PairedSample s;
      s.task = Task::op_op;
      s.cycle_index = checkpoint;
      s.window_offset = enc[w];
      s.x_enc = normalize_window(seg, enc[w], kWindow, stats);
      fill_decoder(s, seg, dec[w], kWindow, stats);
      dst.push_back(std::move(s));
    }
  }
  return out;
}

PreparedData prepare(const cellsim::RunDataset& run, const PrepareOptions& opts) {
  check_run(run);
  PreparedData data;
  data.plan = split_checkpoints(run.config.checkpoints);
  std::vector<const cellsim::OperationalRecord*> train_segments;
  for (std::size_t i = 0; i < run.config.checkpoints.size(); ++i)
    if (!data.plan.is_val(run.config.checkpoints[i])) train_segments.push_back(&run.segments[i]);
  data.stats = fit_norm_stats(train_segments);
  data.op_pol = make_op_pol_pairs(run, data.plan, data.stats,
                                  PairOptions{opts.windows_per_pair, cellsim::derive_seed(opts.seed, 1)});
  data.op_op = make_op_op_pairs(run, data.plan, data.stats,
                                PairOptions{opts.windows_per_segment, cellsim::derive_seed(opts.seed, 2)});
  return data;
}

}  // namespace pemvc::datapipe
