#pragma once

// Paired training samples built from a simulated (or measured) run.
//
// OP-POL: encoder sees an operational window preceding checkpoint N_i; the
// decoder gets the commanded current staircase of the polarization test at
// N_i and predicts its voltage. OP-OP: encoder and decoder windows come from
// the same operational segment; the decoder gets the commanded voltage and
// predicts the current. The channel not given to the decoder is zero in
// normalized space.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pemvc/cellsim.hpp"
#include "pemvc/json_util.hpp"

namespace pemvc::datapipe {

enum class Channel : std::size_t { current_density = 0, voltage = 1 };
inline constexpr std::size_t kChannels = 2;
inline constexpr std::size_t kWindow = 1024;

enum class Task : std::uint32_t { op_pol = 0, op_op = 1 };
std::string to_string(Task task);

/// Decoder input and target channel per task.
constexpr Channel input_channel(Task t) {
  return t == Task::op_pol ? Channel::current_density : Channel::voltage;
}
constexpr Channel target_channel(Task t) {
  return t == Task::op_pol ? Channel::voltage : Channel::current_density;
}

struct NormStats {
  std::array<double, kChannels> mean{0.0, 0.0};
  std::array<double, kChannels> std{1.0, 1.0};

  double normalize(double x, Channel c) const {
    const auto i = static_cast<std::size_t>(c);
    return (x - mean[i]) / std[i];
  }
  double denormalize(double z, Channel c) const {
    const auto i = static_cast<std::size_t>(c);
    return z * std[i] + mean[i];
  }
};

Json to_json(const NormStats& s);
NormStats norm_stats_from_json(const Json& j);

struct SplitPlan {
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> val;

  bool is_val(std::uint64_t checkpoint) const;
};

/// Every third checkpoint (1-based positions 3, 6, ...) goes to validation.
SplitPlan split_checkpoints(std::span<const std::uint64_t> checkpoints);

/// Population mean/std per channel over all samples of the given segments,
/// std floored at 1e-6.
NormStats fit_norm_stats(std::span<const cellsim::OperationalRecord* const> segments);

/// Interleaved [t][channel] window of physical values, normalized.
std::vector<float> normalize_window(const cellsim::TimeSeries& s, std::size_t offset,
                                    std::size_t length, const NormStats& stats);

/// In place, per channel, on an interleaved [t][channel] sequence.
void normalize(std::span<double> seq, const NormStats& stats);
void denormalize(std::span<double> seq, const NormStats& stats);

struct PairedSample {
  Task task = Task::op_pol;
  std::vector<float> x_enc;  // [kWindow][kChannels], normalized
  std::vector<float> x_dec;  // [kWindow][kChannels], non-input channel zero
  std::vector<float> y;      // [kWindow], target channel, zero beyond valid_len
  std::uint32_t valid_len = kWindow;
  std::uint64_t cycle_index = 0;    // checkpoint N_i the sample belongs to
  std::uint64_t window_offset = 0;  // encoder window start within its segment
  std::uint64_t dec_offset = 0;     // decoder window start within its record
};

struct SplitSamples {
  std::vector<PairedSample> train;
  std::vector<PairedSample> val;
};

struct PairOptions {
  std::size_t windows = 4;  // encoder windows per checkpoint (or per segment for OP-OP)
  std::uint64_t seed = 0;
};

/// Encoder-window offsets: seeded uniform draws for training, evenly spaced
/// (always ending at the last window) for validation.
std::vector<std::uint64_t> window_offsets(std::size_t record_len, std::size_t count, bool random,
                                          std::uint64_t seed);

SplitSamples make_op_pol_pairs(const cellsim::RunDataset& run, const SplitPlan& plan,
                               const NormStats& stats, const PairOptions& opts);
SplitSamples make_op_op_pairs(const cellsim::RunDataset& run, const SplitPlan& plan,
                              const NormStats& stats, const PairOptions& opts);

/// Decoder windows tiling a record of `total` samples with stride kWindow:
/// (start, valid length) pairs; the last window may be partial.
std::vector<std::pair<std::size_t, std::size_t>> tile_windows(std::size_t total);

// Shards: one binary file per (split, task). See docs/FORMATS.md.
struct ShardHeader {
  std::uint32_t version = 1;
  std::uint32_t window = kWindow;
  std::uint32_t channels = kChannels;
  Task task = Task::op_pol;
  bool validation = false;
  NormStats stats;
};

void write_shard(const std::filesystem::path& path, const ShardHeader& header,
                 std::span<const PairedSample> samples);
std::vector<PairedSample> read_shard(const std::filesystem::path& path, ShardHeader* header = nullptr);

/// All four shards of a prepared run plus the metadata needed downstream.
struct PreparedData {
  NormStats stats;
  SplitPlan plan;
  SplitSamples op_pol;
  SplitSamples op_op;
  Json experiment;  // carried through from the run manifest
  std::string run_dir;
};

struct PrepareOptions {
  std::size_t windows_per_pair = 4;
  std::size_t windows_per_segment = 4;
  std::uint64_t seed = 0;
};

PreparedData prepare(const cellsim::RunDataset& run, const PrepareOptions& opts);
void write_prepared(const PreparedData& data, const std::filesystem::path& dir);
PreparedData read_prepared(const std::filesystem::path& dir);

}  // namespace pemvc::datapipe
