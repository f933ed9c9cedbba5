#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pemvc/checkpoint.hpp"
#include "pemvc/datapipe.hpp"
#include "pemvc/json_util.hpp"
#include "pemvc/model.hpp"

namespace pemvc::training {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  double lr = 1e-4;
  /// Fraction of OP-OP samples per epoch; unset = use every sample of both tasks.
  std::optional<double> mix_ratio;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  double plateau_factor = 0.5;
  int plateau_patience = 5;
  double min_lr = 1e-6;

  void validate() const;
};

Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j, const std::string& path);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;  // optimizer steps so far
  double train_loss = 0;
  double train_op_pol = 0;
  double train_op_op = 0;
  double val_op_pol = 0;  // NaN when not evaluated this epoch
  double val_op_op = 0;
  double lr = 0;
  double wall_s = 0;
  bool best = false;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

/// Deterministic columns only; wall-clock goes to write_timing.
void write_history(const std::filesystem::path& path, const TrainHistory& history);
void write_timing(const std::filesystem::path& path, const TrainHistory& history);

struct TrainResult {
  nn::Checkpoint best;  // lowest validation OP-POL loss
  nn::Checkpoint last;  // final parameters with Adam state
  TrainHistory history;
  std::size_t best_epoch = 0;
};

/// Mixed-objective training. Each batch is single-task; OP-POL and OP-OP
/// batches are interleaved in a seeded order. Throws NumericalError on a
/// non-finite loss and DataError on empty inputs.
TrainResult train(const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                  const datapipe::PreparedData& data, std::ostream* log = nullptr);

struct TaskError {
  double normalized = 0;
  double physical = 0;
  std::size_t samples = 0;
  std::size_t positions = 0;
};

/// Keys: "op_op" and "op_pol".
using EvalReport = std::map<std::string, TaskError>;

/// Masked per-timestep MSE per task. Runs without recording a graph and
/// never touches parameters.
EvalReport evaluate(model::Transformer<float>& model, std::span<const datapipe::PairedSample> op_pol,
                    std::span<const datapipe::PairedSample> op_op, const datapipe::NormStats& stats);

/// Masked MSE of a single task in normalized units.
double task_mse(model::Transformer<float>& model, std::span<const datapipe::PairedSample> samples);

/// Builds a model from a checkpoint, validating the stored config hash.
model::Transformer<float> load_model(const nn::Checkpoint& ckpt);
model::ModelConfig checkpoint_model_config(const nn::Checkpoint& ckpt);
datapipe::NormStats checkpoint_norm_stats(const nn::Checkpoint& ckpt);

/// Converts one sample's arrays into model input tensors.
nn::Tensor<float> as_sequence(const std::vector<float>& values, std::size_t channels);
nn::Tensor<float> validity_mask(const datapipe::PairedSample& s);

}  // namespace pemvc::training
