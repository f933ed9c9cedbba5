#pragma once

// Experiment configuration and the workflow stages behind the command line.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "pemvc/cellsim.hpp"
#include "pemvc/datapipe.hpp"
#include "pemvc/json_util.hpp"
#include "pemvc/model.hpp"
#include "pemvc/training.hpp"

namespace pemvc::cli {

/// Checkpoint placement applied to runs that list no explicit checkpoints.
struct CheckpointSchedule {
  std::size_t count = 20;
  std::uint64_t first_gap = 100;
  double growth = 1.0;  // 1 = evenly spaced
};

/// One file describing a whole experiment. Every run inherits the shared
/// protocol and schedule unless it sets its own.
struct ExperimentSpec {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output = "out";
  std::vector<cellsim::RunConfig> runs;
  datapipe::PrepareOptions data;
  model::ModelConfig model;
  training::TrainConfig train;
  std::vector<std::string> variants{"patch", "vanilla"};
  double j_ref = 2.0;

  void validate() const;
};

/// `overrides` are `a.b.c=value` strings; values parse as JSON, else as text.
ExperimentSpec parse_experiment(const Json& j, const std::vector<std::string>& overrides = {});
ExperimentSpec load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
Json to_json(const ExperimentSpec& s);

/// Resolved per-run settings stored in the run manifest for later stages.
struct RunPlan {
  std::string experiment;
  datapipe::PrepareOptions data;
  model::ModelConfig model;
  training::TrainConfig train;
  double j_ref = 2.0;
};

RunPlan plan_for_run(const ExperimentSpec& spec, std::size_t run_index);
Json to_json(const RunPlan& p);
RunPlan run_plan_from_json(const Json& j);

/// Model config for a named variant ("patch" or "vanilla").
model::ModelConfig variant_config(const model::ModelConfig& base, const std::string& variant);

// Stages. Each reads only its inputs and overwrites its output directory.
void stage_simulate(const ExperimentSpec& spec, std::size_t run_index, const std::filesystem::path& out);
void stage_prepare(const std::filesystem::path& run_dir, const std::filesystem::path& out);

struct TrainOutputs {
  training::TrainResult result;
  std::filesystem::path best_ckpt;
};
TrainOutputs stage_train(const std::filesystem::path& data_dir, const std::string& variant,
                         const std::filesystem::path& out, std::ostream* log,
                         const std::vector<std::string>& overrides = {});

/// Per-task MSE for both splits plus validation curve errors. Writes
/// eval.json and eval.md into `report_dir`; returns the JSON.
Json stage_eval(const std::filesystem::path& data_dir, const std::filesystem::path& ckpt,
                const std::filesystem::path& report_dir);

/// `k` is the 1-based checkpoint position within the run.
Json stage_predict_pol(const std::filesystem::path& run_dir, const std::filesystem::path& ckpt, std::size_t k,
                       const std::filesystem::path& out);

/// Simulates, prepares, trains every variant on every run, and writes the
/// combined report (report.json, report.md) under spec.output. With
/// `resume`, stages whose outputs already exist are loaded instead of rerun.
Json reproduce(const ExperimentSpec& spec, std::ostream& log, bool resume = false);

/// Curve comparison over one run's validation checkpoints.
struct CurveSummary {
  double mse_normalized = 0;
  double mse_physical = 0;
  double mae_V = 0;
  std::vector<std::size_t> checkpoints;  // 1-based positions
};
CurveSummary validation_curves(model::Transformer<float>& model, const cellsim::RunDataset& run,
                               const datapipe::SplitPlan& plan, const datapipe::NormStats& stats);

}  // namespace pemvc::cli
