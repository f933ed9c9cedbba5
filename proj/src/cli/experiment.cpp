#include "pemvc/experiment.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "pemvc/characterize.hpp"
#include "pemvc/checkpoint.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/text.hpp"

namespace pemvc::cli {
namespace fs = std::filesystem;

namespace {

Json prepare_options_json(const datapipe::PrepareOptions& o) {
  return Json{{"windows_per_pair", o.windows_per_pair},
              {"windows_per_segment", o.windows_per_segment},
              {"seed", o.seed}};
}

datapipe::PrepareOptions prepare_options_from_json(const Json& j, const std::string& path) {
  JsonFields f(j, path, {"windows_per_pair", "windows_per_segment", "seed"});
  datapipe::PrepareOptions o;
  f.get("windows_per_pair", o.windows_per_pair);
  f.get("windows_per_segment", o.windows_per_segment);
  f.get("seed", o.seed);
  if (o.windows_per_pair < 1 || o.windows_per_segment < 1) throw ConfigError(path + ": window counts must be >= 1");
  return o;
}

// Applies one `a.b.c=value` override in place.
void apply_override(Json& root, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "' is not key=value");
  const std::string key = item.substr(0, eq);
  const std::string text = item.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  Json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + item + "' has an empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

}  // namespace

void ExperimentSpec::validate() const {
  if (name.empty()) throw ConfigError("experiment name is empty");
  if (runs.empty()) throw ConfigError("experiment lists no runs");
  for (std::size_t i = 0; i < runs.size(); ++i) {
    runs[i].validate();
    for (std::size_t k = 0; k < i; ++k)
      if (runs[k].name == runs[i].name) throw ConfigError("duplicate run name '" + runs[i].name + "'");
  }
  model.validate();
  train.validate();
  if (variants.empty()) throw ConfigError("experiment lists no model variants");
  for (const auto& v : variants)
    if (v != "patch" && v != "vanilla") throw ConfigError("unknown model variant '" + v + "'");
  if (!(j_ref > 0)) throw ConfigError("j_ref must be positive");
}

ExperimentSpec parse_experiment(const Json& input, const std::vector<std::string>& overrides) {
  Json j = input;
  for (const auto& o : overrides) apply_override(j, o);
  JsonFields f(j, "config",
               {"name", "seed", "output", "protocol", "schedule", "runs", "data", "model", "train", "variants",
                "j_ref"});
  ExperimentSpec s;
  f.get("name", s.name);
  f.get("seed", s.seed);
  f.get("output", s.output);
  f.get("variants", s.variants);
  f.get("j_ref", s.j_ref);

  CheckpointSchedule sched;
  if (f.has("schedule")) {
    JsonFields sf(f.at("schedule"), f.child("schedule"), {"count", "first_gap", "growth"});
    sf.get("count", sched.count);
    sf.get("first_gap", sched.first_gap);
    sf.get("growth", sched.growth);
    if (sched.count < 1 || sched.first_gap < 1 || !(sched.growth >= 1.0))
      throw ConfigError("config.schedule: count >= 1, first_gap >= 1 and growth >= 1 required");
  }
  const std::vector<std::uint64_t> default_checkpoints =
      cellsim::growing_checkpoints(sched.count, sched.first_gap, sched.growth);

  const Json shared_protocol = f.has("protocol") ? f.at("protocol") : Json();
  if (!f.has("runs") || !f.at("runs").is_array()) throw ConfigError("config.runs must be an array");
  const Json& runs = f.at("runs");
  for (std::size_t i = 0; i < runs.size(); ++i) {
    Json r = runs[i];
    if (!r.is_object()) throw ConfigError("config.runs[" + std::to_string(i) + "] must be an object");
    if (!r.contains("protocol") && !shared_protocol.is_null()) r["protocol"] = shared_protocol;
    auto rc = cellsim::run_config_from_json(r, "config.runs[" + std::to_string(i) + "]");
    if (!r.contains("checkpoints")) rc.checkpoints = default_checkpoints;
    if (!r.contains("seed")) rc.seed = cellsim::derive_seed(s.seed, i + 1);
    if (!r.contains("name")) rc.name = "run" + std::to_string(i + 1);
    s.runs.push_back(std::move(rc));
  }
  if (f.has("data")) s.data = prepare_options_from_json(f.at("data"), f.child("data"));
  if (f.has("model")) s.model = model::model_config_from_json(f.at("model"), f.child("model"));
  if (f.has("train")) s.train = training::train_config_from_json(f.at("train"), f.child("train"));
  s.validate();
  return s;
}

ExperimentSpec load_experiment(const fs::path& path, const std::vector<std::string>& overrides) {
  Json j;
  try {
    j = read_json_file(path);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment(j, overrides);
}

Json to_json(const ExperimentSpec& s) {
  Json runs = Json::array();
  for (const auto& r : s.runs) runs.push_back(cellsim::to_json(r));
  return Json{{"name", s.name},
              {"seed", s.seed},
              {"output", s.output},
              {"runs", runs},
              {"data", prepare_options_json(s.data)},
              {"model", model::to_json(s.model)},
              {"train", training::to_json(s.train)},
              {"variants", s.variants},
              {"j_ref", s.j_ref}};
}

RunPlan plan_for_run(const ExperimentSpec& spec, std::size_t run_index) {
  if (run_index >= spec.runs.size()) throw ConfigError("run index out of range");
  const std::uint64_t rs = spec.runs[run_index].seed;
  RunPlan p;
  p.experiment = spec.name;
  p.data = spec.data;
  p.data.seed = cellsim::derive_seed(rs, 7);
  p.model = spec.model;
  p.model.init_seed = cellsim::derive_seed(rs, 8);
  p.train = spec.train;
  p.train.seed = cellsim::derive_seed(rs, 9);
  p.j_ref = spec.j_ref;
  return p;
}

Json to_json(const RunPlan& p) {
  return Json{{"experiment", p.experiment},
              {"data", prepare_options_json(p.data)},
              {"model", model::to_json(p.model)},
              {"train", training::to_json(p.train)},
              {"j_ref", p.j_ref}};
}

RunPlan run_plan_from_json(const Json& j) {
  if (!j.is_object()) throw DataError("run manifest carries no experiment plan");
  JsonFields f(j, "experiment", {"experiment", "data", "model", "train", "j_ref"});
  RunPlan p;
  f.get("experiment", p.experiment);
  if (f.has("data")) p.data = prepare_options_from_json(f.at("data"), f.child("data"));
  if (f.has("model")) p.model = model::model_config_from_json(f.at("model"), f.child("model"));
  if (f.has("train")) p.train = training::train_config_from_json(f.at("train"), f.child("train"));
  f.get("j_ref", p.j_ref);
  return p;
}

model::ModelConfig variant_config(const model::ModelConfig& base, const std::string& variant) {
  model::ModelConfig c = base;
  if (variant == "patch") {
    c.baseline = false;
  } else if (variant == "vanilla") {
    c.baseline = true;
    c.init_seed = cellsim::derive_seed(base.init_seed, 1);
  } else {
    throw ConfigError("unknown model variant '" + variant + "' (expected patch or vanilla)");
  }
  c.validate();
  return c;
}

void stage_simulate(const ExperimentSpec& spec, std::size_t run_index, const fs::path& out) {
  const auto& rc = spec.runs.at(run_index);
  const auto run = cellsim::generate_run(rc);
  cellsim::write_run(run, out, to_json(plan_for_run(spec, run_index)));
}

void stage_prepare(const fs::path& run_dir, const fs::path& out) {
  const auto run = cellsim::read_run(run_dir);
  const Json manifest = cellsim::read_run_manifest(run_dir);
  RunPlan plan;
  if (manifest.contains("experiment")) plan = run_plan_from_json(manifest.at("experiment"));
  auto data = datapipe::prepare(run, plan.data);
  data.experiment = manifest.value("experiment", Json());
  fs::create_directories(out);
  data.run_dir = fs::relative(fs::absolute(run_dir), fs::absolute(out)).generic_string();
  datapipe::write_prepared(data, out);
}

namespace {

fs::path resolve_run_dir(const fs::path& data_dir, const datapipe::PreparedData& data) {
  if (data.run_dir.empty()) throw DataError(data_dir.string() + ": prepared data does not name its run");
  fs::path p(data.run_dir);
  return p.is_absolute() ? p : (data_dir / p).lexically_normal();
}

}  // namespace

TrainOutputs stage_train(const fs::path& data_dir, const std::string& variant, const fs::path& out,
                         std::ostream* log, const std::vector<std::string>& overrides) {
  const auto data = datapipe::read_prepared(data_dir);
  Json plan_json = data.experiment.is_null() ? to_json(RunPlan{}) : data.experiment;
  for (const auto& o : overrides) apply_override(plan_json, o);
  const RunPlan plan = run_plan_from_json(plan_json);
  const auto mc = variant_config(plan.model, variant);
  plan.train.validate();

  TrainOutputs o;
  o.result = training::train(mc, plan.train, data, log);
  fs::create_directories(out);
  o.best_ckpt = out / "best.json";
  auto best = o.result.best;
  best.meta["variant"] = variant;
  best.meta["best_epoch"] = o.result.best_epoch;
  nn::save_checkpoint(o.best_ckpt, best);
  auto last = o.result.last;
  last.meta["variant"] = variant;
  nn::save_checkpoint(out / "last.json", last);
  training::write_history(out / "history.csv", o.result.history);
  training::write_timing(out / "timing.csv", o.result.history);
  return o;
}

CurveSummary validation_curves(model::Transformer<float>& model, const cellsim::RunDataset& run,
                               const datapipe::SplitPlan& plan, const datapipe::NormStats& stats) {
  CurveSummary s;
  for (std::size_t k = 1; k <= run.config.checkpoints.size(); ++k) {
    if (!plan.is_val(run.config.checkpoints[k - 1])) continue;
    const auto c = characterize::characterize_checkpoint(model, run, k, stats);
    const auto e = characterize::curve_mse(c.predicted, c.measured, stats);
    s.mse_normalized += e.normalized;
    s.mse_physical += e.physical;
    s.mae_V += characterize::curve_mae(c.predicted, c.measured);
    s.checkpoints.push_back(k);
  }
  if (s.checkpoints.empty()) throw DataError("run has no validation checkpoints");
  const double n = static_cast<double>(s.checkpoints.size());
  s.mse_normalized /= n;
  s.mse_physical /= n;
  s.mae_V /= n;
  return s;
}

namespace {

Json task_error_json(const training::TaskError& e) {
  return Json{{"normalized", e.normalized}, {"physical", e.physical}, {"samples", e.samples},
              {"positions", e.positions}};
}

}  // namespace

Json stage_eval(const fs::path& data_dir, const fs::path& ckpt_path, const fs::path& report_dir) {
  const auto data = datapipe::read_prepared(data_dir);
  const auto ckpt = nn::load_checkpoint(ckpt_path);
  auto model = training::load_model(ckpt);
  const auto ck_stats = training::checkpoint_norm_stats(ckpt);
  if (ck_stats.mean != data.stats.mean || ck_stats.std != data.stats.std)
    throw DataError("checkpoint was trained with different normalization than " + data_dir.string());
  if (!data.experiment.is_null()) {
    const auto plan = run_plan_from_json(data.experiment);
    const auto expect = variant_config(plan.model, model.config().baseline ? "vanilla" : "patch");
    if (model::config_hash(expect) != model::config_hash(model.config()))
      throw DataError("checkpoint config hash " + model::config_hash(model.config()) +
                      " does not match the experiment's model config (" + model::config_hash(expect) + ")");
  }

  Json report{{"checkpoint", ckpt_path.filename().string()},
              {"variant", model.config().baseline ? "vanilla" : "patch"},
              {"config_hash", model::config_hash(model.config())},
              {"parameters", model.parameter_count()}};
  for (const char* split : {"train", "val"}) {
    const bool val = std::string(split) == "val";
    const auto& pol = val ? data.op_pol.val : data.op_pol.train;
    const auto& op = val ? data.op_op.val : data.op_op.train;
    const auto r = training::evaluate(model, pol, op, data.stats);
    report[split] = Json{{"op_op", task_error_json(r.at("op_op"))}, {"op_pol", task_error_json(r.at("op_pol"))}};
  }
  const auto run = cellsim::read_run(resolve_run_dir(data_dir, data));
  const auto curves = validation_curves(model, run, data.plan, data.stats);
  report["val"]["pol_curve"] = Json{{"normalized", curves.mse_normalized},
                                    {"physical", curves.mse_physical},
                                    {"mae_V", curves.mae_V},
                                    {"checkpoints", curves.checkpoints}};

  fs::create_directories(report_dir);
  write_json_file(report_dir / "eval.json", report);
  std::ofstream md(report_dir / "eval.md", std::ios::trunc);
  md << "# Prediction error (" << report["variant"].get<std::string>() << ")\n\n";
  md << "| split | task | MSE (normalized) | MSE (physical) |\n|---|---|---|---|\n";
  for (const char* split : {"train", "val"}) {
    for (const char* task : {"op_op", "op_pol"}) {
      md << "| " << split << " | " << task << " | " << format_sci(report[split][task]["normalized"].get<double>(), 4)
         << " | " << format_sci(report[split][task]["physical"].get<double>(), 4) << " |\n";
    }
  }
  md << "| val | pol_curve | " << format_sci(curves.mse_normalized, 4) << " | " << format_sci(curves.mse_physical, 4)
     << " |\n";
  md << "\nOP-OP is per-timestep masked MSE of current density (physical unit A^2/cm^4); OP-POL is per-timestep "
        "masked MSE of voltage (V^2); pol_curve is the MSE of steady voltages per level (V^2).\n";
  return report;
}

Json stage_predict_pol(const fs::path& run_dir, const fs::path& ckpt_path, std::size_t k, const fs::path& out) {
  const auto run = cellsim::read_run(run_dir);
  const auto ckpt = nn::load_checkpoint(ckpt_path);
  auto model = training::load_model(ckpt);
  const auto stats = training::checkpoint_norm_stats(ckpt);
  const auto c = characterize::characterize_checkpoint(model, run, k, stats);

  fs::create_directories(out);
  const std::vector<characterize::Characterization> items{c};
  characterize::write_curves_csv(out / "curves.csv", items);
  characterize::write_curves_svg(out / "curves.svg", items,
                                 run.config.name + ": polarization at N = " + std::to_string(c.measured.cycle_index));
  {
    std::ofstream ts(out / "prediction.csv", std::ios::trunc);
    if (!ts) throw DataError("cannot write prediction.csv");
    ts << "t_s,current_A_cm2,v_pred_V,v_meas_V\n";
    const auto& pol = run.pol_tests.at(k).series;
    for (std::size_t t = 0; t < c.predicted_series.size(); ++t)
      ts << format_fixed(static_cast<double>(t) / pol.sample_hz, 1) << ',' << format_double(pol.current[t]) << ','
         << format_fixed(c.predicted_series[t], 6) << ',' << format_fixed(pol.voltage[t], 6) << '\n';
  }
  const auto e = characterize::curve_mse(c.predicted, c.measured, stats);
  Json summary{{"run", run.config.name},
               {"checkpoint_index", k},
               {"cycle_index", c.measured.cycle_index},
               {"curve_mse_physical", e.physical},
               {"curve_mse_normalized", e.normalized},
               {"curve_mae_V", characterize::curve_mae(c.predicted, c.measured)}};
  write_json_file(out / "summary.json", summary);
  return summary;
}

}  // namespace pemvc::cli
