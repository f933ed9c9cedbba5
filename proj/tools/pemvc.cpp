// pemvc: simulate, prepare, train, evaluate and characterize.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "pemvc/errors.hpp"
#include "pemvc/experiment.hpp"

namespace {

namespace fs = std::filesystem;
using namespace pemvc;

int report_failure(const std::string& stage, const char* kind, const std::exception& e, int code) {
  std::cerr << "pemvc " << stage << ": " << kind << ": " << e.what() << '\n';
  return code;
}

std::size_t find_run(const cli::ExperimentSpec& spec, const std::string& which) {
  if (which.empty()) return 0;
  for (std::size_t i = 0; i < spec.runs.size(); ++i)
    if (spec.runs[i].name == which) return i;
  throw ConfigError("no run named '" + which + "' in the config");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Virtual polarization characterization of PEM electrolyzer cells"};
  app.require_subcommand(1);
  std::vector<std::string> overrides;

  std::string config, out, run_name;
  auto* sim = app.add_subcommand("simulate", "generate a run dataset");
  sim->add_option("--config", config, "experiment config file")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", out, "output run directory")->required();
  sim->add_option("--run", run_name, "run name within the config (default: first)");
  sim->add_option("--set", overrides, "override a config key, e.g. train.epochs=5");

  std::string run_dir;
  auto* prep = app.add_subcommand("prepare", "build normalized shards, stats and split");
  prep->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  prep->add_option("--out", out, "output data directory")->required();

  std::string data_dir, variant = "patch";
  auto* tr = app.add_subcommand("train", "train a model on prepared data");
  tr->add_option("--data", data_dir, "prepared data directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--model", variant, "patch or vanilla")->check(CLI::IsMember({"patch", "vanilla"}));
  tr->add_option("--out", out, "output directory")->required();
  tr->add_option("--set", overrides, "override a plan key, e.g. train.epochs=5");

  std::string ckpt, report_dir;
  auto* ev = app.add_subcommand("eval", "per-task prediction error for both splits");
  ev->add_option("--data", data_dir, "prepared data directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--ckpt", ckpt, "checkpoint manifest (.json)")->required()->check(CLI::ExistingFile);
  ev->add_option("--report", report_dir, "report directory")->required();

  std::size_t index = 0;
  auto* pp = app.add_subcommand("predict-pol", "virtual polarization test at one checkpoint");
  pp->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  pp->add_option("--ckpt", ckpt, "checkpoint manifest (.json)")->required()->check(CLI::ExistingFile);
  pp->add_option("--checkpoint-index", index, "1-based checkpoint position")->required();
  pp->add_option("--out", out, "output directory")->required();

  bool resume = false;
  auto* rep = app.add_subcommand("reproduce", "end-to-end run of every stage with a combined report");
  rep->add_option("--config", config, "experiment config file")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", out, "output directory (overrides the config)");
  rep->add_option("--set", overrides, "override a config key, e.g. train.epochs=5");
  rep->add_flag("--resume", resume, "reuse stage outputs that already exist");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (sim->parsed()) {
      const auto spec = cli::load_experiment(config, overrides);
      cli::stage_simulate(spec, find_run(spec, run_name), out);
      std::cout << "wrote " << out << '\n';
    } else if (prep->parsed()) {
      cli::stage_prepare(run_dir, out);
      std::cout << "wrote " << out << '\n';
    } else if (tr->parsed()) {
      const auto o = cli::stage_train(data_dir, variant, out, &std::cout, overrides);
      std::cout << "best epoch " << o.result.best_epoch << ", checkpoint " << o.best_ckpt.string() << '\n';
    } else if (ev->parsed()) {
      const auto r = cli::stage_eval(data_dir, ckpt, report_dir);
      std::cout << r.dump(2) << '\n';
    } else if (pp->parsed()) {
      const auto r = cli::stage_predict_pol(run_dir, ckpt, index, out);
      std::cout << r.dump(2) << '\n';
    } else if (rep->parsed()) {
      if (!out.empty()) overrides.push_back("output=\"" + out + "\"");
      const auto spec = cli::load_experiment(config, overrides);
      cli::reproduce(spec, std::cout, resume);
      std::cout << "report: " << (fs::path(spec.output) / "report.md").string() << '\n';
    }
  } catch (const ConfigError& e) {
    return report_failure(stage, "config error", e, 2);
  } catch (const NumericalError& e) {
    return report_failure(stage, "numerical abort", e, 4);
  } catch (const DataError& e) {
    return report_failure(stage, "data error", e, 3);
  } catch (const ShapeError& e) {
    return report_failure(stage, "data error", e, 3);
  } catch (const DomainError& e) {
    return report_failure(stage, "data error", e, 3);
  } catch (const fs::filesystem_error& e) {
    return report_failure(stage, "data error", e, 3);
  } catch (const nlohmann::json::exception& e) {
    return report_failure(stage, "data error", e, 3);
  }
  return 0;
}
