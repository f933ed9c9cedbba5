#include <fstream>
#include <map>

#include "pemvc/characterize.hpp"
#include "pemvc/checkpoint.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/experiment.hpp"
#include "pemvc/text.hpp"

namespace pemvc::cli {
namespace fs = std::filesystem;

namespace {

bool exists_all(std::initializer_list<fs::path> paths) {
  for (const auto& p : paths)
    if (!fs::exists(p)) return false;
  return true;
}

// Measured and predicted curves at every validation checkpoint.
std::vector<characterize::Characterization> validation_characterizations(model::Transformer<float>& model,
                                                                         const cellsim::RunDataset& run,
                                                                         const datapipe::SplitPlan& plan,
                                                                         const datapipe::NormStats& stats) {
  std::vector<characterize::Characterization> out;
  for (std::size_t k = 1; k <= run.config.checkpoints.size(); ++k)
    if (plan.is_val(run.config.checkpoints[k - 1]))
      out.push_back(characterize::characterize_checkpoint(model, run, k, stats));
  return out;
}

// Voltage at j_ref for the first and last validation checkpoints, decoded
// with their own latent state and with each other's. Both slots decode the
// same commanded staircase, so only Z differs between them.
Json latent_swap(model::Transformer<float>& model, const cellsim::RunDataset& run, const datapipe::SplitPlan& plan,
                 const datapipe::NormStats& stats, double j_ref) {
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k <= run.config.checkpoints.size(); ++k)
    if (plan.is_val(run.config.checkpoints[k - 1])) ks.push_back(k);
  if (ks.size() < 2) return Json();
  const std::size_t early = ks.front(), late = ks.back();
  const auto& protocol = run.config.protocol;
  const auto z_early = characterize::encode_window(model, characterize::context_window(run, early, stats));
  const auto z_late = characterize::encode_window(model, characterize::context_window(run, late, stats));
  auto v_at = [&](const nn::Tensor<float>& z) {
    const auto series = characterize::predict_with_latent(model, z, protocol, stats);
    return characterize::aggregate_curve(series, protocol).voltage_at(j_ref);
  };
  auto measured = [&](std::size_t k) {
    return characterize::aggregate_curve(run.pol_tests[k].series.voltage, protocol).voltage_at(j_ref);
  };
  const double m_e = measured(early), m_l = measured(late);
  const double own_e = v_at(z_early), own_l = v_at(z_late);
  const double sw_e = v_at(z_late), sw_l = v_at(z_early);
  // Own latents reproduce the measured order; swapped latents reverse it.
  const bool own_matches = (own_l > own_e) == (m_l > m_e);
  const bool swap_reverses = (sw_l > sw_e) != (own_l > own_e);
  return Json{{"early_checkpoint", run.config.checkpoints[early - 1]},
              {"late_checkpoint", run.config.checkpoints[late - 1]},
              {"v_measured_early_V", m_e},
              {"v_measured_late_V", m_l},
              {"v_pred_early_own_V", own_e},
              {"v_pred_late_own_V", own_l},
              {"v_pred_early_swapped_V", sw_e},
              {"v_pred_late_swapped_V", sw_l},
              {"ordering_follows_latent", own_matches && swap_reverses}};
}

std::string cell(const Json& v) { return v.is_number() ? format_sci(v.get<double>(), 3) : std::string("-"); }

void write_markdown(const fs::path& path, const Json& report, const std::vector<std::string>& variants) {
  std::ofstream md(path, std::ios::trunc);
  if (!md) throw DataError("cannot write " + path.string());
  const auto& runs = report.at("runs");
  auto header = [&] {
    md << "| model |";
    for (const auto& r : runs) md << ' ' << r.at("name").get<std::string>() << " |";
    md << "\n|---|";
    for (std::size_t i = 0; i < runs.size(); ++i) md << "---|";
    md << '\n';
  };
  auto row = [&](const std::string& variant, const char* metric) {
    md << "| " << (variant == "patch" ? "patch transformer" : "vanilla transformer") << " |";
    for (const auto& r : runs) {
      const auto& v = r.at("variants");
      md << ' ' << (v.contains(variant) ? cell(v.at(variant).at("val").at(metric).at("normalized")) : "-") << " |";
    }
    md << '\n';
  };

  md << "# " << report.at("experiment").get<std::string>() << ": prediction error (validation set)\n\n";
  md << "## AST curve prediction error\n\nPer-timestep masked MSE of the OP-OP current prediction, normalized units.\n\n";
  header();
  for (const auto& v : variants) row(v, "op_op");
  md << "\n## Polarization curve prediction error\n\nMSE of steady voltages per level over validation checkpoints, "
        "normalized units.\n\n";
  header();
  for (const auto& v : variants) row(v, "pol_curve");
  md << "\n## OP-POL per-timestep error\n\n";
  header();
  for (const auto& v : variants) row(v, "op_pol");

  md << "\n## Degradation at " << format_double(report.at("j_ref").get<double>()) << " A/cm2 (patch transformer)\n";
  for (const auto& r : runs) {
    if (!r.contains("degradation") || !r.at("degradation").contains("patch")) continue;
    const auto& d = r.at("degradation").at("patch");
    md << "\n### " << r.at("name").get<std::string>() << "\n\n| N | measured V | predicted V |\n|---|---|---|\n";
    for (const auto& row : d.at("rows"))
      md << "| " << row.at("cycle_index").get<std::uint64_t>() << " | "
         << format_fixed(row.at("v_measured_V").get<double>(), 4) << " | "
         << format_fixed(row.at("v_predicted_V").get<double>(), 4) << " |\n";
    md << "\nrank agreement " << format_fixed(d.at("rank_agreement").get<double>(), 3) << ", measured violations "
       << d.at("measured_violations").size() << ", predicted violations " << d.at("predicted_violations").size()
       << '\n';
  }
}

}  // namespace

Json reproduce(const ExperimentSpec& spec, std::ostream& log, bool resume) {
  spec.validate();
  const fs::path root(spec.output);
  fs::create_directories(root);
  write_json_file(root / "config.json", to_json(spec));

  Json runs = Json::array();
  for (std::size_t i = 0; i < spec.runs.size(); ++i) {
    const auto& rc = spec.runs[i];
    const fs::path dir = root / "runs" / rc.name;
    const fs::path run_dir = dir / "run", data_dir = dir / "data";
    log << "== " << rc.name << " (" << cellsim::to_string(rc.profile.kind) << ", " << rc.checkpoints.size()
        << " checkpoints)\n";
    if (!(resume && fs::exists(run_dir / "manifest.json"))) stage_simulate(spec, i, run_dir);
    if (!(resume && fs::exists(data_dir / "manifest.json"))) stage_prepare(run_dir, data_dir);
    const auto run = cellsim::read_run(run_dir);
    const auto data = datapipe::read_prepared(data_dir);

    Json entry{{"name", rc.name}, {"profile", cellsim::to_string(rc.profile.kind)},
               {"checkpoints", rc.checkpoints}, {"val_checkpoints", data.plan.val}};
    Json variants = Json::object(), degradation = Json::object();
    for (const auto& variant : spec.variants) {
      const fs::path vdir = dir / variant;
      if (!(resume && exists_all({vdir / "best.json", vdir / "history.csv"}))) {
        log << "-- train " << variant << '\n';
        stage_train(data_dir, variant, vdir, &log);
      }
      Json ev = stage_eval(data_dir, vdir / "best.json", vdir);
      const auto ckpt = nn::load_checkpoint(vdir / "best.json");
      auto model = training::load_model(ckpt);

      const auto items = validation_characterizations(model, run, data.plan, data.stats);
      characterize::write_curves_csv(vdir / "curves.csv", items);
      characterize::write_curves_svg(vdir / "curves.svg", items, rc.name + " " + variant + ": validation checkpoints");
      std::vector<characterize::PolarizationCurve> meas, pred;
      for (const auto& it : items) {
        meas.push_back(it.measured);
        pred.push_back(it.predicted);
      }
      degradation[variant] = characterize::to_json(characterize::degradation_report(meas, pred, spec.j_ref));

      Json v{{"parameters", ev.at("parameters")},
             {"config_hash", ev.at("config_hash")},
             {"best_epoch", ckpt.meta.value("best_epoch", std::uint64_t{0})},
             {"train", ev.at("train")},
             {"val", ev.at("val")}};
      if (variant == "patch") v["latent_swap"] = latent_swap(model, run, data.plan, data.stats, spec.j_ref);
      variants[variant] = v;
      log << "   " << variant << " val pol_curve=" << format_sci(ev["val"]["pol_curve"]["normalized"].get<double>(), 3)
          << " op_op=" << format_sci(ev["val"]["op_op"]["normalized"].get<double>(), 3) << '\n';
    }
    entry["variants"] = variants;
    entry["degradation"] = degradation;
    runs.push_back(entry);
  }

  Json report{{"format", "pemvc-report"}, {"experiment", spec.name}, {"j_ref", spec.j_ref}, {"runs", runs}};
  write_json_file(root / "report.json", report);
  write_markdown(root / "report.md", report, spec.variants);
  return report;
}

}  // namespace pemvc::cli
