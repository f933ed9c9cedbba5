#include <fstream>

#include "pemvc/cellsim.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/text.hpp"

namespace pemvc::cellsim {
namespace {

constexpr int kRunFormatVersion = 1;

std::string pol_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pol_%03zu.csv", i);
  return buf;
}

std::string segment_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seg_%03zu.csv", i);
  return buf;
}

void write_series(const std::filesystem::path& path, const TimeSeries& s) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "t_s,current_A_cm2,voltage_V\n";
  std::string line;
  for (std::size_t k = 0; k < s.size(); ++k) {
    line.clear();
    line += format_double(static_cast<double>(k) / s.sample_hz);
    line += ',';
    line += format_double(s.current[k]);
    line += ',';
    line += format_double(s.voltage[k]);
    line += '\n';
    out << line;
  }
  if (!out) throw DataError("write failed: " + path.string());
}

TimeSeries read_series(const std::filesystem::path& path, double sample_hz) {
  CsvTable t = read_numeric_csv(path.string());
  if (t.header != std::vector<std::string>{"t_s", "current_A_cm2", "voltage_V"}) {
    throw DataError(path.string() + ": unexpected header");
  }
  TimeSeries s;
  s.sample_hz = sample_hz;
  s.current = std::move(t.columns[1]);
  s.voltage = std::move(t.columns[2]);
  return s;
}

}  // namespace

Json to_json(const CellParams& p) {
  return Json{{"e_ocv", p.e_ocv},       {"tafel_a", p.tafel_a}, {"j0", p.j0},
              {"r_ohm", p.r_ohm},       {"j_lim", p.j_lim},     {"c_mt", p.c_mt},
              {"tau", p.tau},           {"noise_sigma_v", p.noise_sigma_v},
              {"noise_sigma_j", p.noise_sigma_j}};
}

Json to_json(const DegradationRates& r) { return Json{{"k_r", r.k_r}, {"k_j", r.k_j}}; }

Json to_json(const LoadProfile& p) {
  return Json{{"kind", to_string(p.kind)},
              {"v_low", p.v_low},
              {"v_high", p.v_high},
              {"hold_s", p.hold_s},
              {"cycle_count", p.cycle_count}};
}

Json to_json(const PolProtocol& p) {
  return Json{{"levels", p.levels},
              {"hold_s", p.hold_s},
              {"sample_hz", p.sample_hz},
              {"steady_window_s", p.steady_window_s}};
}

Json to_json(const RunConfig& c) {
  return Json{{"name", c.name},
              {"seed", c.seed},
              {"cell", to_json(c.cell)},
              {"degradation", to_json(c.rates)},
              {"profile", to_json(c.profile)},
              {"protocol", to_json(c.protocol)},
              {"checkpoints", c.checkpoints}};
}

CellParams cell_params_from_json(const Json& j, const std::string& path) {
  JsonFields f(j, path,
               {"e_ocv", "tafel_a", "j0", "r_ohm", "j_lim", "c_mt", "tau", "noise_sigma_v",
                "noise_sigma_j"});
  CellParams p;
  f.get("e_ocv", p.e_ocv);
  f.get("tafel_a", p.tafel_a);
  f.get("j0", p.j0);
  f.get("r_ohm", p.r_ohm);
  f.get("j_lim", p.j_lim);
  f.get("c_mt", p.c_mt);
  f.get("tau", p.tau);
  f.get("noise_sigma_v", p.noise_sigma_v);
  f.get("noise_sigma_j", p.noise_sigma_j);
  return p;
}

DegradationRates rates_from_json(const Json& j, const std::string& path) {
  JsonFields f(j, path, {"k_r", "k_j"});
  DegradationRates r;
  f.get("k_r", r.k_r);
  f.get("k_j", r.k_j);
  return r;
}

LoadProfile load_profile_from_json(const Json& j, const std::string& path) {
  JsonFields f(j, path, {"kind", "v_low", "v_high", "hold_s", "cycle_count"});
  LoadProfile p;
  if (f.has("kind")) {
    p.kind = profile_kind_from_string(f.require<std::string>("kind"));
    if (p.kind == ProfileKind::on_off) {
      p.v_low = 0.0;
      p.v_high = 2.0;
    }
  }
  f.get("v_low", p.v_low);
  f.get("v_high", p.v_high);
  f.get("hold_s", p.hold_s);
  f.get("cycle_count", p.cycle_count);
  return p;
}

PolProtocol protocol_from_json(const Json& j, const std::string& path) {
  JsonFields f(j, path, {"levels", "hold_s", "sample_hz", "steady_window_s"});
  PolProtocol p = PolProtocol::standard();
  f.get("levels", p.levels);
  f.get("hold_s", p.hold_s);
  f.get("sample_hz", p.sample_hz);
  f.get("steady_window_s", p.steady_window_s);
  return p;
}

RunConfig run_config_from_json(const Json& j, const std::string& path) {
  JsonFields f(j, path, {"name", "seed", "cell", "degradation", "profile", "protocol", "checkpoints"});
  RunConfig c;
  f.get("name", c.name);
  f.get("seed", c.seed);
  if (f.has("cell")) c.cell = cell_params_from_json(f.at("cell"), f.child("cell"));
  if (f.has("degradation")) c.rates = rates_from_json(f.at("degradation"), f.child("degradation"));
  if (f.has("profile")) c.profile = load_profile_from_json(f.at("profile"), f.child("profile"));
  if (f.has("protocol")) c.protocol = protocol_from_json(f.at("protocol"), f.child("protocol"));
  f.get("checkpoints", c.checkpoints);
  return c;
}

void write_run(const RunDataset& run, const std::filesystem::path& dir, const Json& extra) {
  std::filesystem::create_directories(dir);
  Json files = Json::array();
  for (std::size_t i = 0; i < run.pol_tests.size(); ++i) {
    write_series(dir / pol_file(i), run.pol_tests[i].series);
    Json entry{{"kind", "pol"}, {"file", pol_file(i)}, {"cycle_index", run.pol_tests[i].cycle_index},
               {"samples", run.pol_tests[i].series.size()}};
    files.push_back(entry);
    if (i < run.segments.size()) {
      const auto& seg = run.segments[i];
      write_series(dir / segment_file(i + 1), seg.series);
      files.push_back(Json{{"kind", "segment"},
                           {"file", segment_file(i + 1)},
                           {"first_cycle", seg.first_cycle},
                           {"last_cycle", seg.last_cycle},
                           {"samples", seg.series.size()}});
    }
  }
  Json states = Json::array();
  for (const auto& s : run.states) {
    states.push_back(Json{{"cycles", s.cycles}, {"r_ohm", s.params.r_ohm}, {"j0", s.params.j0}});
  }
  Json manifest{{"format", "pemvc-run"},
                {"version", kRunFormatVersion},
                {"config", to_json(run.config)},
                {"files", files},
                {"states", states}};
  if (!extra.is_null()) manifest["experiment"] = extra;
  write_json_file(dir / "manifest.json", manifest);
}

Json read_run_manifest(const std::filesystem::path& dir) {
  Json m = read_json_file(dir / "manifest.json");
  if (m.value("format", "") != "pemvc-run") throw DataError(dir.string() + ": not a run directory");
  if (m.value("version", 0) != kRunFormatVersion) {
    throw DataError(dir.string() + ": unsupported run format version");
  }
  return m;
}

RunDataset read_run(const std::filesystem::path& dir) {
  const Json m = read_run_manifest(dir);
  RunDataset run;
  run.config = run_config_from_json(m.at("config"), "manifest.config");
  run.config.validate();
  const double hz = run.config.protocol.sample_hz;
  CellState state = CellState::beginning_of_life(run.config.cell, run.config.rates);
  for (const auto& entry : m.at("files")) {
    const std::string kind = entry.at("kind").get<std::string>();
    TimeSeries s = read_series(dir / entry.at("file").get<std::string>(), hz);
    if (s.size() != entry.at("samples").get<std::size_t>()) {
      throw DataError(dir.string() + ": sample count mismatch in " + entry.at("file").get<std::string>());
    }
    if (kind == "pol") {
      PolRecord rec{std::move(s), entry.at("cycle_index").get<std::uint64_t>()};
      run.states.push_back(apply_degradation(state, rec.cycle_index - state.cycles));
      state = run.states.back();
      run.pol_tests.push_back(std::move(rec));
    } else if (kind == "segment") {
      run.segments.push_back(OperationalRecord{std::move(s), entry.at("first_cycle").get<std::uint64_t>(),
                                               entry.at("last_cycle").get<std::uint64_t>()});
    } else {
      throw DataError(dir.string() + ": unknown record kind '" + kind + "'");
    }
  }
  if (run.pol_tests.size() != run.config.checkpoints.size() + 1 ||
      run.segments.size() != run.config.checkpoints.size()) {
    throw DataError(dir.string() + ": record count does not match checkpoints");
  }
  return run;
}

}  // namespace pemvc::cellsim
