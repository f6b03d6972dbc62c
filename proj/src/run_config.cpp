#include "pnr/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <ostream>
#include <string_view>

#include <json.hpp>

namespace pnr {

namespace {

using nlohmann::json;

[[noreturn]] void config_error(const std::string& what) { fail(ErrorCategory::invalid_argument, what); }

// Rejects keys of `j` outside `allowed`; `where` names the enclosing object.
void check_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) config_error(std::string(where) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (auto a : allowed) known |= key == a;
    if (!known) config_error("unknown key '" + std::string(where) + "." + key + "'");
  }
}

template <class T>
void read_if(const json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    config_error("key '" + std::string(where) + "." + key + "' has the wrong type");
  }
}

template <std::size_t K>
void read_array(const json& j, const char* key, std::array<double, K>& out, std::string_view where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (v.is_number()) {
    out.fill(v.get<double>());
    return;
  }
  std::vector<double> values;
  read_if(j, key, values, where);
  if (values.size() != K)
    config_error("key '" + std::string(where) + "." + key + "' needs " + std::to_string(K) + " values");
  std::copy(values.begin(), values.end(), out.begin());
}

void read_detector(const json& j, RunConfig& c) {
  auto& d = c.detector;
  check_keys(j, "detector",
             {"temporal_stages", "spatial_stages", "bin_efficiency", "dark_rate_hz", "blinding", "n_cap",
              "temporal_spacing_ps", "coincidence_window_ps", "rep_rate_hz", "trigger_offset_ps", "timing_family",
              "timing_models_file"});
  read_array(j, "temporal_stages", d.temporal_stages, "detector");
  read_array(j, "spatial_stages", d.spatial_stages, "detector");
  read_array(j, "dark_rate_hz", d.dark_rate_hz, "detector");
  if (j.contains("bin_efficiency")) {
    const auto& v = j.at("bin_efficiency");
    if (v.is_number()) {
      d.bin_efficiency = BinTable<double>(v.get<double>());
    } else {
      std::vector<double> values;
      read_if(j, "bin_efficiency", values, "detector");
      if (values.size() != static_cast<std::size_t>(kBins)) config_error("detector.bin_efficiency needs 1 or 1024 values");
      d.bin_efficiency = BinTable<double>(std::move(values));
    }
  }
  if (j.contains("blinding")) {
    const auto& b = j.at("blinding");
    check_keys(b, "detector.blinding", {"form", "alpha_per_photon"});
    std::string form = d.blinding.form == BlindingForm::none ? "none" : "exponential";
    read_if(b, "form", form, "detector.blinding");
    if (form == "none") d.blinding.form = BlindingForm::none;
    else if (form == "exponential") d.blinding.form = BlindingForm::exponential;
    else config_error("detector.blinding.form must be 'none' or 'exponential'");
    read_if(b, "alpha_per_photon", d.blinding.alpha_per_photon, "detector.blinding");
  }
  read_if(j, "n_cap", d.n_cap, "detector");
  read_if(j, "temporal_spacing_ps", d.geometry.temporal_spacing_ps, "detector");
  read_if(j, "coincidence_window_ps", d.geometry.coincidence_window_ps, "detector");
  read_if(j, "rep_rate_hz", d.geometry.rep_rate_hz, "detector");
  read_if(j, "trigger_offset_ps", d.geometry.trigger_offset_ps, "detector");

  require(d.n_cap >= 1, "detector.n_cap must be >= 1");
  if (j.contains("timing_family") && j.contains("timing_models_file"))
    config_error("detector.timing_family and detector.timing_models_file are mutually exclusive");
  if (j.contains("timing_models_file")) {
    read_if(j, "timing_models_file", c.timing_models_file, "detector");
    std::ifstream in(c.timing_models_file);
    if (!in) fail(ErrorCategory::io, "cannot open timing model file '" + c.timing_models_file + "'");
    d.timing_models = read_timing_models(in);
  } else {
    auto& fam = c.timing_family;
    if (j.contains("timing_family")) {
      const auto& f = j.at("timing_family");
      check_keys(f, "detector.timing_family", {"t0_ps", "a_ps", "sigma0_ps", "tau0_ps"});
      read_if(f, "t0_ps", fam.t0_ps, "detector.timing_family");
      read_if(f, "a_ps", fam.a_ps, "detector.timing_family");
      read_if(f, "sigma0_ps", fam.sigma0_ps, "detector.timing_family");
      read_if(f, "tau0_ps", fam.tau0_ps, "detector.timing_family");
    }
    d.timing_models = BinTable<BinTimingModel>(fam.model(d.n_cap));
  }
}

void read_schedule(const json& j, RunConfig& c) {
  check_keys(j, "schedule", {"incident_means_photons", "max_mean_photons", "states"});
  if (j.contains("incident_means_photons")) {
    if (j.contains("max_mean_photons") || j.contains("states"))
      config_error("schedule takes either incident_means_photons or max_mean_photons/states");
    read_if(j, "incident_means_photons", c.incident_means, "schedule");
    return;
  }
  double max_mean = 15393.0;
  int states = 125;
  read_if(j, "max_mean_photons", max_mean, "schedule");
  read_if(j, "states", states, "schedule");
  require(states >= 2, "schedule.states must be >= 2");
  require(max_mean >= 0.0, "schedule.max_mean_photons must be >= 0");
  c.incident_means = quadratic_schedule(max_mean, states);
}

void read_paths(const json& j, RunPaths& p) {
  check_keys(j, "paths", {"tags", "truth", "models", "luts", "shots", "report", "povm", "diagnostics"});
  read_if(j, "tags", p.tags, "paths");
  read_if(j, "truth", p.truth, "paths");
  read_if(j, "models", p.models, "paths");
  read_if(j, "luts", p.luts, "paths");
  read_if(j, "shots", p.shots, "paths");
  read_if(j, "report", p.report, "paths");
  read_if(j, "povm", p.povm, "paths");
  read_if(j, "diagnostics", p.diagnostics, "paths");
}

void read_analysis(const json& j, AnalysisOptions& a) {
  check_keys(j, "analysis",
             {"lut_origin_ps", "lut_step_ps", "lut_rows", "fit_components", "fit_per_bin", "outcome_bins",
              "truncation_photons", "gamma", "max_iterations", "tolerance", "stop_window"});
  read_if(j, "lut_origin_ps", a.lut_grid.origin_ps, "analysis");
  read_if(j, "lut_step_ps", a.lut_grid.step_ps, "analysis");
  read_if(j, "lut_rows", a.lut_grid.len, "analysis");
  read_if(j, "fit_components", a.fit_components, "analysis");
  read_if(j, "fit_per_bin", a.fit_per_bin, "analysis");
  read_if(j, "outcome_bins", a.outcome_bins, "analysis");
  read_if(j, "truncation_photons", a.truncation_photons, "analysis");
  if (j.contains("gamma") && !j.at("gamma").is_null()) {
    double g = 0.0;
    read_if(j, "gamma", g, "analysis");
    a.tomography.gamma = g;
  }
  read_if(j, "max_iterations", a.tomography.max_iterations, "analysis");
  read_if(j, "tolerance", a.tomography.tolerance, "analysis");
  read_if(j, "stop_window", a.tomography.window, "analysis");
}

}  // namespace

void RunConfig::validate() const {
  detector.validate();
  require(shots_per_state >= 1, "shots_per_state must be >= 1");
  require(!incident_means.empty(), "the schedule has no input states");
  for (double m : incident_means) require(m >= 0.0 && std::isfinite(m), "incident means must be finite and >= 0");
  require(analysis.lut_grid.step_ps > 0.0 && analysis.lut_grid.len >= 1, "the LUT grid needs a positive step and rows");
  require(analysis.fit_components >= 1 && analysis.fit_components <= detector.n_cap,
          "fit_components must lie in [1, n_cap]");
  require(analysis.outcome_bins >= 1, "outcome_bins must be >= 1");
  require(analysis.truncation_photons >= 1, "truncation_photons must be >= 1");
  require(!analysis.tomography.gamma || *analysis.tomography.gamma >= 0.0, "gamma must be >= 0");
  require(analysis.tomography.tolerance > 0.0, "tolerance must be > 0");
  require(analysis.tomography.window >= 1, "stop_window must be >= 1");
}

RunConfig parse_run_config(std::istream& is) {
  json doc;
  try {
    doc = json::parse(is, nullptr, true, false);
  } catch (const json::parse_error& e) {
    config_error(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(doc, "config", {"seed", "shots_per_state", "schedule", "detector", "paths", "analysis"});
  RunConfig c;
  read_if(doc, "seed", c.seed, "config");
  read_if(doc, "shots_per_state", c.shots_per_state, "config");
  if (doc.contains("detector")) read_detector(doc.at("detector"), c);
  if (doc.contains("schedule")) read_schedule(doc.at("schedule"), c);
  if (doc.contains("paths")) read_paths(doc.at("paths"), c.paths);
  if (doc.contains("analysis")) read_analysis(doc.at("analysis"), c.analysis);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::io, "cannot open config file '" + path.string() + "'");
  return parse_run_config(in);
}

void write_run_config(std::ostream& os, const RunConfig& c) {
  const auto& d = c.detector;
  json detector{
      {"temporal_stages", d.temporal_stages},
      {"spatial_stages", d.spatial_stages},
      {"dark_rate_hz", d.dark_rate_hz},
      {"blinding",
       {{"form", d.blinding.form == BlindingForm::none ? "none" : "exponential"},
        {"alpha_per_photon", d.blinding.alpha_per_photon}}},
      {"n_cap", d.n_cap},
      {"temporal_spacing_ps", d.geometry.temporal_spacing_ps},
      {"coincidence_window_ps", d.geometry.coincidence_window_ps},
      {"rep_rate_hz", d.geometry.rep_rate_hz},
      {"trigger_offset_ps", d.geometry.trigger_offset_ps},
  };
  if (d.bin_efficiency.shared()) detector["bin_efficiency"] = d.bin_efficiency[0];
  else detector["bin_efficiency"] = d.bin_efficiency.values();
  if (!c.timing_models_file.empty()) {
    detector["timing_models_file"] = c.timing_models_file;
  } else {
    const auto& f = c.timing_family;
    detector["timing_family"] = {
        {"t0_ps", f.t0_ps}, {"a_ps", f.a_ps}, {"sigma0_ps", f.sigma0_ps}, {"tau0_ps", f.tau0_ps}};
  }

  json analysis{
      {"lut_origin_ps", c.analysis.lut_grid.origin_ps},
      {"lut_step_ps", c.analysis.lut_grid.step_ps},
      {"lut_rows", c.analysis.lut_grid.len},
      {"fit_components", c.analysis.fit_components},
      {"fit_per_bin", c.analysis.fit_per_bin},
      {"outcome_bins", c.analysis.outcome_bins},
      {"truncation_photons", c.analysis.truncation_photons},
      {"gamma", c.analysis.tomography.gamma ? json(*c.analysis.tomography.gamma) : json(nullptr)},
      {"max_iterations", c.analysis.tomography.max_iterations},
      {"tolerance", c.analysis.tomography.tolerance},
      {"stop_window", c.analysis.tomography.window},
  };
  const auto& p = c.paths;
  json paths{{"tags", p.tags},     {"truth", p.truth},   {"models", p.models}, {"luts", p.luts},
             {"shots", p.shots},   {"report", p.report}, {"povm", p.povm},     {"diagnostics", p.diagnostics}};
  json doc{{"seed", c.seed},
           {"shots_per_state", c.shots_per_state},
           {"schedule", {{"incident_means_photons", c.incident_means}}},
           {"detector", detector},
           {"paths", paths},
           {"analysis", analysis}};
  os << doc.dump(2) << '\n';
}

std::filesystem::path default_data_dir() {
  if (const char* dir = std::getenv("PNR_DATA_DIR"); dir && *dir) return dir;
  return ".";
}

}  // namespace pnr
