#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pnr/csv.hpp"
#include "pnr/detector_sim.hpp"
#include "pnr/ensemble_stats.hpp"
#include "pnr/lut.hpp"
#include "pnr/run_config.hpp"
#include "pnr/shot_engine.hpp"
#include "pnr/tag_io.hpp"
#include "pnr/timing_model.hpp"
#include "pnr/tomography.hpp"

using namespace pnr;

namespace {

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::invalid_argument: return 2;
    case ErrorCategory::io: return 3;
    case ErrorCategory::format: return 4;
    case ErrorCategory::data: return 5;
    case ErrorCategory::convergence: return 6;
  }
  return 1;
}

std::string resolve(const std::string& flag, const std::string& from_config, const char* fallback) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  return (default_data_dir() / fallback).string();
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::io, "cannot open '" + path + "' for reading");
  return in;
}

std::ofstream open_out(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCategory::io, "cannot open '" + path + "' for writing");
  return out;
}

void close_out(std::ofstream& out, const std::string& path) {
  out.close();
  if (!out) fail(ErrorCategory::io, "failed writing '" + path + "'");
}

// Options shared by every command.
struct Common {
  std::string config;
  RunConfig run;

  void load() {
    if (!config.empty()) run = load_run_config(config);
  }
};

// Streams every shot of a tag file through `fn`.
void for_each_shot(std::istream& in, const Geometry& geometry, const std::function<void(ShotRecord&&)>& fn) {
  TagReader reader(in);
  if (reader.header().rep_period_ps != geometry.rep_period_ps())
    fail(ErrorCategory::data, "tag file repetition period " + std::to_string(reader.header().rep_period_ps) +
                                  " ps differs from the configured " + std::to_string(geometry.rep_period_ps()) +
                                  " ps");
  ShotAssembler assembler(geometry, fn);
  std::vector<TimeTag> buf(1 << 16);
  while (std::size_t got = reader.read(buf))
    for (std::size_t i = 0; i < got; ++i) assembler.push(buf[i]);
  assembler.finish();
}

BinTable<Lut> load_luts(const std::string& luts_path, const RunConfig& run) {
  if (!luts_path.empty()) {
    auto in = open_in(luts_path);
    return read_luts(in);
  }
  return build_luts(run.detector.timing_models, run.analysis.lut_grid);
}

// Input state of each shot, from the truth sidecar or from the schedule.
class StateMap {
 public:
  StateMap(const std::string& truth_path, const RunConfig& run) {
    if (!truth_path.empty()) {
      auto in = open_in(truth_path);
      for (const auto& r : read_truth_csv(in)) {
        by_shot_[r.shot_index] = r.state;
        if (means_.size() <= r.state) means_.resize(r.state + 1, -1.0);
        means_[r.state] = r.incident_mean;
      }
      for (std::size_t s = 0; s < means_.size(); ++s)
        if (means_[s] < 0.0) fail(ErrorCategory::data, "truth file has no shots of state " + std::to_string(s));
    } else {
      means_ = run.incident_means;
      shots_per_state_ = run.shots_per_state;
    }
  }

  std::size_t states() const { return means_.size(); }
  double incident_mean(std::size_t state) const { return means_[state]; }
  const std::vector<double>& incident_means() const { return means_; }

  std::size_t state_of(std::uint64_t shot) const {
    if (shots_per_state_) {
      const auto s = shot / shots_per_state_;
      if (s >= means_.size())
        fail(ErrorCategory::data, "shot " + std::to_string(shot) + " lies beyond the configured schedule");
      return static_cast<std::size_t>(s);
    }
    const auto it = by_shot_.find(shot);
    if (it == by_shot_.end()) fail(ErrorCategory::data, "shot " + std::to_string(shot) + " is missing from the truth file");
    return it->second;
  }

 private:
  std::vector<double> means_;
  std::uint64_t shots_per_state_ = 0;
  std::map<std::uint64_t, std::size_t> by_shot_;
};

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  for (auto f : csv::split(text)) out.push_back(csv::parse<double>(f, 1));
  return out;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::optional<std::uint64_t> seed, shots;
  std::string means, tags, truth;
  std::optional<double> max_mean;
  std::optional<int> states;
  bool ideal = false;
};

int run_simulate(Common& c, const SimulateArgs& a) {
  c.load();
  auto& run = c.run;
  if (a.seed) run.seed = *a.seed;
  if (a.shots) run.shots_per_state = *a.shots;
  if (!a.means.empty()) run.incident_means = parse_list(a.means);
  if (a.max_mean || a.states) run.incident_means = quadratic_schedule(a.max_mean.value_or(15393.0), a.states.value_or(125));
  if (a.ideal) run.detector = run.detector.ideal();
  run.validate();

  const auto tags_path = resolve(a.tags, run.paths.tags, "run.tags");
  const auto truth_path = resolve(a.truth, run.paths.truth, "run_truth.csv");
  auto tags = open_out(tags_path);
  auto truth = open_out(truth_path);
  TagWriter writer(tags, run.detector.geometry.rep_period_ps());
  const auto totals =
      simulate_run({run.seed, run.incident_means, run.shots_per_state}, run.detector, writer, &truth);
  close_out(tags, tags_path);
  close_out(truth, truth_path);
  std::cout << "shots," << totals.shots << "\nrecords," << totals.records << "\ntags," << tags_path << "\ntruth,"
            << truth_path << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  std::string tags, models, luts, summary;
  std::optional<int> components;
  bool per_bin = false;
  std::uint64_t max_shots = 0;
};

int run_fit_lut(Common& c, const FitArgs& a) {
  c.load();
  auto& run = c.run;
  if (a.components) run.analysis.fit_components = *a.components;
  if (a.per_bin) run.analysis.fit_per_bin = true;
  run.validate();
  const auto& geo = run.detector.geometry;
  const std::size_t width = geo.coincidence_window_ps;
  const std::size_t tables = run.analysis.fit_per_bin ? kBins : 1;
  std::vector<std::vector<std::uint64_t>> counts(tables, std::vector<std::uint64_t>(width, 0));
  std::uint64_t shots = 0;
  auto in = open_in(resolve(a.tags, run.paths.tags, "run.tags"));
  for_each_shot(in, geo, [&](ShotRecord&& s) {
    if (a.max_shots && shots >= a.max_shots) return;
    ++shots;
    for (int b = 0; b < kBins; ++b)
      if (const auto& o = s.outcomes[b]) {
        const auto t = static_cast<std::size_t>(std::floor(*o));
        if (t < width) ++counts[run.analysis.fit_per_bin ? b : 0][t];
      }
  });

  std::vector<BinTimingModel> models;
  for (std::size_t i = 0; i < tables; ++i) {
    // Integer arrival times sit at the bin centers.
    ArrivalHistogram h{1.0, -0.5, std::move(counts[i])};
    const auto fit = fit_mixture(h, run.analysis.fit_components);
    models.push_back(extend_with_family(fit.model, run.detector.n_cap));
  }
  const auto table = tables == 1 ? BinTable<BinTimingModel>(models.front()) : BinTable<BinTimingModel>(models);
  const auto luts = build_luts(table, run.analysis.lut_grid);

  const auto models_path = resolve(a.models, run.paths.models, "models.json");
  const auto luts_path = resolve(a.luts, run.paths.luts, "luts.bin");
  auto mo = open_out(models_path);
  write_timing_models(mo, table);
  close_out(mo, models_path);
  auto lo = open_out(luts_path);
  write_luts(lo, luts);
  close_out(lo, luts_path);
  if (!a.summary.empty()) {
    auto so = open_out(a.summary);
    write_lut_summary(so, luts[0]);
    close_out(so, a.summary);
  }
  std::cout << "shots," << shots << "\nmodels," << models_path << "\nluts," << luts_path << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string tags, luts, out;
};

int run_analyze(Common& c, const AnalyzeArgs& a) {
  c.load();
  const auto& run = c.run;
  run.validate();
  const auto luts = load_luts(a.luts.empty() ? run.paths.luts : a.luts, run);
  auto in = open_in(resolve(a.tags, run.paths.tags, "run.tags"));
  const auto out_path = resolve(a.out, run.paths.shots, "shots.csv");
  auto out = open_out(out_path);
  write_shot_csv_header(out);
  std::uint64_t shots = 0;
  for_each_shot(in, run.detector.geometry, [&](ShotRecord&& s) {
    write_shot_csv_row(out, analyze_shot(s, luts));
    ++shots;
  });
  close_out(out, out_path);
  std::cout << "shots," << shots << "\nshots_csv," << out_path << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::string shots, truth, luts, out, profile, curve, plot;
};

void write_plot_script(std::ostream& os, const std::string& ensemble, const std::string& profile,
                       const std::string& curve) {
  os << "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n";
  os << "set output 'ensemble_variance.png'\nset logscale xy\nset xlabel 'measured mean (photons)'\n"
     << "set ylabel 'variance (photons^2)'\nplot '" << ensemble << "' using 4:5 with points title 'simulated', "
     << "x title 'Poisson'";
  if (!curve.empty()) os << ", '" << curve << "' using 3:4 with lines title 'model'";
  os << "\nunset logscale\nset output 'noise_db.png'\nset logscale x\nset ylabel 'relative noise (dB)'\n"
     << "plot '" << ensemble << "' using 4:8 with linespoints title 'noise'\n";
  if (!profile.empty())
    os << "unset logscale\nset output 'sigma_profile.png'\nset ylabel 'shot std (photons)'\n"
       << "plot '" << profile << "' using 1:3 with lines title 'median', '' using 1:4 with lines title 'low', "
       << "'' using 1:5 with lines title 'high', 1 title 'one photon'\n";
}

int run_report(Common& c, const ReportArgs& a) {
  c.load();
  const auto& run = c.run;
  run.validate();
  const StateMap states(a.truth.empty() ? run.paths.truth : a.truth, run);
  auto in = open_in(resolve(a.shots, run.paths.shots, "shots.csv"));
  const auto shots = read_shot_csv(in);

  std::vector<EnsembleAccumulator> acc(states.states());
  SigmaProfile profile;
  for (const auto& r : shots) {
    acc[states.state_of(r.shot_index)].add(r);
    profile.add(r.measured_mean, r.measured_std);
  }

  const std::string report_dir = run.paths.report.empty() ? default_data_dir().string() : run.paths.report;
  const auto out_path = a.out.empty() ? (std::filesystem::path(report_dir) / "ensemble.csv").string() : a.out;
  auto out = open_out(out_path);
  write_ensemble_csv_header(out);
  for (std::size_t s = 0; s < acc.size(); ++s)
    if (acc[s].shots()) write_ensemble_csv_row(out, s, acc[s].summary(states.incident_mean(s)));
  close_out(out, out_path);

  if (!a.profile.empty()) {
    auto po = open_out(a.profile);
    profile.write_csv(po);
    close_out(po, a.profile);
  }
  if (!a.curve.empty()) {
    const auto luts = load_luts(a.luts.empty() ? run.paths.luts : a.luts, run);
    const auto response = bin_response(run.detector.timing_models[0], luts[0],
                                       run.detector.geometry.coincidence_window_ps, run.detector.n_cap);
    const auto points = blinded_variance_curve(states.incident_means(), run.detector, &response);
    auto co = open_out(a.curve);
    co << "state,incident_mean_photons,predicted_mean_photons,predicted_variance_photons2\n";
    for (std::size_t s = 0; s < points.size(); ++s)
      co << s << ',' << csv::num(points[s].incident_mean) << ',' << csv::num(points[s].mean) << ','
         << csv::num(points[s].variance) << '\n';
    close_out(co, a.curve);
  }
  if (!a.plot.empty()) {
    auto pl = open_out(a.plot);
    write_plot_script(pl, out_path, a.profile, a.curve);
    close_out(pl, a.plot);
  }
  std::cout << "shots," << shots.size() << "\nsub_unit_sigma_boundary_photons," << profile.sub_unit_sigma_boundary()
            << "\nensemble_csv," << out_path << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct ClickArgs {
  std::vector<std::int64_t> bins, photons;
};

int run_click_table(const ClickArgs& a) {
  for (auto b : a.bins) require(b >= 1, "bin counts must be >= 1");
  for (auto n : a.photons) require(n >= 0, "photon numbers must be >= 0");
  if (!a.bins.empty()) {
    std::cout << "bins,n_max_click_photons\n";
    for (auto b : a.bins) std::cout << b << ',' << n_max_click(b) << '\n';
  }
  if (!a.photons.empty()) {
    std::cout << "photons,detectors_for_unit_sigma\n";
    for (auto n : a.photons) std::cout << n << ',' << detectors_for_unit_sigma(n) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct TomographyArgs {
  std::string shots, truth, povm, diagnostics, trace, povm_csv, rows;
  std::optional<std::size_t> outcome_bins, truncation;
  std::optional<double> gamma, tolerance;
  std::optional<std::uint64_t> max_iterations;
};

int run_tomography(Common& c, const TomographyArgs& a) {
  c.load();
  auto& run = c.run;
  auto& opt = run.analysis;
  if (a.outcome_bins) opt.outcome_bins = *a.outcome_bins;
  if (a.truncation) opt.truncation_photons = *a.truncation;
  if (a.gamma) opt.tomography.gamma = *a.gamma;
  if (a.tolerance) opt.tomography.tolerance = *a.tolerance;
  if (a.max_iterations) opt.tomography.max_iterations = *a.max_iterations;
  run.validate();

  const StateMap states(a.truth.empty() ? run.paths.truth : a.truth, run);
  auto in = open_in(resolve(a.shots, run.paths.shots, "shots.csv"));
  OutcomeHistogram hist(states.states(), opt.outcome_bins);
  for (const auto& r : read_shot_csv(in)) hist.add(states.state_of(r.shot_index), r.measured_mean);
  const auto P = hist.outcome_matrix();
  const auto F = build_probe_matrix(states.incident_means(), opt.truncation_photons);
  const auto rec = reconstruct_povm(F, P, opt.tomography);
  const auto& d = rec.diagnostics;

  const auto povm_path = resolve(a.povm, run.paths.povm, "povm.bin");
  const auto diag_path = resolve(a.diagnostics, run.paths.diagnostics, "povm_diagnostics.csv");
  auto po = open_out(povm_path);
  write_povm(po, rec.povm);
  close_out(po, povm_path);
  auto dio = open_out(diag_path);
  write_diagnostics_csv(dio, d);
  close_out(dio, diag_path);
  if (!a.trace.empty()) {
    auto t = open_out(a.trace);
    write_objective_trace_csv(t, d);
    close_out(t, a.trace);
  }
  if (!a.povm_csv.empty()) {
    std::vector<std::size_t> rows;
    if (a.rows.empty()) {
      for (std::size_t m = 0; m < rec.povm.rows(); ++m) rows.push_back(m);
    } else {
      for (double v : parse_list(a.rows)) {
        require(v >= 0 && v < static_cast<double>(rec.povm.rows()), "row index outside the POVM");
        rows.push_back(static_cast<std::size_t>(v));
      }
    }
    auto cs = open_out(a.povm_csv);
    write_povm_csv(cs, rec.povm, rows);
    close_out(cs, a.povm_csv);
  }
  std::cout << "iterations," << d.iterations << "\nconverged," << (d.converged ? 1 : 0) << "\nresidual,"
            << csv::num(d.residual) << "\npovm," << povm_path << "\ndiagnostics," << diag_path << '\n';
  if (!d.converged)
    fail(ErrorCategory::convergence, "reconstruction stopped at the iteration cap before converging; results were "
                                     "written and flagged non-converged");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation and analysis of a multiplexed photon-number-resolving detector"};
  app.require_subcommand(1);
  Common common;
  std::function<int()> action;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration")->check(CLI::ExistingFile);
  };

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Simulate shots and write a tag file plus a ground-truth CSV");
  add_config(s);
  s->add_option("--seed", sim.seed, "Random seed");
  s->add_option("--shots", sim.shots, "Shots per input state");
  s->add_option("--incident-mean", sim.means, "Comma-separated incident mean photon numbers");
  s->add_option("--max-mean", sim.max_mean, "Largest mean of the quadratic schedule");
  s->add_option("--states", sim.states, "Number of states of the quadratic schedule");
  s->add_option("--tags", sim.tags, "Output tag file");
  s->add_option("--truth", sim.truth, "Output ground-truth CSV");
  s->add_flag("--ideal", sim.ideal, "Disable dark counts and blinding");
  s->callback([&] { action = [&] { return run_simulate(common, sim); }; });

  FitArgs fit;
  auto* f = app.add_subcommand("fit-lut", "Fit arrival-time models to a tag file and build lookup tables");
  add_config(f);
  f->add_option("--tags", fit.tags, "Input tag file");
  f->add_option("--models", fit.models, "Output timing model file (JSON)");
  f->add_option("--luts", fit.luts, "Output lookup table file");
  f->add_option("--summary", fit.summary, "Optional CSV summary of the first lookup table");
  f->add_option("--components", fit.components, "EMG components to fit before extending to n_cap");
  f->add_flag("--per-bin", fit.per_bin, "Fit every bin separately instead of one pooled histogram");
  f->add_option("--max-shots", fit.max_shots, "Use at most this many shots (0 = all)");
  f->callback([&] { action = [&] { return run_fit_lut(common, fit); }; });

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "Assign tags to bins and write per-shot photon-number estimates");
  add_config(a);
  a->add_option("--tags", an.tags, "Input tag file");
  a->add_option("--luts", an.luts, "Lookup table file (default: built from the configured timing models)");
  a->add_option("--out", an.out, "Output per-shot CSV");
  a->callback([&] { action = [&] { return run_analyze(common, an); }; });

  ReportArgs rep;
  auto* r = app.add_subcommand("ensemble-report", "Per-state ensemble statistics from a per-shot CSV");
  add_config(r);
  r->add_option("--shots", rep.shots, "Input per-shot CSV");
  r->add_option("--truth", rep.truth, "Ground-truth CSV giving each shot's state (default: the configured schedule)");
  r->add_option("--luts", rep.luts, "Lookup table file used by the predicted curve");
  r->add_option("--out", rep.out, "Output ensemble CSV");
  r->add_option("--sigma-profile", rep.profile, "Output CSV of shot std against measured photon number");
  r->add_option("--curve", rep.curve, "Output CSV of the predicted mean and variance per state");
  r->add_option("--plot-script", rep.plot, "Output gnuplot script rendering the CSVs");
  r->callback([&] { action = [&] { return run_report(common, rep); }; });

  ClickArgs cl;
  auto* k = app.add_subcommand("click-table", "Click-detector comparison numbers");
  k->add_option("--bins", cl.bins, "Bin counts B; prints the largest photon number with click std <= 1")
      ->delimiter(',');
  k->add_option("--photons", cl.photons, "Photon numbers; prints the click detectors needed for std <= 1")
      ->delimiter(',');
  k->callback([&] { action = [&] { return run_click_table(cl); }; });

  TomographyArgs tom;
  auto* t = app.add_subcommand("tomography", "Reconstruct the detector POVM from coherent-probe data");
  add_config(t);
  t->add_option("--shots", tom.shots, "Input per-shot CSV");
  t->add_option("--truth", tom.truth, "Ground-truth CSV giving each shot's state (default: the configured schedule)");
  t->add_option("--outcome-bins", tom.outcome_bins, "Measured photon-number outcomes N");
  t->add_option("--truncation", tom.truncation, "Incident photon-number truncation M");
  t->add_option("--gamma", tom.gamma, "Smoothing weight (default 1e-2 ||P||^2 / M)");
  t->add_option("--tolerance", tom.tolerance, "Relative objective change for convergence");
  t->add_option("--max-iterations", tom.max_iterations, "Iteration cap");
  t->add_option("--povm", tom.povm, "Output POVM binary");
  t->add_option("--diagnostics", tom.diagnostics, "Output diagnostics CSV");
  t->add_option("--trace", tom.trace, "Output objective trace CSV");
  t->add_option("--povm-csv", tom.povm_csv, "Output long-form POVM CSV");
  t->add_option("--rows", tom.rows, "Comma-separated POVM rows for --povm-csv (default all)");
  t->callback([&] { action = [&] { return run_tomography(common, tom); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorCategory::invalid_argument);
  }
  try {
    return action();
  } catch (const Error& e) {
    std::cerr << "error [" << category_name(e.category()) << "]: " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error [io]: " << e.what() << '\n';
    return exit_code(ErrorCategory::io);
  } catch (const std::exception& e) {
    std::cerr << "error [internal]: " << e.what() << '\n';
    return 1;
  }
}
