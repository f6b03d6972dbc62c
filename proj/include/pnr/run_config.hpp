#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pnr/detector_config.hpp"
#include "pnr/lut.hpp"
#include "pnr/tomography.hpp"

namespace pnr {

/// File locations used by the CLI commands; empty means "not set".
struct RunPaths {
  std::string tags;
  std::string truth;
  std::string models;
  std::string luts;
  std::string shots;
  std::string report;
  std::string povm;
  std::string diagnostics;
};

struct AnalysisOptions {
  LutGrid lut_grid;
  int fit_components = 3;       // components fitted per histogram before family extension
  bool fit_per_bin = false;     // one fit per bin instead of one pooled fit
  std::size_t outcome_bins = 1200;       // N
  std::size_t truncation_photons = 2000;  // M
  ReconstructOptions tomography;
};

/// Everything a run needs. Parsed from a JSON document whose keys are listed
/// in docs/formats.md; unknown keys are rejected.
struct RunConfig {
  DetectorConfig detector;
  // Source of detector.timing_models: a model file if set, else the family.
  TimingFamily timing_family;
  std::string timing_models_file;
  std::uint64_t seed = 1;
  std::uint64_t shots_per_state = 1000;
  std::vector<double> incident_means = quadratic_schedule();
  RunPaths paths;
  AnalysisOptions analysis;

  void validate() const;
};

RunConfig parse_run_config(std::istream& is);
RunConfig load_run_config(const std::filesystem::path& path);
void write_run_config(std::ostream& os, const RunConfig& config);

/// Default directory for relative output paths: $PNR_DATA_DIR or ".".
std::filesystem::path default_data_dir();

}  // namespace pnr
