#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pnr/bins.hpp"
#include "pnr/timing_model.hpp"

namespace pnr {

/// Timing layout of one shot: a trigger, then 128 temporal windows per
/// spatial channel opening at trigger + k * spacing, each `window_ps` wide.
struct Geometry {
  std::uint64_t temporal_spacing_ps = 97'000;
  std::uint64_t coincidence_window_ps = 450;
  double rep_rate_hz = 80'000.0;
  // Offset of each trigger from the start of its repetition period.
  std::uint64_t trigger_offset_ps = 100'000;

  std::uint64_t rep_period_ps() const;
  std::uint64_t window_start(int temporal) const noexcept {
    return static_cast<std::uint64_t>(temporal) * temporal_spacing_ps;
  }
  void validate() const;
};

enum class BlindingForm { none, exponential };

/// Per-bin blinding probability b(n) = 1 - exp(-alpha n), with n the total
/// incident mean photon number of the pulse.
struct BlindingParams {
  double alpha_per_photon = 2e-5;
  BlindingForm form = BlindingForm::exponential;

  double probability(double incident_mean) const;
  void validate() const;
};

struct DetectorConfig {
  std::array<double, 7> temporal_stages{0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  std::array<double, 3> spatial_stages{0.5, 0.5, 0.5};
  BinTable<double> bin_efficiency{0.5};
  std::array<double, kSpatialBins> dark_rate_hz{10, 10, 10, 10, 10, 10, 10, 10};
  BlindingParams blinding;
  int n_cap = 15;
  Geometry geometry;
  BinTable<BinTimingModel> timing_models{TimingFamily{}.model(15)};

  void validate() const;

  // Variant of this configuration without dark counts or blinding.
  DetectorConfig ideal() const;
};

/// Mean photon number reaching each bin (after splitting and bin efficiency).
std::vector<double> split_tree(double incident_mean, const DetectorConfig& config);

/// Fraction of the incident light that a bin receives before bin efficiency.
double split_fraction(BinId bin, const DetectorConfig& config) noexcept;

/// Default input schedule: round(max_mean * (d / (states - 1))^2).
std::vector<double> quadratic_schedule(double max_mean = 15393.0, int states = 125);

}  // namespace pnr
