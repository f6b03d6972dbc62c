#include "pnr/detector_config.hpp"

#include <cmath>
#include <sstream>

namespace pnr {

std::uint64_t Geometry::rep_period_ps() const {
  return static_cast<std::uint64_t>(std::llround(1e12 / rep_rate_hz));
}

void Geometry::validate() const {
  require(rep_rate_hz > 0.0 && std::isfinite(rep_rate_hz), "rep_rate_hz must be > 0");
  require(coincidence_window_ps > 0, "coincidence_window_ps must be > 0");
  require(temporal_spacing_ps > coincidence_window_ps,
          "temporal_spacing_ps must exceed coincidence_window_ps");
  const std::uint64_t span = window_start(kTemporalBins - 1) + coincidence_window_ps;
  if (rep_period_ps() <= kTemporalBins * temporal_spacing_ps || trigger_offset_ps + span >= rep_period_ps()) {
    std::ostringstream os;
    os << "repetition period " << rep_period_ps() << " ps is too short for 128 windows spaced "
       << temporal_spacing_ps << " ps apart (offset " << trigger_offset_ps << " ps)";
    fail(ErrorCategory::invalid_argument, os.str());
  }
}

double BlindingParams::probability(double incident_mean) const {
  if (form == BlindingForm::none || alpha_per_photon == 0.0) return 0.0;
  return -std::expm1(-alpha_per_photon * incident_mean);
}

void BlindingParams::validate() const {
  require(alpha_per_photon >= 0.0 && std::isfinite(alpha_per_photon),
          "blinding alpha must be >= 0");
}

void DetectorConfig::validate() const {
  for (double r : temporal_stages) require(r > 0.0 && r < 1.0, "splitter ratios must lie in (0, 1)");
  for (double r : spatial_stages) require(r > 0.0 && r < 1.0, "splitter ratios must lie in (0, 1)");
  require(!bin_efficiency.empty(), "bin efficiency table is empty");
  for (double e : bin_efficiency.values()) require(e >= 0.0 && e <= 1.0, "bin efficiencies must lie in [0, 1]");
  for (double d : dark_rate_hz) require(d >= 0.0 && std::isfinite(d), "dark rates must be >= 0");
  blinding.validate();
  require(n_cap >= 1, "n_cap must be >= 1");
  geometry.validate();
  require(!timing_models.empty(), "timing model table is empty");
  for (const auto& m : timing_models.values())
    require(m.n_cap() >= n_cap, "every timing model needs a component for each n up to n_cap");
}

DetectorConfig DetectorConfig::ideal() const {
  DetectorConfig c = *this;
  c.dark_rate_hz.fill(0.0);
  c.blinding.form = BlindingForm::none;
  return c;
}

double split_fraction(BinId bin, const DetectorConfig& config) noexcept {
  double f = 1.0;
  for (int s = 0; s < 7; ++s) {
    const double r = config.temporal_stages[s];
    f *= (bin.temporal >> s) & 1 ? r : 1.0 - r;
  }
  for (int s = 0; s < 3; ++s) {
    const double r = config.spatial_stages[s];
    f *= (bin.spatial >> s) & 1 ? r : 1.0 - r;
  }
  return f;
}

std::vector<double> split_tree(double incident_mean, const DetectorConfig& config) {
  require(incident_mean >= 0.0 && std::isfinite(incident_mean), "incident mean must be >= 0");
  std::vector<double> means(kBins);
  for (int b = 0; b < kBins; ++b)
    means[b] = incident_mean * split_fraction(BinId::from_flat(b), config) * config.bin_efficiency[b];
  return means;
}

std::vector<double> quadratic_schedule(double max_mean, int states) {
  require(states >= 2, "schedule needs at least two states");
  require(max_mean >= 0.0, "schedule maximum must be >= 0");
  std::vector<double> mu(static_cast<std::size_t>(states));
  for (int d = 0; d < states; ++d) {
    const double x = static_cast<double>(d) / (states - 1);
    mu[d] = std::round(max_mean * x * x);
  }
  return mu;
}

}  // namespace pnr
