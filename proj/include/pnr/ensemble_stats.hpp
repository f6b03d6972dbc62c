#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <vector>

#include "pnr/detector_config.hpp"
#include "pnr/lut.hpp"
#include "pnr/photon_distribution.hpp"
#include "pnr/shot_engine.hpp"

namespace pnr {

double g2_zero(double mean, double variance);

/// 10 log10(std / sqrt(mean)); 0 dB is the Poisson limit.
double relative_noise_db(double mean, double std);

double efficiency_pnr(double measured_mean, double incident_mean);

/// -ln(p_no_click) / incident_mean.
double efficiency_click(double p_no_click, double incident_mean);

struct ClickStats {
  double mean = 0.0;
  double variance = 0.0;
};

/// Occupied-bin count for n photons spread uniformly over B bins.
ClickStats fock_click_stats(std::int64_t bins, std::int64_t photons);

/// Largest n such that the click-count std stays <= 1 for every count up to n
/// with B bins; the maximum int64 value when it never exceeds 1 (B <= 9).
std::int64_t n_max_click(std::int64_t bins);

/// Smallest B >= n whose click-count std is <= 1 for n photons (1 for n <= 1).
std::int64_t detectors_for_unit_sigma(std::int64_t photons);

PhotonNumberDistribution zero_inflate(const PhotonNumberDistribution& p, double b);

/// Mergeable count / mean / central moments up to fourth order.
class MomentAccumulator {
 public:
  void add(double x) noexcept;
  void merge(const MomentAccumulator& other) noexcept;

  std::uint64_t count() const noexcept { return n_; }
  double mean() const noexcept { return mean_; }
  // Unbiased sample variance (n - 1 denominator).
  double variance() const noexcept { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  // Population central moments.
  double central2() const noexcept { return n_ ? m2_ / static_cast<double>(n_) : 0.0; }
  double central3() const noexcept { return n_ ? m3_ / static_cast<double>(n_) : 0.0; }
  double central4() const noexcept { return n_ ? m4_ / static_cast<double>(n_) : 0.0; }

 private:
  std::uint64_t n_ = 0;
  double mean_ = 0.0, m2_ = 0.0, m3_ = 0.0, m4_ = 0.0;
};

struct G2Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// g2 of a sample with its delta-method standard error.
G2Estimate g2_estimate(const MomentAccumulator& m);

/// Inverse-variance weighted mean of several g2 estimates.
G2Estimate weighted_g2_average(std::span<const G2Estimate> estimates);

struct EnsembleSummary {
  double incident_mean = 0.0;
  double measured_mean = 0.0;
  double measured_variance = 0.0;
  std::uint64_t shots = 0;
  double g2 = 0.0;
  double g2_err = 0.0;
  double noise_db = 0.0;
  double efficiency_pnr = 0.0;
  double efficiency_click = 0.0;
};

/// Order-independent reduction over analyzed shots of one input state.
class EnsembleAccumulator {
 public:
  void add(const ShotResult& r) noexcept;
  void merge(const EnsembleAccumulator& other) noexcept;
  const MomentAccumulator& means() const noexcept { return means_; }
  std::uint64_t shots() const noexcept { return means_.count(); }

  // Values that need the incident mean are NaN when it is 0; efficiency_click
  // assumes the incident light is split evenly across the 1024 bins.
  EnsembleSummary summary(double incident_mean) const;

 private:
  MomentAccumulator means_;
  double shot_var_sum_ = 0.0;
  std::uint64_t clicks_ = 0;
};

// Ensemble CSV (one row per input state).
void write_ensemble_csv_header(std::ostream& os);
void write_ensemble_csv_row(std::ostream& os, std::size_t state, const EnsembleSummary& s);

/// Per integer measured photon number: median shot std and central 99.7% interval.
class SigmaProfile {
 public:
  void add(double measured_mean, double measured_std);
  struct Row {
    std::int64_t measured_n;
    std::uint64_t shots;
    double median_std;
    double lo_std;
    double hi_std;
  };
  std::vector<Row> rows() const;
  // Largest measured n such that every shot at or below it has std < 1.
  std::int64_t sub_unit_sigma_boundary() const;
  void write_csv(std::ostream& os) const;

 private:
  std::map<std::int64_t, std::vector<double>> by_n_;
};

/// Mean and second moment of the reported bin photon number given k detected
/// photons (k = 0..n_cap), averaging over the arrival-time distribution.
struct BinResponse {
  std::vector<double> first;
  std::vector<double> second;
};

BinResponse bin_response(const BinTimingModel& model, const Lut& lut, std::uint64_t window_ps, int n_cap);

struct VariancePoint {
  double incident_mean = 0.0;
  double mean = 0.0;
  double variance = 0.0;
};

/// Predicted ensemble mean and variance: per-bin Poisson counts, zero-inflated
/// by blinding, summed over the 1024 bins. Without a response table each bin
/// reports its photon number exactly; with one, counts are capped at
/// response.first.size() - 1 and mapped through the table. Dark counts are
/// not included.
std::vector<VariancePoint> blinded_variance_curve(std::span<const double> incident_means,
                                                  const DetectorConfig& config,
                                                  const BinResponse* response = nullptr);

}  // namespace pnr
