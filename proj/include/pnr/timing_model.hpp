#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "pnr/bins.hpp"
#include "pnr/error.hpp"
#include "pnr/rng.hpp"

namespace pnr {

/// Exponentially modified Gaussian: Gaussian(mu, sigma) convolved with a
/// one-sided exponential of mean tau. All times in picoseconds.
struct EmgParams {
  double mu_ps = 0.0;
  double sigma_ps = 1.0;
  double tau_ps = 1.0;

  void validate() const;
  double mean() const noexcept { return mu_ps + tau_ps; }
  double variance() const noexcept {
    return sigma_ps * sigma_ps + tau_ps * tau_ps;
  }
  friend bool operator==(const EmgParams&, const EmgParams&) = default;
};

double emg_log_pdf(double t_ps, const EmgParams& p);
double emg_pdf(double t_ps, const EmgParams& p);
double emg_cdf(double t_ps, const EmgParams& p);
double emg_sample(Rng& rng, const EmgParams& p);

struct EmgComponent {
  int n = 1;  // photon number this component describes
  EmgParams params;
  double weight = 0.0;
  friend bool operator==(const EmgComponent&, const EmgComponent&) = default;
};

/// EMG mixture over photon numbers n = 1..n_cap for one detection bin.
/// Invariants: one component per n, weights a probability vector, and the
/// component mean (mu + tau) strictly decreasing in n.
class BinTimingModel {
 public:
  explicit BinTimingModel(std::vector<EmgComponent> components);

  int n_cap() const noexcept { return static_cast<int>(components_.size()); }
  const EmgComponent& component(int n) const { return components_.at(n - 1); }
  std::span<const EmgComponent> components() const noexcept { return components_; }

  double mixture_pdf(double t_ps) const;
  double mixture_cdf(double t_ps) const;

  friend bool operator==(const BinTimingModel&, const BinTimingModel&) = default;

 private:
  std::vector<EmgComponent> components_;
};

/// Synthetic per-n law used by the simulator:
///   mu_n = t0 - a ln n,  sigma_n = sigma0 / sqrt(n),  tau_n = tau0 / n.
struct TimingFamily {
  double t0_ps = 300.0;
  double a_ps = 80.0;
  double sigma0_ps = 8.0;
  double tau0_ps = 2.0;

  EmgParams params_for(int n) const;
  // Uniform weights; the weights only matter for histogram fitting.
  BinTimingModel model(int n_cap) const;
};

struct ArrivalHistogram {
  double bin_width_ps = 1.0;
  double origin_ps = 0.0;
  std::vector<std::uint64_t> counts;

  void validate() const;
  std::uint64_t total() const noexcept;
  double edge(std::size_t i) const noexcept {
    return origin_ps + bin_width_ps * static_cast<double>(i);
  }
  double center(std::size_t i) const noexcept {
    return origin_ps + bin_width_ps * (static_cast<double>(i) + 0.5);
  }
};

ArrivalHistogram make_histogram(std::span<const double> times_ps, double origin_ps,
                                double bin_width_ps, std::size_t bins);

struct FitOptions {
  int max_iterations = 400;
  double relative_tolerance = 1e-10;
};

struct ParameterErrors {
  double mu_ps = 0.0;
  double sigma_ps = 0.0;
  double tau_ps = 0.0;
  double weight = 0.0;
};

struct FitResult {
  BinTimingModel model;
  double deviance = 0.0;       // Poisson deviance at the optimum
  double pearson_chi2 = 0.0;   // sum (y - lambda)^2 / lambda over all bins
  int degrees_of_freedom = 0;  // populated bins - free parameters
  int iterations = 0;          // of the winning start
  int starts = 0;
  std::vector<ParameterErrors> standard_errors;  // index n - 1
  std::vector<double> expected_counts;           // per histogram bin
};

/// Raised when no start converges; carries the best parameters seen.
class FitError : public Error {
 public:
  FitError(const std::string& what, std::vector<EmgComponent> best, double deviance)
      : Error(ErrorCategory::convergence, what),
        best_(std::move(best)),
        deviance_(deviance) {}
  const std::vector<EmgComponent>& best_so_far() const noexcept { return best_; }
  double deviance() const noexcept { return deviance_; }

 private:
  std::vector<EmgComponent> best_;
  double deviance_;
};

/// Poisson-deviance fit of an n_cap-component EMG mixture to a histogram,
/// by damped Gauss-Newton (Fisher scoring) from several peak-seeded starts.
FitResult fit_mixture(const ArrivalHistogram& hist, int n_cap,
                      const FitOptions& options = {});

/// Extend a model fitted with few components to n_cap components using the
/// TimingFamily law regressed on the fitted ones. New components get weight 0.
BinTimingModel extend_with_family(const BinTimingModel& fitted, int n_cap);

// Structured-text model files (JSON); see docs/formats.md.
void write_timing_models(std::ostream& os, const BinTable<BinTimingModel>& models);
BinTable<BinTimingModel> read_timing_models(std::istream& is);

}  // namespace pnr
