#include "pnr/photon_distribution.hpp"

#include <cmath>
#include <sstream>

#include "pnr/error.hpp"

namespace pnr {

PhotonNumberDistribution::PhotonNumberDistribution(std::vector<double> probs)
    : probs_(std::move(probs)) {
  require(!probs_.empty(), "photon-number distribution must be non-empty");
  double sum = 0.0;
  for (std::size_t n = 0; n < probs_.size(); ++n) {
    const double p = probs_[n];
    if (!(p >= 0.0) || !std::isfinite(p)) {
      std::ostringstream os;
      os << "photon-number distribution has invalid entry p[" << n << "] = " << p;
      fail(ErrorCategory::invalid_argument, os.str());
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > kNormTolerance) {
    std::ostringstream os;
    os.precision(17);
    os << "photon-number distribution sums to " << sum << ", not 1";
    fail(ErrorCategory::invalid_argument, os.str());
  }
}

PhotonNumberDistribution PhotonNumberDistribution::from_trusted(
    std::vector<double> probs) {
  if (probs.empty()) probs.push_back(1.0);
  return PhotonNumberDistribution(Trusted{}, std::move(probs));
}

Moments moments_of(std::span<const double> probs) noexcept {
  double m0 = 0.0, m1 = 0.0;
  for (std::size_t n = 0; n < probs.size(); ++n) {
    m0 += probs[n];
    m1 += static_cast<double>(n) * probs[n];
  }
  if (m0 <= 0.0) return {};
  const double mean = m1 / m0;
  // Central second moment avoids the E[n^2] - mean^2 cancellation.
  double var = 0.0;
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const double d = static_cast<double>(n) - mean;
    var += d * d * probs[n];
  }
  return {mean, var / m0};
}

double PhotonNumberDistribution::mean() const noexcept {
  return moments_of(probs_).mean;
}

double PhotonNumberDistribution::variance() const noexcept {
  return moments_of(probs_).variance;
}

bool PhotonNumberDistribution::is_vacuum() const noexcept {
  if (probs_[0] != 1.0) return false;
  for (std::size_t n = 1; n < probs_.size(); ++n)
    if (probs_[n] != 0.0) return false;
  return true;
}

}  // namespace pnr
