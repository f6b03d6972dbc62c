#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace pnr {

/// Finite probability distribution over photon number n = 0..support_max().
///
/// The checked constructor enforces nonnegative entries that sum to one
/// within `kNormTolerance`. Internal producers that already guarantee this
/// (LUT rows, FFT output) go through `from_trusted`.
class PhotonNumberDistribution {
 public:
  static constexpr double kNormTolerance = 1e-9;

  PhotonNumberDistribution() : probs_{1.0} {}
  explicit PhotonNumberDistribution(std::vector<double> probs);

  static PhotonNumberDistribution vacuum() { return {}; }
  static PhotonNumberDistribution from_trusted(std::vector<double> probs);

  std::span<const double> probs() const noexcept { return probs_; }
  std::size_t support_max() const noexcept { return probs_.size() - 1; }
  double operator[](std::size_t n) const noexcept {
    return n < probs_.size() ? probs_[n] : 0.0;
  }

  double mean() const noexcept;
  double variance() const noexcept;
  bool is_vacuum() const noexcept;

  friend bool operator==(const PhotonNumberDistribution&,
                         const PhotonNumberDistribution&) = default;

 private:
  struct Trusted {};
  PhotonNumberDistribution(Trusted, std::vector<double> probs)
      : probs_(std::move(probs)) {}

  std::vector<double> probs_;
};

// Mean and variance of an arbitrary nonnegative weight vector over n.
struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};
Moments moments_of(std::span<const double> probs) noexcept;

}  // namespace pnr
