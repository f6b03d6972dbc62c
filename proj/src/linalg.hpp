#pragma once

// Small dense SPD helpers for the mixture fit (p <= ~60 parameters).

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <vector>

namespace pnr::detail {

// In-place lower Cholesky factor of a row-major p x p matrix.
inline bool cholesky(std::vector<double>& a, int p) {
  for (int j = 0; j < p; ++j) {
    double d = a[j * p + j];
    for (int k = 0; k < j; ++k) d -= a[j * p + k] * a[j * p + k];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double l = std::sqrt(d);
    a[j * p + j] = l;
    for (int i = j + 1; i < p; ++i) {
      double s = a[i * p + j];
      for (int k = 0; k < j; ++k) s -= a[i * p + k] * a[j * p + k];
      a[i * p + j] = s / l;
    }
  }
  return true;
}

inline void cholesky_substitute(const std::vector<double>& l, std::vector<double>& b, int p) {
  for (int i = 0; i < p; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= l[i * p + k] * b[k];
    b[i] = s / l[i * p + i];
  }
  for (int i = p - 1; i >= 0; --i) {
    double s = b[i];
    for (int k = i + 1; k < p; ++k) s -= l[k * p + i] * b[k];
    b[i] = s / l[i * p + i];
  }
}

// Solves A x = b; a is consumed, b is overwritten with x.
inline bool cholesky_solve(std::vector<double> a, std::vector<double>& b, int p) {
  if (!cholesky(a, p)) return false;
  cholesky_substitute(a, b, p);
  return true;
}

inline bool spd_inverse(std::vector<double> a, int p, std::vector<double>& inv) {
  if (!cholesky(a, p)) return false;
  inv.assign(static_cast<std::size_t>(p * p), 0.0);
  std::vector<double> e(static_cast<std::size_t>(p));
  for (int c = 0; c < p; ++c) {
    std::fill(e.begin(), e.end(), 0.0);
    e[c] = 1.0;
    cholesky_substitute(a, e, p);
    for (int r = 0; r < p; ++r) inv[r * p + c] = e[r];
  }
  return true;
}

}  // namespace pnr::detail
