#include "pnr/ensemble_stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "pnr/csv.hpp"

namespace pnr {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

double g2_zero(double mean, double variance) {
  if (!(mean > 0.0)) fail(ErrorCategory::invalid_argument, "g2 needs a positive mean");
  return 1.0 + (variance - mean) / (mean * mean);
}

double relative_noise_db(double mean, double std) {
  if (!(mean > 0.0)) fail(ErrorCategory::invalid_argument, "relative noise needs a positive mean");
  require(std >= 0.0, "relative noise needs std >= 0");
  return 10.0 * std::log10(std / std::sqrt(mean));
}

double efficiency_pnr(double measured_mean, double incident_mean) {
  if (!(incident_mean > 0.0)) fail(ErrorCategory::invalid_argument, "efficiency needs a positive incident mean");
  return measured_mean / incident_mean;
}

double efficiency_click(double p_no_click, double incident_mean) {
  if (!(incident_mean > 0.0)) fail(ErrorCategory::invalid_argument, "efficiency needs a positive incident mean");
  if (!(p_no_click > 0.0) || p_no_click > 1.0)
    fail(ErrorCategory::invalid_argument, "click efficiency needs 0 < p_no_click <= 1");
  return -std::log(p_no_click) / incident_mean;
}

ClickStats fock_click_stats(std::int64_t bins, std::int64_t photons) {
  if (bins < 1) fail(ErrorCategory::invalid_argument, "click statistics need B >= 1");
  require(photons >= 0, "click statistics need n >= 0");
  const double B = static_cast<double>(bins);
  const double n = static_cast<double>(photons);
  // (1 - 1/B)^n and (1 - 2/B)^n; log1p keeps them accurate for large B.
  auto power = [&](double x) {
    if (photons == 0) return 1.0;
    if (x == 0.0) return 0.0;
    if (x < 0.0) return std::pow(x, n);
    return std::exp(n * std::log(x));
  };
  const double a = bins >= 2 ? std::exp(n * std::log1p(-1.0 / B)) : power(0.0);
  const double b = bins >= 3 ? std::exp(n * std::log1p(-2.0 / B)) : power(1.0 - 2.0 / B);
  ClickStats s;
  s.mean = B * (1.0 - a);
  s.variance = std::max(0.0, B * (B - 1.0) * b + B * a - B * B * a * a);
  return s;
}

std::int64_t n_max_click(std::int64_t bins) {
  if (bins < 1) fail(ErrorCategory::invalid_argument, "click statistics need B >= 1");
  // std rises from 0, peaks, and falls back once every bin is occupied; the
  // answer is the last n before the first crossing of 1.
  const std::int64_t limit = 64 * bins + 64;
  for (std::int64_t n = 1; n <= limit; ++n)
    if (fock_click_stats(bins, n).variance > 1.0) return n - 1;
  return std::numeric_limits<std::int64_t>::max();
}

std::int64_t detectors_for_unit_sigma(std::int64_t photons) {
  require(photons >= 1, "detectors_for_unit_sigma needs n >= 1");
  auto over = [&](std::int64_t B) { return fock_click_stats(B, photons).variance > 1.0; };
  if (over(photons)) {
    // Decreasing branch: std falls as B grows past n.
    std::int64_t lo = photons, hi = photons;
    while (over(hi)) hi *= 2;
    while (hi - lo > 1) {
      const std::int64_t mid = lo + (hi - lo) / 2;
      (over(mid) ? lo : hi) = mid;
    }
    return hi;
  }
  for (std::int64_t B = photons - 1; B >= 1; --B)
    if (over(B)) return B + 1;
  return 1;
}

PhotonNumberDistribution zero_inflate(const PhotonNumberDistribution& p, double b) {
  require(b >= 0.0 && b <= 1.0, "zero-inflation probability must lie in [0, 1]");
  std::vector<double> q(p.probs().begin(), p.probs().end());
  for (auto& v : q) v *= 1.0 - b;
  q[0] += b;
  return PhotonNumberDistribution::from_trusted(std::move(q));
}

// ---------------------------------------------------------------------------

void MomentAccumulator::add(double x) noexcept {
  const double n1 = static_cast<double>(n_);
  ++n_;
  const double n = static_cast<double>(n_);
  const double delta = x - mean_;
  const double dn = delta / n;
  const double dn2 = dn * dn;
  const double term = delta * dn * n1;
  mean_ += dn;
  m4_ += term * dn2 * (n * n - 3 * n + 3) + 6 * dn2 * m2_ - 4 * dn * m3_;
  m3_ += term * dn * (n - 2) - 3 * dn * m2_;
  m2_ += term;
}

void MomentAccumulator::merge(const MomentAccumulator& o) noexcept {
  if (o.n_ == 0) return;
  if (n_ == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(o.n_);
  const double n = na + nb;
  const double d = o.mean_ - mean_;
  const double d2 = d * d, d3 = d2 * d, d4 = d2 * d2;
  const double m2 = m2_ + o.m2_ + d2 * na * nb / n;
  const double m3 = m3_ + o.m3_ + d3 * na * nb * (na - nb) / (n * n) + 3 * d * (na * o.m2_ - nb * m2_) / n;
  const double m4 = m4_ + o.m4_ + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n) +
                    6 * d2 * (na * na * o.m2_ + nb * nb * m2_) / (n * n) + 4 * d * (na * o.m3_ - nb * m3_) / n;
  mean_ = (na * mean_ + nb * o.mean_) / n;
  m2_ = m2;
  m3_ = m3;
  m4_ = m4;
  n_ += o.n_;
}

G2Estimate g2_estimate(const MomentAccumulator& m) {
  if (m.count() < 2 || !(m.mean() > 0.0)) return {kNaN, kNaN};
  const double N = static_cast<double>(m.count());
  const double mean = m.mean();
  const double s2 = m.variance();
  const double var_mean = s2 / N;
  const double var_s2 = std::max(0.0, (m.central4() - s2 * s2) / N);
  const double cov = m.central3() / N;
  // g = 1 + s2 / mean^2 - 1 / mean
  const double dg_dm = -2.0 * s2 / (mean * mean * mean) + 1.0 / (mean * mean);
  const double dg_ds2 = 1.0 / (mean * mean);
  const double var = dg_dm * dg_dm * var_mean + dg_ds2 * dg_ds2 * var_s2 + 2.0 * dg_dm * dg_ds2 * cov;
  return {g2_zero(mean, s2), std::sqrt(std::max(var, 0.0))};
}

G2Estimate weighted_g2_average(std::span<const G2Estimate> estimates) {
  double wsum = 0.0, acc = 0.0;
  for (const auto& e : estimates) {
    if (!std::isfinite(e.value) || !(e.std_error > 0.0)) continue;
    const double w = 1.0 / (e.std_error * e.std_error);
    wsum += w;
    acc += w * e.value;
  }
  if (wsum == 0.0) return {kNaN, kNaN};
  return {acc / wsum, 1.0 / std::sqrt(wsum)};
}

void EnsembleAccumulator::add(const ShotResult& r) noexcept {
  means_.add(r.measured_mean);
  shot_var_sum_ += r.measured_std * r.measured_std;
  clicks_ += r.clicks;
}

void EnsembleAccumulator::merge(const EnsembleAccumulator& o) noexcept {
  means_.merge(o.means_);
  shot_var_sum_ += o.shot_var_sum_;
  clicks_ += o.clicks_;
}

EnsembleSummary EnsembleAccumulator::summary(double incident_mean) const {
  require(shots() >= 1, "ensemble summary needs at least one shot");
  EnsembleSummary s;
  s.incident_mean = incident_mean;
  s.shots = shots();
  s.measured_mean = means_.mean();
  s.measured_variance = means_.variance();
  const auto g2 = g2_estimate(means_);
  s.g2 = g2.value;
  s.g2_err = g2.std_error;
  const double rms_std = std::sqrt(shot_var_sum_ / static_cast<double>(shots()));
  s.noise_db = s.measured_mean > 0.0 ? relative_noise_db(s.measured_mean, rms_std) : kNaN;
  if (incident_mean > 0.0) {
    s.efficiency_pnr = efficiency_pnr(s.measured_mean, incident_mean);
    const double p0 = 1.0 - static_cast<double>(clicks_) / (static_cast<double>(shots()) * kBins);
    s.efficiency_click = p0 > 0.0 ? efficiency_click(p0, incident_mean / kBins) : kNaN;
  } else {
    s.efficiency_pnr = kNaN;
    s.efficiency_click = kNaN;
  }
  return s;
}

void write_ensemble_csv_header(std::ostream& os) {
  os << "state,shots,incident_mean_photons,measured_mean_photons,variance_photons2,g2,g2_err,noise_db,"
        "efficiency_pnr,efficiency_click\n";
}

void write_ensemble_csv_row(std::ostream& os, std::size_t state, const EnsembleSummary& s) {
  os << state << ',' << s.shots << ',' << csv::num(s.incident_mean) << ',' << csv::num(s.measured_mean) << ','
     << csv::num(s.measured_variance) << ',' << csv::num(s.g2) << ',' << csv::num(s.g2_err) << ','
     << csv::num(s.noise_db) << ',' << csv::num(s.efficiency_pnr) << ',' << csv::num(s.efficiency_click) << '\n';
}

// ---------------------------------------------------------------------------

void SigmaProfile::add(double measured_mean, double measured_std) {
  by_n_[std::llround(measured_mean)].push_back(measured_std);
}

std::vector<SigmaProfile::Row> SigmaProfile::rows() const {
  std::vector<Row> out;
  for (const auto& [n, stds] : by_n_) {
    std::vector<double> v = stds;
    std::sort(v.begin(), v.end());
    auto q = [&](double p) {
      const double x = p * static_cast<double>(v.size() - 1);
      const auto i = static_cast<std::size_t>(x);
      const double f = x - static_cast<double>(i);
      return i + 1 < v.size() ? v[i] * (1 - f) + v[i + 1] * f : v[i];
    };
    out.push_back({n, v.size(), q(0.5), q(0.0015), q(0.9985)});
  }
  return out;
}

std::int64_t SigmaProfile::sub_unit_sigma_boundary() const {
  std::int64_t boundary = -1;
  for (const auto& [n, stds] : by_n_) {
    if (*std::max_element(stds.begin(), stds.end()) >= 1.0) break;
    boundary = n;
  }
  return boundary;
}

void SigmaProfile::write_csv(std::ostream& os) const {
  os << "measured_n_photons,shots,median_std_photons,lo_std_photons,hi_std_photons\n";
  for (const auto& r : rows())
    os << r.measured_n << ',' << r.shots << ',' << csv::num(r.median_std) << ',' << csv::num(r.lo_std) << ','
       << csv::num(r.hi_std) << '\n';
}

// ---------------------------------------------------------------------------

BinResponse bin_response(const BinTimingModel& model, const Lut& lut, std::uint64_t window_ps, int n_cap) {
  require(n_cap >= 1 && n_cap <= model.n_cap(), "response n_cap must lie in 1..model n_cap");
  BinResponse r;
  r.first.assign(static_cast<std::size_t>(n_cap) + 1, 0.0);
  r.second.assign(static_cast<std::size_t>(n_cap) + 1, 0.0);
  for (int k = 1; k <= n_cap; ++k) {
    const auto& p = model.component(k).params;
    double e1 = 0.0, e2 = 0.0;
    double prev = emg_cdf(-0.5, p);
    // Arrival times are rounded to whole picoseconds; off-window ones are lost.
    for (std::uint64_t t = 0; t < window_ps; ++t) {
      const double next = emg_cdf(static_cast<double>(t) + 0.5, p);
      const double w = next - prev;
      prev = next;
      if (w <= 0.0) continue;
      bool clamped = false;
      const std::size_t row = lut.row_index(static_cast<double>(t), clamped);
      const double m = lut.row_mean(row);
      e1 += w * m;
      e2 += w * m * m;
    }
    r.first[k] = e1;
    r.second[k] = e2;
  }
  return r;
}

std::vector<VariancePoint> blinded_variance_curve(std::span<const double> incident_means,
                                                  const DetectorConfig& config, const BinResponse* response) {
  if (response) {
    require(!response->first.empty() && response->first.size() == response->second.size(),
            "malformed bin response table");
  }
  std::vector<VariancePoint> out;
  out.reserve(incident_means.size());
  for (double incident : incident_means) {
    const auto lambda = split_tree(incident, config);
    const double blind = config.blinding.probability(incident);
    VariancePoint pt{incident, 0.0, 0.0};
    for (double lam : lambda) {
      double e1, e2;
      if (!response) {
        e1 = lam;
        e2 = lam + lam * lam;
      } else {
        const std::size_t cap = response->first.size() - 1;
        e1 = e2 = 0.0;
        double pk = std::exp(-lam);
        double tail = 1.0;
        for (std::size_t k = 0; k < cap; ++k) {
          e1 += pk * response->first[k];
          e2 += pk * response->second[k];
          tail -= pk;
          pk *= lam / static_cast<double>(k + 1);
        }
        tail = std::max(tail, 0.0);
        e1 += tail * response->first[cap];
        e2 += tail * response->second[cap];
      }
      const double mean = (1.0 - blind) * e1;
      pt.mean += mean;
      pt.variance += (1.0 - blind) * e2 - mean * mean;
    }
    out.push_back(pt);
  }
  return out;
}

}  // namespace pnr
