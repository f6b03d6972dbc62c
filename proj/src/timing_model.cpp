#include "pnr/timing_model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "linalg.hpp"

namespace pnr {

namespace {

constexpr double kSqrt2 = std::numbers::sqrt2;

// log(erfcx(z)) for z >= 0, where erfcx(z) = exp(z^2) erfc(z).
double log_erfcx_nonneg(double z) {
  if (z < 25.0) return z * z + std::log(std::erfc(z));
  const double iz2 = 1.0 / (z * z);
  const double series =
      1.0 - 0.5 * iz2 * (1.0 - 1.5 * iz2 * (1.0 - 2.5 * iz2 * (1.0 - 3.5 * iz2)));
  return std::log(std::numbers::inv_sqrtpi / z * series);
}

double normal_cdf(double u) { return 0.5 * std::erfc(-u / kSqrt2); }

void require_finite_time(double t) {
  if (!std::isfinite(t)) fail(ErrorCategory::invalid_argument, "EMG evaluated at non-finite time");
}

}  // namespace

void EmgParams::validate() const {
  if (!std::isfinite(mu_ps) || !std::isfinite(sigma_ps) || !std::isfinite(tau_ps))
    fail(ErrorCategory::invalid_argument, "EMG parameters must be finite");
  if (!(sigma_ps > 0.0)) fail(ErrorCategory::invalid_argument, "EMG sigma must be > 0");
  if (!(tau_ps > 0.0)) fail(ErrorCategory::invalid_argument, "EMG tau must be > 0");
}

// Two branches of the same density. For z >= 0 the erfc factor is rewritten
// with erfcx, which cancels the exp(sigma^2 / 2 tau^2) growth analytically;
// for z < 0 the exponent is already bounded by -sigma^2 / 2 tau^2.
double emg_log_pdf(double t_ps, const EmgParams& p) {
  require_finite_time(t_ps);
  const double x = t_ps - p.mu_ps;
  const double s = p.sigma_ps;
  const double tau = p.tau_ps;
  const double z = (s / tau - x / s) / kSqrt2;
  const double base = -std::log(2.0 * tau);
  if (z >= 0.0) return base - x * x / (2.0 * s * s) + log_erfcx_nonneg(z);
  return base + s * s / (2.0 * tau * tau) - x / tau + std::log(std::erfc(z));
}

double emg_pdf(double t_ps, const EmgParams& p) { return std::exp(emg_log_pdf(t_ps, p)); }

// F(t) = Phi((t - mu) / sigma) - tau f(t)
double emg_cdf(double t_ps, const EmgParams& p) {
  const double f = emg_pdf(t_ps, p);
  const double c = normal_cdf((t_ps - p.mu_ps) / p.sigma_ps) - p.tau_ps * f;
  return std::clamp(c, 0.0, 1.0);
}

double emg_sample(Rng& rng, const EmgParams& p) {
  std::normal_distribution<double> gauss(p.mu_ps, p.sigma_ps);
  std::exponential_distribution<double> tail(1.0 / p.tau_ps);
  const double g = gauss(rng);
  return g + tail(rng);
}

BinTimingModel::BinTimingModel(std::vector<EmgComponent> components)
    : components_(std::move(components)) {
  require(!components_.empty(), "timing model needs at least one component");
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < components_.size(); ++i) {
    const auto& c = components_[i];
    if (c.n != static_cast<int>(i) + 1) {
      std::ostringstream os;
      os << "timing model component " << i << " has n = " << c.n << ", expected " << i + 1;
      fail(ErrorCategory::invalid_argument, os.str());
    }
    c.params.validate();
    if (!(c.weight >= 0.0) || !std::isfinite(c.weight))
      fail(ErrorCategory::invalid_argument, "timing model weights must be >= 0");
    weight_sum += c.weight;
    if (i > 0 && !(c.params.mean() < components_[i - 1].params.mean())) {
      std::ostringstream os;
      os << "timing model mean arrival must decrease with n; component n=" << c.n
         << " has mean " << c.params.mean() << " ps, n=" << c.n - 1 << " has "
         << components_[i - 1].params.mean() << " ps";
      fail(ErrorCategory::invalid_argument, os.str());
    }
  }
  if (std::abs(weight_sum - 1.0) > 1e-9)
    fail(ErrorCategory::invalid_argument, "timing model weights must sum to 1");
}

double BinTimingModel::mixture_pdf(double t_ps) const {
  double f = 0.0;
  for (const auto& c : components_)
    if (c.weight > 0.0) f += c.weight * emg_pdf(t_ps, c.params);
  return f;
}

double BinTimingModel::mixture_cdf(double t_ps) const {
  double f = 0.0;
  for (const auto& c : components_)
    if (c.weight > 0.0) f += c.weight * emg_cdf(t_ps, c.params);
  return std::clamp(f, 0.0, 1.0);
}

EmgParams TimingFamily::params_for(int n) const {
  require(n >= 1, "photon number must be >= 1");
  const double dn = static_cast<double>(n);
  EmgParams p{t0_ps - a_ps * std::log(dn), sigma0_ps / std::sqrt(dn), tau0_ps / dn};
  p.validate();
  return p;
}

BinTimingModel TimingFamily::model(int n_cap) const {
  require(n_cap >= 1, "n_cap must be >= 1");
  std::vector<EmgComponent> comps;
  comps.reserve(static_cast<std::size_t>(n_cap));
  for (int n = 1; n <= n_cap; ++n)
    comps.push_back({n, params_for(n), 1.0 / static_cast<double>(n_cap)});
  // Exact renormalization so the sum test is not at the mercy of rounding.
  double s = 0.0;
  for (const auto& c : comps) s += c.weight;
  for (auto& c : comps) c.weight /= s;
  return BinTimingModel(std::move(comps));
}

void ArrivalHistogram::validate() const {
  require(bin_width_ps > 0.0 && std::isfinite(bin_width_ps), "histogram bin width must be > 0");
  require(std::isfinite(origin_ps), "histogram origin must be finite");
  require(!counts.empty(), "histogram needs at least one bin");
}

std::uint64_t ArrivalHistogram::total() const noexcept {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

ArrivalHistogram make_histogram(std::span<const double> times_ps, double origin_ps,
                                double bin_width_ps, std::size_t bins) {
  ArrivalHistogram h{bin_width_ps, origin_ps, std::vector<std::uint64_t>(bins, 0)};
  h.validate();
  for (double t : times_ps) {
    const double k = std::floor((t - origin_ps) / bin_width_ps);
    if (k >= 0.0 && k < static_cast<double>(bins)) ++h.counts[static_cast<std::size_t>(k)];
  }
  return h;
}

// ---------------------------------------------------------------------------
// Mixture fitting

namespace {

// Parameter vector layout for K components:
//   [mu_j, log sigma_j, log tau_j] for j = 0..K-1, then K-1 weight logits
//   (the last logit is pinned to 0).
struct Layout {
  int k = 1;
  int size() const { return 4 * k - 1; }
  int mu(int j) const { return 3 * j; }
  int log_sigma(int j) const { return 3 * j + 1; }
  int log_tau(int j) const { return 3 * j + 2; }
  int logit(int j) const { return 3 * k + j; }
};

struct Unpacked {
  std::vector<EmgParams> params;
  std::vector<double> weights;
};

Unpacked unpack(const Layout& L, const std::vector<double>& theta) {
  Unpacked u;
  u.params.resize(static_cast<std::size_t>(L.k));
  u.weights.resize(static_cast<std::size_t>(L.k));
  double max_logit = 0.0;
  for (int j = 0; j + 1 < L.k; ++j) max_logit = std::max(max_logit, theta[L.logit(j)]);
  double z = 0.0;
  for (int j = 0; j < L.k; ++j) {
    u.params[j] = {theta[L.mu(j)], std::exp(theta[L.log_sigma(j)]), std::exp(theta[L.log_tau(j)])};
    const double logit = j + 1 < L.k ? theta[L.logit(j)] : 0.0;
    u.weights[j] = std::exp(logit - max_logit);
    z += u.weights[j];
  }
  for (auto& w : u.weights) w /= z;
  return u;
}

class MixtureFitter {
 public:
  MixtureFitter(const ArrivalHistogram& hist, int k, const FitOptions& options)
      : hist_(hist), layout_{k}, options_(options) {
    const std::size_t nb = hist.counts.size();
    y_.resize(nb);
    for (std::size_t i = 0; i < nb; ++i) y_[i] = static_cast<double>(hist.counts[i]);
    total_ = std::accumulate(y_.begin(), y_.end(), 0.0);
    edges_.resize(nb + 1);
    for (std::size_t i = 0; i <= nb; ++i) edges_[i] = hist.edge(i);
    lo_log_width_ = std::log(0.02 * hist.bin_width_ps);
    hi_log_width_ = std::log(edges_.back() - edges_.front());
  }

  struct Outcome {
    std::vector<double> theta;
    std::vector<double> lambda;
    double deviance = std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
  };

  Outcome run(std::vector<double> theta) const {
    clamp(theta);
    Outcome out;
    out.theta = theta;
    if (!expected(theta, out.lambda)) return out;
    out.deviance = deviance(out.lambda);
    double nu = 1e-3;
    const int p = layout_.size();
    for (int it = 0; it < options_.max_iterations; ++it) {
      out.iterations = it + 1;
      std::vector<double> jac;
      jacobian(out.theta, out.lambda, jac);
      const std::size_t nb = y_.size();
      std::vector<double> h(static_cast<std::size_t>(p * p), 0.0), g(static_cast<std::size_t>(p), 0.0);
      for (std::size_t i = 0; i < nb; ++i) {
        const double lam = out.lambda[i];
        const double r = 1.0 - y_[i] / lam;
        for (int a = 0; a < p; ++a) {
          const double ja = jac[static_cast<std::size_t>(a) * nb + i];
          if (ja == 0.0) continue;
          g[a] += r * ja;
          const double s = ja / lam;
          for (int b = 0; b <= a; ++b) h[a * p + b] += s * jac[static_cast<std::size_t>(b) * nb + i];
        }
      }
      for (int a = 0; a < p; ++a)
        for (int b = 0; b < a; ++b) h[b * p + a] = h[a * p + b];

      bool accepted = false;
      double new_dev = out.deviance;
      std::vector<double> cand, cand_lambda;
      while (nu < 1e12) {
        std::vector<double> a = h;
        double max_diag = 0.0;
        for (int d = 0; d < p; ++d) max_diag = std::max(max_diag, h[d * p + d]);
        for (int d = 0; d < p; ++d)
          a[d * p + d] += nu * std::max(h[d * p + d], 1e-12 * max_diag + 1e-300);
        std::vector<double> step(g.size());
        for (std::size_t d = 0; d < g.size(); ++d) step[d] = -g[d];
        if (detail::cholesky_solve(a, step, p)) {
          cand = out.theta;
          for (int d = 0; d < p; ++d) cand[d] += step[d];
          clamp(cand);
          if (expected(cand, cand_lambda)) {
            new_dev = deviance(cand_lambda);
            if (new_dev < out.deviance) {
              accepted = true;
              break;
            }
          }
        }
        nu *= 4.0;
      }
      if (!accepted) {
        // No descent direction left at any damping: stationary point.
        out.converged = true;
        return out;
      }
      const double rel = (out.deviance - new_dev) / std::max(out.deviance, 1.0);
      out.theta = std::move(cand);
      out.lambda = std::move(cand_lambda);
      out.deviance = new_dev;
      nu = std::max(nu / 5.0, 1e-9);
      if (rel < options_.relative_tolerance) {
        out.converged = true;
        return out;
      }
    }
    return out;
  }

  // Inverse Fisher information at theta (for standard errors).
  std::vector<double> covariance(const std::vector<double>& theta,
                                 const std::vector<double>& lambda) const {
    const int p = layout_.size();
    const std::size_t nb = y_.size();
    std::vector<double> jac;
    jacobian(theta, lambda, jac);
    std::vector<double> h(static_cast<std::size_t>(p * p), 0.0);
    for (std::size_t i = 0; i < nb; ++i)
      for (int a = 0; a < p; ++a) {
        const double ja = jac[static_cast<std::size_t>(a) * nb + i];
        if (ja == 0.0) continue;
        for (int b = 0; b < p; ++b) h[a * p + b] += ja * jac[static_cast<std::size_t>(b) * nb + i] / lambda[i];
      }
    std::vector<double> inv;
    if (!detail::spd_inverse(h, p, inv)) inv.assign(static_cast<std::size_t>(p * p), std::numeric_limits<double>::quiet_NaN());
    return inv;
  }

  double deviance(const std::vector<double>& lambda) const {
    double d = 0.0;
    for (std::size_t i = 0; i < y_.size(); ++i) {
      const double y = y_[i];
      const double lam = lambda[i];
      d += (y > 0.0 ? y * std::log(y / lam) : 0.0) - (y - lam);
    }
    return 2.0 * d;
  }

  const Layout& layout() const { return layout_; }
  double total() const { return total_; }

 private:
  // Per-bin cell probabilities of one component (CDF differences).
  void cells(const EmgParams& p, std::vector<double>& out) const {
    const std::size_t nb = y_.size();
    out.resize(nb);
    double prev = emg_cdf(edges_[0], p);
    for (std::size_t i = 0; i < nb; ++i) {
      const double next = emg_cdf(edges_[i + 1], p);
      out[i] = std::max(next - prev, 0.0);
      prev = next;
    }
  }

  // lambda_i = total * m_i / sum(m): the mixture conditioned on the window.
  bool expected(const std::vector<double>& theta, std::vector<double>& lambda) const {
    const Unpacked u = unpack(layout_, theta);
    const std::size_t nb = y_.size();
    lambda.assign(nb, 0.0);
    std::vector<double> c;
    for (int j = 0; j < layout_.k; ++j) {
      cells(u.params[j], c);
      for (std::size_t i = 0; i < nb; ++i) lambda[i] += u.weights[j] * c[i];
    }
    const double s = std::accumulate(lambda.begin(), lambda.end(), 0.0);
    if (!(s > 1e-12) || !std::isfinite(s)) return false;
    for (auto& l : lambda) l = std::max(total_ * l / s, 1e-300);
    return true;
  }

  void jacobian(const std::vector<double>& theta, const std::vector<double>& lambda,
                std::vector<double>& jac) const {
    const Unpacked u = unpack(layout_, theta);
    const std::size_t nb = y_.size();
    const int p = layout_.size();
    // Derivatives of the unnormalized mixture m_i, then of lambda.
    std::vector<double> dm(static_cast<std::size_t>(p) * nb, 0.0);
    std::vector<double> m(nb, 0.0);
    std::vector<std::vector<double>> comp_cells(static_cast<std::size_t>(layout_.k));
    for (int j = 0; j < layout_.k; ++j) {
      cells(u.params[j], comp_cells[j]);
      for (std::size_t i = 0; i < nb; ++i) m[i] += u.weights[j] * comp_cells[j][i];
    }
    std::vector<double> plus, minus;
    for (int j = 0; j < layout_.k; ++j) {
      const EmgParams& base = u.params[j];
      for (int q = 0; q < 3; ++q) {
        EmgParams hi = base, lo = base;
        double h;
        if (q == 0) {
          h = 1e-4 * std::min(base.sigma_ps, base.tau_ps) + 1e-6;
          hi.mu_ps += h;
          lo.mu_ps -= h;
        } else {
          h = 1e-5;
          double& fh = q == 1 ? hi.sigma_ps : hi.tau_ps;
          double& fl = q == 1 ? lo.sigma_ps : lo.tau_ps;
          fh *= std::exp(h);
          fl *= std::exp(-h);
        }
        cells(hi, plus);
        cells(lo, minus);
        const int col = 3 * j + q;
        for (std::size_t i = 0; i < nb; ++i)
          dm[static_cast<std::size_t>(col) * nb + i] = u.weights[j] * (plus[i] - minus[i]) / (2.0 * h);
      }
    }
    for (int kk = 0; kk + 1 < layout_.k; ++kk) {
      const int col = layout_.logit(kk);
      for (std::size_t i = 0; i < nb; ++i)
        dm[static_cast<std::size_t>(col) * nb + i] = u.weights[kk] * (comp_cells[kk][i] - m[i]);
    }
    const double s = std::accumulate(m.begin(), m.end(), 0.0);
    jac.assign(static_cast<std::size_t>(p) * nb, 0.0);
    for (int a = 0; a < p; ++a) {
      const double* col = &dm[static_cast<std::size_t>(a) * nb];
      const double ds = std::accumulate(col, col + nb, 0.0);
      for (std::size_t i = 0; i < nb; ++i)
        jac[static_cast<std::size_t>(a) * nb + i] = total_ * (col[i] / s - m[i] * ds / (s * s));
    }
    (void)lambda;
  }

  void clamp(std::vector<double>& theta) const {
    const double lo_t = edges_.front() - 0.5 * (edges_.back() - edges_.front());
    const double hi_t = edges_.back() + 0.5 * (edges_.back() - edges_.front());
    for (int j = 0; j < layout_.k; ++j) {
      theta[layout_.mu(j)] = std::clamp(theta[layout_.mu(j)], lo_t, hi_t);
      theta[layout_.log_sigma(j)] = std::clamp(theta[layout_.log_sigma(j)], lo_log_width_, hi_log_width_);
      theta[layout_.log_tau(j)] = std::clamp(theta[layout_.log_tau(j)], lo_log_width_, hi_log_width_);
    }
    for (int j = 0; j + 1 < layout_.k; ++j)
      theta[layout_.logit(j)] = std::clamp(theta[layout_.logit(j)], -30.0, 30.0);
  }

  const ArrivalHistogram& hist_;
  Layout layout_;
  FitOptions options_;
  std::vector<double> y_;
  std::vector<double> edges_;
  double total_ = 0.0;
  double lo_log_width_ = 0.0;
  double hi_log_width_ = 0.0;
};

struct Seed {
  double mu, sigma, tau, weight;
};

std::vector<double> smooth(const std::vector<std::uint64_t>& counts, double kernel_bins) {
  const int n = static_cast<int>(counts.size());
  const int r = static_cast<int>(std::ceil(3.0 * kernel_bins));
  std::vector<double> w(static_cast<std::size_t>(2 * r + 1));
  for (int i = -r; i <= r; ++i) w[i + r] = std::exp(-0.5 * i * i / (kernel_bins * kernel_bins));
  std::vector<double> out(counts.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0, norm = 0.0;
    for (int d = -r; d <= r; ++d) {
      const int j = i + d;
      if (j < 0 || j >= n) continue;
      acc += w[d + r] * static_cast<double>(counts[j]);
      norm += w[d + r];
    }
    out[i] = acc / norm;
  }
  return out;
}

struct Peak {
  std::size_t index;
  double height;
  double left_hw;   // half width at half maximum, ps
  double right_hw;
};

std::vector<Peak> find_peaks(const ArrivalHistogram& h) {
  const auto s = smooth(h.counts, 2.0);
  const double top = *std::max_element(s.begin(), s.end());
  const int n = static_cast<int>(s.size());
  std::vector<Peak> peaks;
  const int guard = 4;
  for (int i = 0; i < n; ++i) {
    if (s[i] < 0.003 * top || s[i] <= 0.0) continue;
    bool is_max = true;
    for (int d = -guard; d <= guard && is_max; ++d) {
      const int j = i + d;
      if (d == 0 || j < 0 || j >= n) continue;
      if (s[j] > s[i] || (d < 0 && s[j] == s[i])) is_max = false;
    }
    if (!is_max) continue;
    int l = i, r = i;
    while (l > 0 && s[l] > 0.5 * s[i]) --l;
    while (r + 1 < n && s[r] > 0.5 * s[i]) ++r;
    peaks.push_back({static_cast<std::size_t>(i), s[i],
                     std::max(i - l, 1) * h.bin_width_ps, std::max(r - i, 1) * h.bin_width_ps});
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.height > b.height; });
  return peaks;
}

std::vector<double> pack(const Layout& L, std::vector<Seed> seeds) {
  // Latest-arriving first: component 0 becomes n = 1.
  std::sort(seeds.begin(), seeds.end(),
            [](const Seed& a, const Seed& b) { return a.mu + a.tau > b.mu + b.tau; });
  std::vector<double> theta(static_cast<std::size_t>(L.size()));
  const double w_last = std::max(seeds.back().weight, 1e-6);
  for (int j = 0; j < L.k; ++j) {
    theta[L.mu(j)] = seeds[j].mu;
    theta[L.log_sigma(j)] = std::log(seeds[j].sigma);
    theta[L.log_tau(j)] = std::log(seeds[j].tau);
    if (j + 1 < L.k) theta[L.logit(j)] = std::log(std::max(seeds[j].weight, 1e-6) / w_last);
  }
  return theta;
}

// Peak-seeded start; missing components are placed below the earliest peak
// following the logarithmic spacing of the family law.
std::vector<Seed> seeds_from_peaks(const ArrivalHistogram& h, const std::vector<Peak>& all,
                                   int k, double tail_factor) {
  std::vector<Peak> peaks(all.begin(), all.begin() + std::min<std::size_t>(all.size(), k));
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.index > b.index; });
  std::vector<Seed> seeds;
  for (const auto& p : peaks) {
    const double sigma = std::max(p.left_hw / 1.1774, 0.5 * h.bin_width_ps);
    const double tau = std::max(tail_factor * sigma, std::max(p.right_hw - p.left_hw, 0.2 * sigma));
    const double t = h.center(p.index);
    seeds.push_back({t - 0.3 * tau, sigma, tau, p.height * (p.left_hw + p.right_hw)});
  }
  double spacing = 0.0;
  if (seeds.size() >= 2)
    spacing = (seeds[seeds.size() - 2].mu - seeds.back().mu) /
              std::log(static_cast<double>(seeds.size()) / static_cast<double>(seeds.size() - 1));
  else
    spacing = 4.0 * seeds.back().sigma / std::log(2.0);
  const double t_last = seeds.back().mu;
  const int have = static_cast<int>(seeds.size());
  const double min_weight = 1e-3 * seeds.front().weight;
  for (int n = have + 1; n <= k; ++n) {
    const double mu = t_last - spacing * std::log(static_cast<double>(n) / have);
    const Seed& ref = seeds[have - 1];
    const double shrink = std::sqrt(static_cast<double>(have) / n);
    seeds.push_back({mu, ref.sigma * shrink, ref.tau * shrink * shrink, min_weight});
  }
  return seeds;
}

std::vector<Seed> seeds_from_quantiles(const ArrivalHistogram& h, int k) {
  const double total = static_cast<double>(h.total());
  std::vector<Seed> seeds;
  std::size_t i = 0;
  double acc = 0.0;
  for (int j = 0; j < k; ++j) {
    const double target = total * (j + 1) / k;
    double m0 = 0.0, m1 = 0.0, m2 = 0.0;
    while (i < h.counts.size() && (acc < target || j + 1 == k)) {
      const double c = static_cast<double>(h.counts[i]);
      const double t = h.center(i);
      m0 += c;
      m1 += c * t;
      m2 += c * t * t;
      acc += c;
      ++i;
    }
    if (m0 <= 0.0) {
      seeds.push_back({h.center(std::min(i, h.counts.size() - 1)), h.bin_width_ps, h.bin_width_ps, 1.0 / k});
      continue;
    }
    const double mean = m1 / m0;
    const double sd = std::sqrt(std::max(m2 / m0 - mean * mean, h.bin_width_ps * h.bin_width_ps));
    seeds.push_back({mean - 0.5 * sd, 0.7 * sd, 0.5 * sd, m0 / total});
  }
  return seeds;
}

}  // namespace

FitResult fit_mixture(const ArrivalHistogram& hist, int n_cap, const FitOptions& options) {
  hist.validate();
  require(n_cap >= 1, "n_cap must be >= 1");
  const std::uint64_t total = hist.total();
  if (total < 1000) {
    std::ostringstream os;
    os << "histogram has " << total << " counts; at least 1000 are needed for a fit";
    fail(ErrorCategory::invalid_argument, os.str());
  }
  const Layout layout{n_cap};
  const auto populated = static_cast<int>(
      std::count_if(hist.counts.begin(), hist.counts.end(), [](std::uint64_t c) { return c > 0; }));
  if (populated < layout.size()) {
    std::ostringstream os;
    os << "histogram has " << populated << " populated bins but the fit has " << layout.size()
       << " free parameters";
    fail(ErrorCategory::invalid_argument, os.str());
  }

  MixtureFitter fitter(hist, n_cap, options);
  const auto peaks = find_peaks(hist);
  std::vector<std::vector<double>> starts;
  if (!peaks.empty()) {
    starts.push_back(pack(layout, seeds_from_peaks(hist, peaks, n_cap, 0.0)));
    starts.push_back(pack(layout, seeds_from_peaks(hist, peaks, n_cap, 1.5)));
  }
  starts.push_back(pack(layout, seeds_from_quantiles(hist, n_cap)));

  MixtureFitter::Outcome best;
  int best_iterations = 0;
  bool any_converged = false;
  for (const auto& start : starts) {
    auto out = fitter.run(start);
    if (!std::isfinite(out.deviance)) continue;
    const bool better = out.converged ? (!any_converged || out.deviance < best.deviance)
                                      : (!any_converged && out.deviance < best.deviance);
    if (better) {
      any_converged = any_converged || out.converged;
      best_iterations = out.iterations;
      best = std::move(out);
    }
  }

  const Unpacked u = best.theta.empty() ? Unpacked{} : unpack(layout, best.theta);
  std::vector<std::size_t> order(static_cast<std::size_t>(n_cap));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EmgComponent> comps;
  if (!best.theta.empty()) {
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return u.params[a].mean() > u.params[b].mean();
    });
    for (std::size_t r = 0; r < order.size(); ++r)
      comps.push_back({static_cast<int>(r) + 1, u.params[order[r]], u.weights[order[r]]});
  }
  if (!any_converged) {
    std::ostringstream os;
    os << "EMG mixture fit did not converge within " << options.max_iterations << " iterations";
    throw FitError(os.str(), comps, best.deviance);
  }
  double wsum = 0.0;
  for (const auto& c : comps) wsum += c.weight;
  for (auto& c : comps) c.weight /= wsum;
  for (std::size_t r = 1; r < comps.size(); ++r)
    if (!(comps[r].params.mean() < comps[r - 1].params.mean()))
      throw FitError("EMG mixture fit produced coincident components", comps, best.deviance);

  FitResult result{BinTimingModel(comps), 0.0, 0.0, 0, 0, 0, {}, {}};
  result.deviance = best.deviance;
  result.iterations = best_iterations;
  result.starts = static_cast<int>(starts.size());
  result.degrees_of_freedom = populated - layout.size();
  result.expected_counts = best.lambda;
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    const double d = static_cast<double>(hist.counts[i]) - best.lambda[i];
    result.pearson_chi2 += d * d / best.lambda[i];
  }

  const auto cov = fitter.covariance(best.theta, best.lambda);
  const int p = layout.size();
  result.standard_errors.resize(static_cast<std::size_t>(n_cap));
  for (std::size_t r = 0; r < order.size(); ++r) {
    const int j = static_cast<int>(order[r]);
    auto& se = result.standard_errors[r];
    se.mu_ps = std::sqrt(cov[layout.mu(j) * p + layout.mu(j)]);
    se.sigma_ps = u.params[j].sigma_ps * std::sqrt(cov[layout.log_sigma(j) * p + layout.log_sigma(j)]);
    se.tau_ps = u.params[j].tau_ps * std::sqrt(cov[layout.log_tau(j) * p + layout.log_tau(j)]);
    // Delta method through the softmax: dw_j/dl_k = w_j (delta_jk - w_k).
    double var_w = 0.0;
    for (int a = 0; a + 1 < n_cap; ++a)
      for (int b = 0; b + 1 < n_cap; ++b) {
        const double ga = u.weights[j] * ((a == j ? 1.0 : 0.0) - u.weights[a]);
        const double gb = u.weights[j] * ((b == j ? 1.0 : 0.0) - u.weights[b]);
        var_w += ga * gb * cov[layout.logit(a) * p + layout.logit(b)];
      }
    se.weight = std::sqrt(std::max(var_w, 0.0));
  }
  return result;
}

BinTimingModel extend_with_family(const BinTimingModel& fitted, int n_cap) {
  const int k = fitted.n_cap();
  require(n_cap >= k, "cannot extend a timing model to fewer components");
  if (n_cap == k) return fitted;
  require(k >= 2, "family extension needs at least two fitted components");
  double sx = 0, sy = 0, sxx = 0, sxy = 0, s_sigma = 0, s_tau = 0;
  for (const auto& c : fitted.components()) {
    const double x = std::log(static_cast<double>(c.n));
    sx += x;
    sy += c.params.mu_ps;
    sxx += x * x;
    sxy += x * c.params.mu_ps;
    s_sigma += c.params.sigma_ps * std::sqrt(static_cast<double>(c.n));
    s_tau += c.params.tau_ps * c.n;
  }
  const double dk = k;
  const double slope = (dk * sxy - sx * sy) / (dk * sxx - sx * sx);
  TimingFamily fam{(sy - slope * sx) / dk, -slope, s_sigma / dk, s_tau / dk};
  if (!(fam.a_ps > 0.0))
    fail(ErrorCategory::data, "fitted components do not arrive earlier with more photons");
  std::vector<EmgComponent> comps(fitted.components().begin(), fitted.components().end());
  for (int n = k + 1; n <= n_cap; ++n) comps.push_back({n, fam.params_for(n), 0.0});
  return BinTimingModel(std::move(comps));
}

// ---------------------------------------------------------------------------
// Model files

namespace {

nlohmann::json model_to_json(const BinTimingModel& m) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : m.components())
    comps.push_back({{"n", c.n},
                     {"mu_ps", c.params.mu_ps},
                     {"sigma_ps", c.params.sigma_ps},
                     {"tau_ps", c.params.tau_ps},
                     {"weight", c.weight}});
  return {{"n_cap", m.n_cap()}, {"components", comps}};
}

BinTimingModel model_from_json(const nlohmann::json& j) {
  std::vector<EmgComponent> comps;
  for (const auto& c : j.at("components"))
    comps.push_back({c.at("n").get<int>(),
                     {c.at("mu_ps").get<double>(), c.at("sigma_ps").get<double>(),
                      c.at("tau_ps").get<double>()},
                     c.at("weight").get<double>()});
  BinTimingModel m(std::move(comps));
  if (j.at("n_cap").get<int>() != m.n_cap())
    fail(ErrorCategory::format, "timing model n_cap does not match its component count");
  return m;
}

}  // namespace

void write_timing_models(std::ostream& os, const BinTable<BinTimingModel>& models) {
  require(!models.empty(), "no timing models to write");
  nlohmann::json bins = nlohmann::json::array();
  for (std::size_t i = 0; i < models.values().size(); ++i) {
    auto entry = model_to_json(models.values()[i]);
    if (!models.shared()) entry["bin"] = i;
    bins.push_back(std::move(entry));
  }
  nlohmann::json doc{{"format", "pnr-timing-model"},
                     {"version", 1},
                     {"layout", models.shared() ? "shared" : "per-bin"},
                     {"bins", bins}};
  os << doc.dump(1) << '\n';
  if (!os) fail(ErrorCategory::io, "failed writing timing model file");
}

BinTable<BinTimingModel> read_timing_models(std::istream& is) {
  nlohmann::json doc;
  try {
    is >> doc;
    if (doc.at("format") != "pnr-timing-model") fail(ErrorCategory::format, "not a pnr-timing-model document");
    if (doc.at("version") != 1) fail(ErrorCategory::format, "unsupported timing model version");
    const auto layout = doc.at("layout").get<std::string>();
    std::vector<BinTimingModel> models;
    for (const auto& b : doc.at("bins")) models.push_back(model_from_json(b));
    if (layout == "shared") {
      if (models.size() != 1) fail(ErrorCategory::format, "shared timing model file must hold one model");
      return BinTable<BinTimingModel>(std::move(models.front()));
    }
    if (layout != "per-bin") fail(ErrorCategory::format, "unknown timing model layout '" + layout + "'");
    if (models.size() != static_cast<std::size_t>(kBins))
      fail(ErrorCategory::format, "per-bin timing model file must hold 1024 models");
    for (std::size_t i = 0; i < models.size(); ++i)
      if (doc["bins"][i].value("bin", -1) != static_cast<int>(i))
        fail(ErrorCategory::format, "per-bin timing models must be listed in bin order");
    return BinTable<BinTimingModel>(std::move(models));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::format, std::string("malformed timing model file: ") + e.what());
  }
}

}  // namespace pnr
