#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "pnr/timing_model.hpp"

using namespace pnr;

namespace {

// Direct convolution of Gaussian(mu, sigma) with Exponential(tau), evaluated
// by adaptive quadrature over the exponential delay.
double emg_by_quadrature(double t, const EmgParams& p) {
  auto integrand = [&](double s) {
    const double u = (t - s - p.mu_ps) / p.sigma_ps;
    return std::exp(-s / p.tau_ps) / p.tau_ps * std::exp(-0.5 * u * u) /
           (p.sigma_ps * std::sqrt(2.0 * std::numbers::pi));
  };
  // The exponential kernel is negligible beyond 60 tau.
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(integrand, 0.0, 60.0 * p.tau_ps, 20,
                                                                       1e-14);
}

template <class F>
double integrate(F f, double a, double b) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-13);
}

BinTimingModel three_component_model() {
  return BinTimingModel({{1, {400.0, 14.0, 16.0}, 0.5},
                         {2, {295.0, 11.0, 12.0}, 0.3},
                         {3, {210.0, 9.0, 10.0}, 0.2}});
}

std::vector<double> sample_mixture(const BinTimingModel& m, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> cum;
  double acc = 0.0;
  for (const auto& c : m.components()) cum.push_back(acc += c.weight);
  std::vector<double> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double u = uniform01(rng);
    const auto j = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
    out.push_back(emg_sample(rng, m.components()[std::min(j, cum.size() - 1)].params));
  }
  return out;
}

}  // namespace

TEST_CASE("emg pdf normalizes and has analytic moments") {
  const EmgParams wide{0.0, 50.0, 100.0};
  CHECK(integrate([&](double t) { return emg_pdf(t, wide); }, -1000.0, 4000.0) ==
        doctest::Approx(1.0).epsilon(1e-9));

  const EmgParams unit{0.0, 1.0, 1.0};
  const double m1 = integrate([&](double t) { return t * emg_pdf(t, unit); }, -40.0, 80.0);
  const double m2 = integrate([&](double t) { return (t - 1.0) * (t - 1.0) * emg_pdf(t, unit); }, -40.0, 80.0);
  CHECK(m1 == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(m2 == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("emg pdf matches direct convolution quadrature") {
  const EmgParams unit{0.0, 1.0, 1.0};
  const double q = emg_by_quadrature(0.0, unit);
  CHECK(std::abs(emg_pdf(0.0, unit) - q) / q <= 1e-8);

  for (const EmgParams p : {EmgParams{10.0, 3.0, 0.05}, EmgParams{-5.0, 0.5, 40.0}, EmgParams{300.0, 15.0, 30.0}})
    for (double t : {p.mu_ps - 2 * p.sigma_ps, p.mu_ps, p.mu_ps + p.tau_ps, p.mu_ps + 3 * p.tau_ps}) {
      const double ref = emg_by_quadrature(t, p);
      CHECK(std::abs(emg_pdf(t, p) - ref) / ref <= 1e-7);
    }
}

TEST_CASE("emg stays finite when tau is much smaller than sigma") {
  const EmgParams p{0.0, 10.0, 1e-4};
  for (double t : {-60.0, -10.0, 0.0, 10.0, 60.0}) {
    const double gauss = std::exp(-0.5 * t * t / 100.0) / (10.0 * std::sqrt(2.0 * std::numbers::pi));
    CHECK(std::isfinite(emg_log_pdf(t, p)));
    CHECK(emg_pdf(t, p) == doctest::Approx(gauss).epsilon(1e-4));
  }
  // Deep left tail: log density keeps decreasing instead of underflowing to -inf.
  const double a = emg_log_pdf(-2000.0, p), b = emg_log_pdf(-3000.0, p);
  CHECK(std::isfinite(a));
  CHECK(b < a);
}

TEST_CASE("emg cdf limits, derivative and exponential limit") {
  const EmgParams p{300.0, 15.0, 30.0};
  CHECK(emg_cdf(p.mu_ps - 60 * p.sigma_ps, p) == doctest::Approx(0.0));
  CHECK(emg_cdf(p.mu_ps + 60 * p.tau_ps, p) == doctest::Approx(1.0));

  const double t = p.mu_ps + p.tau_ps;
  const double h = 1e-3;
  const double fd = (emg_cdf(t + h, p) - emg_cdf(t - h, p)) / (2 * h);
  CHECK(std::abs(fd - emg_pdf(t, p)) / emg_pdf(t, p) <= 1e-6);

  double prev = 0.0;
  for (double x = 0.0; x < 800.0; x += 0.7) {
    const double c = emg_cdf(x, p);
    CHECK(c >= prev);
    prev = c;
  }

  const EmgParams sharp{5.0, 20.0 * 1e-6, 20.0};
  for (double x : {6.0, 10.0, 25.0, 60.0, 100.0}) {
    const double expect = 1.0 - std::exp(-(x - sharp.mu_ps) / sharp.tau_ps);
    CHECK(std::abs(emg_cdf(x, sharp) - expect) / expect <= 1e-4);
  }
}

TEST_CASE("emg rejects bad input") {
  CHECK_THROWS_AS(emg_pdf(std::numeric_limits<double>::quiet_NaN(), EmgParams{}), Error);
  CHECK_THROWS_AS(emg_cdf(std::numeric_limits<double>::infinity(), EmgParams{}), Error);
  CHECK_THROWS_AS(EmgParams({0.0, 0.0, 1.0}).validate(), Error);
  CHECK_THROWS_AS(EmgParams({0.0, 1.0, -1.0}).validate(), Error);
}

TEST_CASE("emg sampling: moments, KS distance, determinism") {
  const EmgParams p{100.0, 12.0, 25.0};
  Rng rng(42);
  const std::size_t n = 1'000'000;
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = emg_sample(rng, p);
    s1 += x;
    s2 += x * x;
  }
  const double mean = s1 / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean - p.mean()) <= 5.0 * std::sqrt(p.variance() / n));
  CHECK(var == doctest::Approx(p.variance()).epsilon(0.01));

  Rng rng2(7);
  std::vector<double> xs(100'000);
  for (auto& x : xs) x = emg_sample(rng2, p);
  std::sort(xs.begin(), xs.end());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = emg_cdf(xs[i], p);
    d = std::max({d, std::abs(f - double(i) / xs.size()), std::abs(f - double(i + 1) / xs.size())});
  }
  CHECK(d <= 1.628 / std::sqrt(double(xs.size())));

  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) CHECK(emg_sample(a, p) == emg_sample(b, p));
}

TEST_CASE("bin timing model invariants") {
  CHECK_NOTHROW(three_component_model());
  CHECK_THROWS_AS(BinTimingModel({}), Error);
  // Means not decreasing in n.
  CHECK_THROWS_AS(BinTimingModel({{1, {200.0, 5.0, 5.0}, 0.5}, {2, {300.0, 5.0, 5.0}, 0.5}}), Error);
  // Weights not normalized.
  CHECK_THROWS_AS(BinTimingModel({{1, {300.0, 5.0, 5.0}, 0.5}, {2, {200.0, 5.0, 5.0}, 0.4}}), Error);
  // Missing n.
  CHECK_THROWS_AS(BinTimingModel({{1, {300.0, 5.0, 5.0}, 0.5}, {3, {200.0, 5.0, 5.0}, 0.5}}), Error);

  const auto fam = TimingFamily{}.model(15);
  CHECK(fam.n_cap() == 15);
  for (int n = 2; n <= 15; ++n) CHECK(fam.component(n).params.mean() < fam.component(n - 1).params.mean());
  CHECK(fam.component(4).params.sigma_ps == doctest::Approx(4.0));
}

TEST_CASE("fit recovers a known three-component mixture") {
  const auto truth = three_component_model();
  const auto samples = sample_mixture(truth, 100'000, 2024);
  const auto hist = make_histogram(samples, 0.0, 1.0, 700);
  const auto fit = fit_mixture(hist, 3);
  for (int n = 1; n <= 3; ++n) {
    const auto& t = truth.component(n);
    const auto& f = fit.model.component(n);
    CAPTURE(n);
    CHECK(std::abs(f.params.mu_ps / t.params.mu_ps - 1.0) <= 0.02);
    CHECK(std::abs(f.params.sigma_ps / t.params.sigma_ps - 1.0) <= 0.02);
    CHECK(std::abs(f.params.tau_ps / t.params.tau_ps - 1.0) <= 0.02);
    CHECK(std::abs(f.weight / t.weight - 1.0) <= 0.02);
    CHECK(fit.standard_errors[n - 1].mu_ps > 0.0);
  }
  CHECK(fit.degrees_of_freedom > 0);
  CHECK(fit.expected_counts.size() == hist.counts.size());

  // Refit from the fitted model's own samples: parameters agree within a few SE.
  const auto again = fit_mixture(make_histogram(sample_mixture(fit.model, 100'000, 77), 0.0, 1.0, 700), 3);
  for (int n = 1; n <= 3; ++n) {
    const double se = std::hypot(fit.standard_errors[n - 1].mu_ps, again.standard_errors[n - 1].mu_ps);
    CHECK(std::abs(again.model.component(n).params.mu_ps - fit.model.component(n).params.mu_ps) <= 5 * se);
  }
}

TEST_CASE("fit edge cases") {
  const BinTimingModel single({{1, {250.0, 10.0, 20.0}, 1.0}});
  const auto fit = fit_mixture(make_histogram(sample_mixture(single, 20'000, 3), 0.0, 1.0, 600), 1);
  CHECK(fit.model.component(1).weight == 1.0);
  CHECK(fit.model.component(1).params.mean() == doctest::Approx(270.0).epsilon(0.01));

  ArrivalHistogram empty{1.0, 0.0, std::vector<std::uint64_t>(100, 0)};
  CHECK_THROWS_AS(fit_mixture(empty, 3), Error);

  // Plenty of counts but only a handful of populated bins.
  ArrivalHistogram spiky{1.0, 0.0, std::vector<std::uint64_t>(100, 0)};
  spiky.counts[10] = 5000;
  spiky.counts[20] = 5000;
  CHECK_THROWS_AS(fit_mixture(spiky, 3), Error);
}

TEST_CASE("family extension keeps fitted components and continues the law") {
  const TimingFamily fam{};
  std::vector<EmgComponent> comps;
  for (int n = 1; n <= 4; ++n) comps.push_back({n, fam.params_for(n), 0.25});
  const auto ext = extend_with_family(BinTimingModel(comps), 15);
  CHECK(ext.n_cap() == 15);
  CHECK(ext.component(2) == comps[1]);
  const auto expect = fam.params_for(12);
  CHECK(ext.component(12).params.mu_ps == doctest::Approx(expect.mu_ps).epsilon(1e-9));
  CHECK(ext.component(12).params.sigma_ps == doctest::Approx(expect.sigma_ps).epsilon(1e-9));
  CHECK(ext.component(12).params.tau_ps == doctest::Approx(expect.tau_ps).epsilon(1e-9));
  CHECK(ext.component(12).weight == 0.0);
}

TEST_CASE("timing model files round-trip") {
  const BinTable<BinTimingModel> shared(three_component_model());
  std::stringstream ss;
  write_timing_models(ss, shared);
  const auto back = read_timing_models(ss);
  REQUIRE(back.shared());
  CHECK(back[0] == shared[0]);

  std::vector<BinTimingModel> per;
  for (int b = 0; b < kBins; ++b) per.push_back(TimingFamily{300.0 + b * 0.01, 80.0, 8.0, 2.0}.model(3));
  std::stringstream ss2;
  write_timing_models(ss2, BinTable<BinTimingModel>(per));
  const auto back2 = read_timing_models(ss2);
  CHECK(back2.distinct() == 1024);
  CHECK(back2[777] == per[777]);

  std::stringstream bad("{\"format\": \"something-else\"}");
  CHECK_THROWS_AS(read_timing_models(bad), Error);
}
