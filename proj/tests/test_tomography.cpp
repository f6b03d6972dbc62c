#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "pnr/tomography.hpp"
#include "pnr/error.hpp"

using namespace pnr;

namespace {

// Sort-based simplex projection.
std::vector<double> reference_projection(std::vector<double> v) {
  std::vector<double> u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  for (auto& x : v) x = std::max(x - theta, 0.0);
  return v;
}

double binomial(int m, int k, double p) {
  if (k < 0 || k > m) return 0.0;
  return std::exp(std::lgamma(m + 1.0) - std::lgamma(k + 1.0) - std::lgamma(m - k + 1.0) + k * std::log(p) +
                  (m - k) * std::log1p(-p));
}

// Binomial loss with the outcomes above N - 1 lumped into the last column.
Matrix binomial_povm(std::size_t M, std::size_t N, double eta) {
  Matrix pi(M, N);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t k = 0; k <= m; ++k) pi(m, std::min(k, N - 1)) += binomial(int(m), int(k), eta);
  return pi;
}

}  // namespace

TEST_CASE("probe matrix") {
  const std::vector<double> means{0.0, 1.0, 100.0, 15393.0};
  // A truncation at the largest mean cuts off half of that probe's mass.
  try {
    build_probe_matrix(means, 15394);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("increase M") != std::string::npos);
  }
  const std::vector<double> low{0.0, 1.0, 100.0};
  const auto F_low = build_probe_matrix(low, 15394);
  for (std::size_t d = 0; d < low.size(); ++d) {
    const auto& r = F_low.row(d);
    const double sum = std::accumulate(r.values.begin(), r.values.end(), 0.0);
    CHECK(sum >= 1.0 - 1e-10);
    CHECK(sum <= 1.0 + 1e-12);
  }
  const auto F = build_probe_matrix(means, 16700);
  CHECK(F.rows() == 4);
  CHECK(F.columns() == 16700);
  CHECK(F(0, 0) == 1.0);
  CHECK(F(0, 1) == 0.0);
  for (std::size_t d = 0; d < means.size(); ++d) {
    const auto& r = F.row(d);
    const double sum = std::accumulate(r.values.begin(), r.values.end(), 0.0);
    CHECK(sum >= 1.0 - 1e-10);
    CHECK(sum <= 1.0 + 1e-12);
    CHECK(F(d, 0) == doctest::Approx(std::exp(-means[d])).epsilon(1e-12));
  }
  CHECK(F(2, 100) == doctest::Approx(std::exp(-100.0 + 100.0 * std::log(100.0) - std::lgamma(101.0))).epsilon(1e-12));
  CHECK_THROWS_AS(build_probe_matrix(std::vector<double>{50.0}, 60), Error);
}

TEST_CASE("outcome matrix") {
  auto P = build_outcome_matrix({{0.0, 0.2, 0.4}, {3.4, 3.6}}, 6);
  CHECK(P(0, 0) == 1.0);
  CHECK(P(1, 3) == 0.5);
  CHECK(P(1, 4) == 0.5);
  for (std::size_t d = 0; d < 2; ++d) {
    const auto r = P.row(d);
    CHECK(std::accumulate(r.begin(), r.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(build_outcome_matrix({{5.6}}, 6), Error);
  CHECK_THROWS_AS(build_outcome_matrix({{1.0}, {}}, 6), Error);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(40.0, 6.0);
  std::vector<double> xs(100'000);
  for (auto& x : xs) x = std::max(0.0, g(rng));
  const auto H = build_outcome_matrix({xs}, 100);
  double hist_mean = 0.0;
  for (std::size_t n = 0; n < 100; ++n) hist_mean += n * H(0, n);
  CHECK(std::abs(hist_mean - std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size()) <= 0.5);
}

TEST_CASE("simplex projection") {
  std::vector<double> a{0.5, 0.5};
  simplex_project(a);
  CHECK(a == std::vector<double>{0.5, 0.5});
  std::vector<double> b{1.2, -0.2};
  simplex_project(b);
  CHECK(b[0] == doctest::Approx(1.0));
  CHECK(b[1] == 0.0);
  std::vector<double> empty;
  CHECK_THROWS_AS(simplex_project(empty), Error);

  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> v(100);
    const double scale = trial % 3 == 0 ? 0.01 : trial % 3 == 1 ? 1.0 : 30.0;
    for (auto& x : v) x = scale * g(rng);
    const auto ref = reference_projection(v);
    simplex_project(v);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(v[i] - ref[i]) <= 1e-12);
  }
}

TEST_CASE("identity detector is recovered") {
  const std::size_t n = 12;
  std::vector<double> dense(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) dense[i * n + j] = (i == j ? 0.6 : 0.0) + 0.4 / n;
  const auto F = ProbeMatrix::from_dense(n, n, dense);
  const Matrix P(n, n, dense);
  ReconstructOptions opt;
  opt.gamma = 0.0;
  const auto rec = reconstruct_povm(F, P, opt);
  CHECK(rec.diagnostics.converged);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(rec.povm(i, j) - (i == j ? 1.0 : 0.0)));
  CHECK(worst <= 1e-6);
}

TEST_CASE("binomial-loss detector is recovered on the probed rows") {
  const std::size_t M = 60, N = 40, D = 25;
  std::vector<double> means(D);
  for (std::size_t d = 0; d < D; ++d) means[d] = 17.0 * d / (D - 1);
  const auto F = build_probe_matrix(means, M);
  const auto truth = binomial_povm(M, N, 0.5);
  const auto P = multiply(F, truth);

  const auto rec = reconstruct_povm(F, P);
  const auto& diag = rec.diagnostics;
  CHECK(diag.constraint_violation <= 1e-8);
  for (std::size_t i = 1; i < diag.objective.size(); ++i) CHECK(diag.objective[i] <= diag.objective[i - 1]);

  // Only rows inside the probed range of photon numbers are identifiable.
  const auto covered = static_cast<std::size_t>(means.back());
  for (std::size_t m = 0; m <= covered; ++m) {
    double tv = 0.0;
    for (std::size_t k = 0; k < N; ++k) tv += std::abs(rec.povm(m, k) - truth(m, k));
    CAPTURE(m);
    CHECK(0.5 * tv <= 0.05);
  }

  // Without smoothing the fit is at least as close to P as the true POVM.
  ReconstructOptions plain;
  plain.gamma = 0.0;
  const auto free = reconstruct_povm(F, P, plain);
  CHECK(free.diagnostics.residual <= 1e-4);
}

TEST_CASE("iterates stay feasible and runs are deterministic") {
  const std::vector<double> means{0.5, 3.0, 8.0, 15.0};
  const auto F = build_probe_matrix(means, 60);
  const auto P = multiply(F, binomial_povm(60, 20, 0.3));
  ReconstructOptions opt;
  opt.max_iterations = 3;
  const auto a = reconstruct_povm(F, P, opt);
  CHECK_FALSE(a.diagnostics.converged);
  CHECK(a.diagnostics.iterations == 3);
  CHECK(a.diagnostics.constraint_violation <= 1e-8);
  CHECK(constraint_violation(a.povm) <= 1e-8);
  CHECK(reconstruct_povm(F, P, opt).povm == a.povm);
  CHECK(povm_objective(F, P, a.povm, a.diagnostics.gamma) == doctest::Approx(a.diagnostics.objective.back()));

  CHECK_THROWS_AS(reconstruct_povm(F, Matrix(3, 20)), Error);
  CHECK_THROWS_AS(reconstruct_povm(build_probe_matrix(std::vector<double>{1.0}, 60), Matrix(1, 20)), Error);
}

TEST_CASE("ridge slope") {
  Matrix pi(100, 60);
  for (std::size_t m = 0; m < 100; ++m) pi(m, std::min<std::size_t>(m / 2, 59)) = 1.0;
  CHECK(ridge_argmax(pi)[41] == 20);
  CHECK(ridge_slope(pi, 10, 100) == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("POVM files") {
  Matrix pi(3, 4);
  for (std::size_t i = 0; i < 12; ++i) pi.data()[i] = 0.1 * i + 1e-17;
  std::stringstream ss;
  write_povm(ss, pi);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 8 + 16 + 12 * 8);
  std::stringstream in(bytes);
  CHECK(read_povm(in) == pi);

  std::stringstream cut(bytes.substr(0, 50));
  try {
    read_povm(cut);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::format);
    CHECK(std::string(e.what()).find("byte offset 50") != std::string::npos);
  }
  std::stringstream extra(bytes + "z");
  CHECK_THROWS_AS(read_povm(extra), Error);

  std::ostringstream csv;
  const std::vector<std::size_t> rows{2};
  write_povm_csv(csv, pi, rows);
  CHECK(csv.str().rfind("m,n_prime,probability\n2,0,", 0) == 0);

  ReconstructDiagnostics d;
  d.objective = {3.0, 2.0};
  d.iterations = 1;
  std::ostringstream diag, trace;
  write_diagnostics_csv(diag, d);
  write_objective_trace_csv(trace, d);
  CHECK(diag.str().find("iterations,1\n") != std::string::npos);
  CHECK(trace.str() == "iteration,objective\n0,3\n1,2\n");
}
