#include "pnr/tomography.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "binary_io.hpp"
#include "pnr/csv.hpp"
#include "pnr/error.hpp"

namespace pnr {

namespace {

constexpr char kPovmMagic[8] = {'P', 'N', 'R', 'P', 'O', 'V', 'M', '\0'};
constexpr double kBandCutoff = 1e-18;
constexpr double kTruncationTolerance = 1e-10;

[[noreturn]] void dimension_error(const std::string& what) { fail(ErrorCategory::invalid_argument, what); }

}  // namespace

// ---------------------------------------------------------------------------

ProbeMatrix::ProbeMatrix(std::size_t columns, std::vector<Row> rows) : columns_(columns), rows_(std::move(rows)) {
  for (const auto& r : rows_) {
    if (r.first + r.values.size() > columns_) dimension_error("probe row extends past the last column");
    for (double v : r.values)
      if (!(v >= 0.0) || !std::isfinite(v)) dimension_error("probe entries must be finite and >= 0");
  }
}

ProbeMatrix ProbeMatrix::from_dense(std::size_t rows, std::size_t columns, std::span<const double> data) {
  if (data.size() != rows * columns) dimension_error("dense probe data has the wrong size");
  std::vector<Row> out(rows);
  for (std::size_t d = 0; d < rows; ++d) out[d].values.assign(data.begin() + d * columns, data.begin() + (d + 1) * columns);
  return ProbeMatrix(columns, std::move(out));
}

double ProbeMatrix::operator()(std::size_t d, std::size_t m) const {
  const auto& r = rows_.at(d);
  return m >= r.first && m < r.first + r.values.size() ? r.values[m - r.first] : 0.0;
}

ProbeMatrix build_probe_matrix(std::span<const double> means, std::size_t M) {
  if (M == 0) dimension_error("probe truncation M must be >= 1");
  std::vector<ProbeMatrix::Row> rows;
  rows.reserve(means.size());
  for (std::size_t d = 0; d < means.size(); ++d) {
    const double mu = means[d];
    if (!(mu >= 0.0) || !std::isfinite(mu)) dimension_error("probe means must be finite and >= 0");
    ProbeMatrix::Row row;
    if (mu == 0.0) {
      row.values = {1.0};
      rows.push_back(std::move(row));
      continue;
    }
    const double log_mu = std::log(mu);
    auto log_p = [&](double m) { return -mu + m * log_mu - std::lgamma(m + 1.0); };
    const double mode = std::min(std::floor(mu), static_cast<double>(M - 1));
    const double floor_log = log_p(std::floor(mu)) + std::log(kBandCutoff);
    auto lo = static_cast<std::size_t>(mode), hi = static_cast<std::size_t>(mode);
    while (lo > 0 && log_p(static_cast<double>(lo - 1)) >= floor_log) --lo;
    while (hi + 1 < M && log_p(static_cast<double>(hi + 1)) >= floor_log) ++hi;
    row.first = lo;
    row.values.resize(hi - lo + 1);
    double sum = 0.0;
    for (std::size_t m = lo; m <= hi; ++m) sum += row.values[m - lo] = std::exp(log_p(static_cast<double>(m)));
    if (1.0 - sum > kTruncationTolerance) {
      std::ostringstream os;
      os << "probe " << d << " (mean " << mu << ") loses " << 1.0 - sum << " of its mass above m = " << M - 1
         << "; increase M beyond " << std::ceil(mu + 10.0 * std::sqrt(mu));
      fail(ErrorCategory::invalid_argument, os.str());
    }
    rows.push_back(std::move(row));
  }
  return ProbeMatrix(M, std::move(rows));
}

Matrix::Matrix(std::size_t rows, std::size_t columns, std::vector<double> data)
    : rows_(rows), columns_(columns), data_(std::move(data)) {
  if (data_.size() != rows_ * columns_) dimension_error("matrix data has the wrong size");
}

// ---------------------------------------------------------------------------

OutcomeHistogram::OutcomeHistogram(std::size_t states, std::size_t outcomes)
    : outcomes_(outcomes), counts_(states * outcomes, 0), totals_(states, 0) {
  require(outcomes >= 1, "outcome matrix needs at least one column");
}

void OutcomeHistogram::add(std::size_t state, double measured_mean) {
  require(state < totals_.size(), "state index out of range");
  require(measured_mean >= 0.0 && std::isfinite(measured_mean), "measured means must be finite and >= 0");
  const double bin = std::round(measured_mean);
  if (bin >= static_cast<double>(outcomes_)) {
    std::ostringstream os;
    os << "measured mean " << measured_mean << " needs outcome bin " << bin << " but N = " << outcomes_
       << "; widen N";
    fail(ErrorCategory::data, os.str());
  }
  ++counts_[state * outcomes_ + static_cast<std::size_t>(bin)];
  ++totals_[state];
}

Matrix OutcomeHistogram::outcome_matrix() const {
  Matrix P(totals_.size(), outcomes_);
  for (std::size_t d = 0; d < totals_.size(); ++d) {
    if (totals_[d] == 0) {
      std::ostringstream os;
      os << "state " << d << " has no samples";
      fail(ErrorCategory::data, os.str());
    }
    const double inv = 1.0 / static_cast<double>(totals_[d]);
    for (std::size_t n = 0; n < outcomes_; ++n) P(d, n) = static_cast<double>(counts_[d * outcomes_ + n]) * inv;
  }
  return P;
}

Matrix build_outcome_matrix(const std::vector<std::vector<double>>& shot_means, std::size_t N) {
  OutcomeHistogram h(shot_means.size(), N);
  for (std::size_t d = 0; d < shot_means.size(); ++d)
    for (double v : shot_means[d]) h.add(d, v);
  return h.outcome_matrix();
}

// ---------------------------------------------------------------------------

namespace {

struct Span {
  std::size_t begin = 0, end = 0;  // nonzero columns lie in [begin, end)
};

// Nonzero column range of every row; projected iterates are mostly zero.
std::vector<Span> nonzero_spans(const Matrix& A) {
  std::vector<Span> out(A.rows());
  const auto rows = static_cast<std::int64_t>(A.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i) {
    const auto r = A.row(static_cast<std::size_t>(i));
    std::size_t b = 0, e = r.size();
    while (b < e && r[b] == 0.0) ++b;
    while (e > b && r[e - 1] == 0.0) --e;
    out[static_cast<std::size_t>(i)] = {b, e};
  }
  return out;
}

// out = F^T * R, one output row at a time in a fixed summation order.
void multiply_transposed(const ProbeMatrix& F, const Matrix& R, Matrix& out,
                         const std::vector<std::vector<std::size_t>>& rows_touching) {
  const auto spans = nonzero_spans(R);
  const auto M = static_cast<std::int64_t>(F.columns());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t m = 0; m < M; ++m) {
    auto dst = out.row(static_cast<std::size_t>(m));
    std::fill(dst.begin(), dst.end(), 0.0);
    for (std::size_t d : rows_touching[static_cast<std::size_t>(m)]) {
      const auto& r = F.row(d);
      const double f = r.values[static_cast<std::size_t>(m) - r.first];
      const auto src = R.row(d);
      for (std::size_t n = spans[d].begin; n < spans[d].end; ++n) dst[n] += f * src[n];
    }
  }
}

void multiply_into(const ProbeMatrix& F, const Matrix& X, Matrix& out) {
  const auto spans = nonzero_spans(X);
  const auto D = static_cast<std::int64_t>(F.rows());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t d = 0; d < D; ++d) {
    const auto& r = F.row(static_cast<std::size_t>(d));
    auto dst = out.row(static_cast<std::size_t>(d));
    std::fill(dst.begin(), dst.end(), 0.0);
    for (std::size_t j = 0; j < r.values.size(); ++j) {
      const double f = r.values[j];
      const auto src = X.row(r.first + j);
      const auto& sp = spans[r.first + j];
      for (std::size_t n = sp.begin; n < sp.end; ++n) dst[n] += f * src[n];
    }
  }
}

double smoothing_penalty(const Matrix& X) {
  std::vector<double> partial(X.rows(), 0.0);
  const auto M = static_cast<std::int64_t>(X.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t m = 0; m < M - 1; ++m) {
    const auto a = X.row(static_cast<std::size_t>(m)), b = X.row(static_cast<std::size_t>(m) + 1);
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) s += (b[n] - a[n]) * (b[n] - a[n]);
    partial[static_cast<std::size_t>(m)] = s;
  }
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

double squared_residual(const Matrix& FX, const Matrix& P) {
  double s = 0.0;
  for (std::size_t i = 0; i < FX.data().size(); ++i) {
    const double r = FX.data()[i] - P.data()[i];
    s += r * r;
  }
  return s;
}

double frobenius2(const Matrix& A) {
  double s = 0.0;
  for (double v : A.data()) s += v * v;
  return s;
}

// Largest eigenvalue of F^T F by power iteration.
double gram_norm(const ProbeMatrix& F) {
  const std::size_t M = F.columns();
  std::vector<double> x(M, 1.0 / std::sqrt(static_cast<double>(M))), y(F.rows()), z(M);
  double lambda = 0.0;
  for (int it = 0; it < 500; ++it) {
    for (std::size_t d = 0; d < F.rows(); ++d) {
      const auto& r = F.row(d);
      double s = 0.0;
      for (std::size_t j = 0; j < r.values.size(); ++j) s += r.values[j] * x[r.first + j];
      y[d] = s;
    }
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t d = 0; d < F.rows(); ++d) {
      const auto& r = F.row(d);
      for (std::size_t j = 0; j < r.values.size(); ++j) z[r.first + j] += r.values[j] * y[d];
    }
    double norm = 0.0;
    for (double v : z) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    const double next = norm;  // ||F^T F x|| with ||x|| = 1
    for (std::size_t m = 0; m < M; ++m) x[m] = z[m] / norm;
    if (it > 10 && std::abs(next - lambda) <= 1e-12 * next) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return lambda;
}

}  // namespace

Matrix multiply(const ProbeMatrix& F, const Matrix& X) {
  if (X.rows() != F.columns()) dimension_error("F has " + std::to_string(F.columns()) + " columns but X has " +
                                               std::to_string(X.rows()) + " rows");
  Matrix out(F.rows(), X.columns());
  multiply_into(F, X, out);
  return out;
}

void simplex_project(std::span<double> y) {
  require(!y.empty(), "cannot project an empty vector onto the simplex");
  // Condat's linear-time projection onto {x >= 0, sum x = 1}.
  thread_local std::vector<double> v, vt;
  v.clear();
  vt.clear();
  v.push_back(y[0]);
  double rho = y[0] - 1.0;
  for (std::size_t i = 1; i < y.size(); ++i) {
    const double yi = y[i];
    if (yi > rho) {
      rho += (yi - rho) / static_cast<double>(v.size() + 1);
      if (rho > yi - 1.0) {
        v.push_back(yi);
      } else {
        vt.insert(vt.end(), v.begin(), v.end());
        v.assign(1, yi);
        rho = yi - 1.0;
      }
    }
  }
  for (double w : vt)
    if (w > rho) {
      v.push_back(w);
      rho += (w - rho) / static_cast<double>(v.size());
    }
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t j = 0; j < v.size();) {
      if (v[j] <= rho) {
        const double w = v[j];
        v[j] = v.back();
        v.pop_back();
        rho += (rho - w) / static_cast<double>(v.size());
        changed = true;
      } else {
        ++j;
      }
    }
  }
  for (double& x : y) x = std::max(x - rho, 0.0);
}

namespace {

// With Y = X + beta (X - X_prev) and G = F^T(F Y - P) on entry, overwrites G
// with the projection of Y - step * (2 G + 2 gamma L Y) row by row.
void gradient_step(const Matrix& X, const Matrix& X_prev, double beta, double gamma, double step, Matrix& G) {
  const std::size_t M = X.rows(), N = X.columns();
  const auto Mi = static_cast<std::int64_t>(M);
  auto y = [&](std::size_t m, std::size_t n) { return X(m, n) + beta * (X(m, n) - X_prev(m, n)); };
#pragma omp parallel for schedule(static)
  for (std::int64_t mi = 0; mi < Mi; ++mi) {
    const auto m = static_cast<std::size_t>(mi);
    auto g = G.row(m);
    for (std::size_t n = 0; n < N; ++n) {
      const double ym = y(m, n);
      double lap = 0.0;
      if (m > 0) lap += ym - y(m - 1, n);
      if (m + 1 < M) lap += ym - y(m + 1, n);
      g[n] = ym - step * 2.0 * (g[n] + gamma * lap);
    }
    simplex_project(g);
  }
}

}  // namespace

double povm_objective(const ProbeMatrix& F, const Matrix& P, const Matrix& povm, double gamma) {
  const Matrix FX = multiply(F, povm);
  if (FX.rows() != P.rows() || FX.columns() != P.columns()) dimension_error("F * Pi and P differ in shape");
  return squared_residual(FX, P) + gamma * smoothing_penalty(povm);
}

double constraint_violation(const Matrix& povm) {
  double worst = 0.0;
  for (std::size_t m = 0; m < povm.rows(); ++m) {
    double sum = 0.0;
    for (double v : povm.row(m)) {
      sum += v;
      worst = std::max(worst, -v);
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  return worst;
}

Reconstruction reconstruct_povm(const ProbeMatrix& F, const Matrix& P, const ReconstructOptions& opt) {
  const std::size_t D = F.rows(), M = F.columns(), N = P.columns();
  if (P.rows() != D) dimension_error("F and P must have the same number of rows (probe states)");
  if (D < 2) dimension_error("tomography needs at least two probe states");
  if (N == 0 || M == 0) dimension_error("empty POVM dimensions");
  require(opt.window >= 1 && opt.tolerance >= 0.0, "invalid stopping options");

  ReconstructDiagnostics diag;
  const double p_norm2 = frobenius2(P);
  diag.gamma = opt.gamma.value_or(1e-2 * p_norm2 / static_cast<double>(M));
  require(diag.gamma >= 0.0, "gamma must be >= 0");
  diag.lipschitz = 2.0 * (gram_norm(F) * (1.0 + 1e-9) + 4.0 * diag.gamma);
  const double step = diag.lipschitz > 0.0 ? 1.0 / diag.lipschitz : 1.0;

  std::vector<std::vector<std::size_t>> touching(M);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t j = 0; j < F.row(d).values.size(); ++j) touching[F.row(d).first + j].push_back(d);

  // Three M x N buffers: iterate, previous iterate, gradient / trial point.
  Matrix X(M, N, 1.0 / static_cast<double>(N));
  Matrix X_prev = X;
  Matrix G(M, N);
  Matrix FX(D, N), FX_prev(D, N), R(D, N);
  multiply_into(F, X, FX);
  FX_prev = FX;

  auto objective = [&](const Matrix& FXv, const Matrix& Xv) {
    return squared_residual(FXv, P) + diag.gamma * smoothing_penalty(Xv);
  };
  double f = objective(FX, X);
  diag.objective.push_back(f);
  const double floor = 1e-12 * std::max(p_norm2, 1e-300);

  double t = 1.0;
  for (std::uint64_t k = 0; k < opt.max_iterations; ++k) {
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double beta = (t - 1.0) / t_next;
    // Residual at the extrapolated point; F is linear, so no extra product.
    for (std::size_t i = 0; i < R.data().size(); ++i)
      R.data()[i] = FX.data()[i] + beta * (FX.data()[i] - FX_prev.data()[i]) - P.data()[i];
    multiply_transposed(F, R, G, touching);
    gradient_step(X, X_prev, beta, diag.gamma, step, G);
    multiply_into(F, G, R);
    double f_trial = objective(R, G);

    if (f_trial > f && beta > 0.0) {
      // Momentum overshot: restart with a plain projected step from X.
      ++diag.restarts;
      for (std::size_t i = 0; i < R.data().size(); ++i) R.data()[i] = FX.data()[i] - P.data()[i];
      multiply_transposed(F, R, G, touching);
      gradient_step(X, X, 0.0, diag.gamma, step, G);
      multiply_into(F, G, R);
      f_trial = objective(R, G);
      t = 1.0;
    } else {
      t = t_next;
    }
    diag.iterations = k + 1;
    if (f_trial > f) {
      // Rounding-level increase: keep X and drop the momentum.
      t = 1.0;
    } else {
      std::swap(X_prev, X);
      std::swap(X, G);
      std::swap(FX_prev, FX);
      std::swap(FX, R);
      f = f_trial;
    }
    diag.objective.push_back(f);
    const auto& tr = diag.objective;
    if (tr.size() > opt.window) {
      const double old = tr[tr.size() - 1 - opt.window];
      if (old - f <= opt.tolerance * std::max(old, floor)) {
        diag.converged = true;
        break;
      }
    }
  }

  diag.residual = std::sqrt(squared_residual(FX, P));
  diag.constraint_violation = constraint_violation(X);
  return {std::move(X), std::move(diag)};
}

std::vector<std::size_t> ridge_argmax(const Matrix& povm) {
  std::vector<std::size_t> out(povm.rows());
  for (std::size_t m = 0; m < povm.rows(); ++m) {
    const auto r = povm.row(m);
    out[m] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

double ridge_slope(const Matrix& povm, std::size_t first, std::size_t last) {
  require(first < last && last <= povm.rows() && last - first >= 2, "ridge fit needs at least two rows");
  const auto arg = ridge_argmax(povm);
  const double n = static_cast<double>(last - first);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t m = first; m < last; ++m) {
    const double x = static_cast<double>(m), y = static_cast<double>(arg[m]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

void write_povm(std::ostream& os, const Matrix& povm) {
  detail::BinaryWriter w(os);
  w.bytes(kPovmMagic, sizeof kPovmMagic);
  w.u64(povm.rows());
  w.u64(povm.columns());
  std::vector<unsigned char> buf(povm.columns() * 8);
  for (std::size_t m = 0; m < povm.rows(); ++m) {
    const auto r = povm.row(m);
    for (std::size_t n = 0; n < r.size(); ++n) detail::store_u64(buf.data() + 8 * n, std::bit_cast<std::uint64_t>(r[n]));
    w.bytes(buf.data(), buf.size());
  }
}

Matrix read_povm(std::istream& is) {
  detail::BinaryReader r(is, "POVM file");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kPovmMagic)) fail(ErrorCategory::format, "POVM file has bad magic at byte offset 0");
  const std::uint64_t M = r.u64(), N = r.u64();
  if (M == 0 || N == 0 || M > (1ull << 32) || N > (1ull << 32) || M * N > (1ull << 34))
    fail(ErrorCategory::format, "POVM file has implausible dimensions at byte offset 8");
  std::vector<double> data(M * N);
  std::vector<unsigned char> buf(N * 8);
  for (std::uint64_t m = 0; m < M; ++m) {
    r.bytes(buf.data(), buf.size());
    for (std::uint64_t n = 0; n < N; ++n)
      data[m * N + n] = std::bit_cast<double>(detail::load_u64(buf.data() + 8 * n));
  }
  char extra;
  if (is.read(&extra, 1); is.gcount() != 0) {
    std::ostringstream os;
    os << "POVM file has trailing bytes at byte offset " << r.offset();
    fail(ErrorCategory::format, os.str());
  }
  return Matrix(M, N, std::move(data));
}

void write_povm_csv(std::ostream& os, const Matrix& povm, std::span<const std::size_t> rows) {
  os << "m,n_prime,probability\n";
  for (std::size_t m : rows) {
    require(m < povm.rows(), "POVM row out of range");
    for (std::size_t n = 0; n < povm.columns(); ++n) os << m << ',' << n << ',' << csv::num(povm(m, n)) << '\n';
  }
}

void write_diagnostics_csv(std::ostream& os, const ReconstructDiagnostics& d) {
  os << "key,value\n"
     << "iterations," << d.iterations << '\n'
     << "converged," << (d.converged ? 1 : 0) << '\n'
     << "restarts," << d.restarts << '\n'
     << "gamma," << csv::num(d.gamma) << '\n'
     << "lipschitz," << csv::num(d.lipschitz) << '\n'
     << "final_objective," << csv::num(d.objective.empty() ? 0.0 : d.objective.back()) << '\n'
     << "residual," << csv::num(d.residual) << '\n'
     << "constraint_violation," << csv::num(d.constraint_violation) << '\n';
}

void write_objective_trace_csv(std::ostream& os, const ReconstructDiagnostics& d) {
  os << "iteration,objective\n";
  for (std::size_t i = 0; i < d.objective.size(); ++i) os << i << ',' << csv::num(d.objective[i]) << '\n';
}

}  // namespace pnr
