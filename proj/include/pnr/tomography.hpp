#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace pnr {

/// D x M probe matrix stored as one contiguous band per row.
class ProbeMatrix {
 public:
  struct Row {
    std::size_t first = 0;  // column of values[0]
    std::vector<double> values;
  };

  ProbeMatrix(std::size_t columns, std::vector<Row> rows);
  // From row-major dense data (every row keeps its full width).
  static ProbeMatrix from_dense(std::size_t rows, std::size_t columns, std::span<const double> data);

  std::size_t rows() const noexcept { return rows_.size(); }
  std::size_t columns() const noexcept { return columns_; }
  const Row& row(std::size_t d) const { return rows_.at(d); }
  double operator()(std::size_t d, std::size_t m) const;

 private:
  std::size_t columns_;
  std::vector<Row> rows_;
};

/// Rows are Poisson pmfs e^-mu mu^m / m! over m = 0..M-1, computed in log
/// space and trimmed below 1e-18 of the row peak.
ProbeMatrix build_probe_matrix(std::span<const double> means, std::size_t M);

/// Generic row-major dense matrix used for P and Pi.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t columns, double fill = 0.0)
      : rows_(rows), columns_(columns), data_(rows * columns, fill) {}
  Matrix(std::size_t rows, std::size_t columns, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t columns() const noexcept { return columns_; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * columns_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * columns_ + c]; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * columns_, columns_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * columns_, columns_}; }
  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0, columns_ = 0;
  std::vector<double> data_;
};

/// Accumulates rounded shot means into one normalized histogram row per state.
class OutcomeHistogram {
 public:
  OutcomeHistogram(std::size_t states, std::size_t outcomes);
  void add(std::size_t state, double measured_mean);
  std::uint64_t count(std::size_t state) const { return totals_.at(state); }
  // Rows normalized to 1; every state needs at least one sample.
  Matrix outcome_matrix() const;

 private:
  std::size_t outcomes_;
  std::vector<std::uint64_t> counts_;
  std::vector<std::uint64_t> totals_;
};

Matrix build_outcome_matrix(const std::vector<std::vector<double>>& shot_means, std::size_t N);

/// F * X for an M x N matrix X.
Matrix multiply(const ProbeMatrix& F, const Matrix& X);

/// Euclidean projection of v onto the probability simplex, in place.
void simplex_project(std::span<double> v);

struct ReconstructOptions {
  std::optional<double> gamma;  // default 1e-2 * ||P||_F^2 / M
  std::uint64_t max_iterations = 50'000;
  double tolerance = 1e-9;  // relative objective change over `window` iterations
  std::uint64_t window = 10;
};

struct ReconstructDiagnostics {
  std::vector<double> objective;  // after each iteration; objective[0] is the start
  double gamma = 0.0;
  double lipschitz = 0.0;
  double residual = 0.0;  // ||F Pi - P||_F
  double constraint_violation = 0.0;
  std::uint64_t iterations = 0;
  std::uint64_t restarts = 0;
  bool converged = false;
};

struct Reconstruction {
  Matrix povm;  // M x N, rows on the probability simplex
  ReconstructDiagnostics diagnostics;
};

/// Minimizes ||F Pi - P||_F^2 + gamma sum_m ||Pi[m+1] - Pi[m]||^2 over
/// row-stochastic Pi by accelerated projected gradient with restarts.
Reconstruction reconstruct_povm(const ProbeMatrix& F, const Matrix& P, const ReconstructOptions& options = {});

double povm_objective(const ProbeMatrix& F, const Matrix& P, const Matrix& povm, double gamma);

/// Largest deviation from nonnegativity or unit row sums.
double constraint_violation(const Matrix& povm);

/// Column of the row maximum for each row.
std::vector<std::size_t> ridge_argmax(const Matrix& povm);

/// Least-squares slope of the row argmax against the row index over [first, last).
double ridge_slope(const Matrix& povm, std::size_t first, std::size_t last);

// Pi binary: "PNRPOVM\0", u64 M, u64 N, then M*N little-endian f64 row-major.
void write_povm(std::ostream& os, const Matrix& povm);
Matrix read_povm(std::istream& is);
// Long-form CSV of the chosen rows: m,n_prime,probability.
void write_povm_csv(std::ostream& os, const Matrix& povm, std::span<const std::size_t> rows);
void write_diagnostics_csv(std::ostream& os, const ReconstructDiagnostics& d);
void write_objective_trace_csv(std::ostream& os, const ReconstructDiagnostics& d);

}  // namespace pnr
