#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "pnr/bins.hpp"
#include "pnr/photon_distribution.hpp"
#include "pnr/timing_model.hpp"

namespace pnr {

/// Arrival time relative to the bin's window start (ps), or nullopt for no click.
using ArrivalOutcome = std::optional<double>;

struct LutGrid {
  double origin_ps = 0.0;
  double step_ps = 1.0;
  std::size_t len = 450;

  double time(std::size_t row) const noexcept {
    return origin_ps + step_ps * static_cast<double>(row);
  }
};

/// Arrival-time -> photon-number posterior table for one bin.
///
/// Row r holds p(n | t_r) for n = 0..n_cap (entry 0 is always zero for a
/// click). Each row's mean and variance are cached for the moment path.
class Lut {
 public:
  Lut(LutGrid grid, int n_cap, std::vector<double> body);

  const LutGrid& grid() const noexcept { return grid_; }
  int n_cap() const noexcept { return n_cap_; }
  std::size_t row_width() const noexcept { return static_cast<std::size_t>(n_cap_) + 1; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {body_.data() + r * row_width(), row_width()};
  }
  std::span<const double> body() const noexcept { return body_; }
  double row_mean(std::size_t r) const noexcept { return mean_[r]; }
  double row_variance(std::size_t r) const noexcept { return var_[r]; }

  // Nearest row; `clamped` is set when t lies outside the grid.
  std::size_t row_index(double t_ps, bool& clamped) const noexcept;

  // Rows where every component density underflowed; they copy the nearest
  // regular row.
  const std::vector<std::size_t>& degenerate_rows() const noexcept { return degenerate_; }
  void set_degenerate_rows(std::vector<std::size_t> rows) { degenerate_ = std::move(rows); }

  friend bool operator==(const Lut& a, const Lut& b) {
    return a.grid_.origin_ps == b.grid_.origin_ps && a.grid_.step_ps == b.grid_.step_ps &&
           a.grid_.len == b.grid_.len && a.n_cap_ == b.n_cap_ && a.body_ == b.body_;
  }

 private:
  LutGrid grid_;
  int n_cap_;
  std::vector<double> body_;
  std::vector<double> mean_;
  std::vector<double> var_;
  std::vector<std::size_t> degenerate_;
};

/// Flat prior over n = 1..n_cap unless `prior` (length n_cap, positive) is given.
Lut build_lut(const BinTimingModel& model, const LutGrid& grid = {},
              std::span<const double> prior = {});

BinTable<Lut> build_luts(const BinTable<BinTimingModel>& models, const LutGrid& grid = {});

struct LookupCounters {
  std::uint64_t out_of_range = 0;
};

PhotonNumberDistribution lookup(const Lut& lut, ArrivalOutcome event,
                                LookupCounters* counters = nullptr);

// Binary table file; layout in docs/formats.md.
void write_luts(std::ostream& os, const BinTable<Lut>& luts);
BinTable<Lut> read_luts(std::istream& is);
void write_lut_summary(std::ostream& os, const Lut& lut);

}  // namespace pnr
