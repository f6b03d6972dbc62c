#include "pnr/lut.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "binary_io.hpp"

namespace pnr {

namespace {

constexpr char kLutMagic[8] = {'P', 'N', 'R', 'L', 'U', 'T', '1', '\0'};
constexpr double kUnderflowLog = -700.0;

}  // namespace

Lut::Lut(LutGrid grid, int n_cap, std::vector<double> body)
    : grid_(grid), n_cap_(n_cap), body_(std::move(body)) {
  require(grid_.step_ps > 0.0 && std::isfinite(grid_.step_ps), "LUT grid step must be > 0");
  require(std::isfinite(grid_.origin_ps), "LUT grid origin must be finite");
  require(grid_.len >= 1, "LUT grid needs at least one row");
  require(n_cap_ >= 1, "LUT n_cap must be >= 1");
  require(body_.size() == grid_.len * row_width(), "LUT body size does not match grid and n_cap");
  mean_.resize(grid_.len);
  var_.resize(grid_.len);
  for (std::size_t r = 0; r < grid_.len; ++r) {
    const auto p = row(r);
    if (p[0] != 0.0) fail(ErrorCategory::data, "LUT click rows must give zero probability to n = 0");
    double s = 0.0;
    for (double v : p) {
      if (!(v >= 0.0) || !std::isfinite(v)) fail(ErrorCategory::data, "LUT row has a negative or non-finite entry");
      s += v;
    }
    if (std::abs(s - 1.0) > PhotonNumberDistribution::kNormTolerance) {
      std::ostringstream os;
      os << "LUT row " << r << " sums to " << s;
      fail(ErrorCategory::data, os.str());
    }
    const auto m = moments_of(p);
    mean_[r] = m.mean;
    var_[r] = m.variance;
  }
}

std::size_t Lut::row_index(double t_ps, bool& clamped) const noexcept {
  const double x = std::round((t_ps - grid_.origin_ps) / grid_.step_ps);
  clamped = !(x >= 0.0 && x <= static_cast<double>(grid_.len - 1));
  if (!(x > 0.0)) return 0;  // also catches NaN
  if (x >= static_cast<double>(grid_.len - 1)) return grid_.len - 1;
  return static_cast<std::size_t>(x);
}

Lut build_lut(const BinTimingModel& model, const LutGrid& grid, std::span<const double> prior) {
  require(grid.step_ps > 0.0 && grid.len >= 1, "LUT grid must have positive step and length");
  const int n_cap = model.n_cap();
  require(prior.empty() || prior.size() == static_cast<std::size_t>(n_cap),
          "prior must have one entry per photon number 1..n_cap");
  for (double w : prior) require(w > 0.0 && std::isfinite(w), "prior entries must be > 0");

  const double lo = grid.time(0);
  const double hi = grid.time(grid.len - 1);
  std::vector<int> uncovered;
  for (const auto& c : model.components())
    if (emg_cdf(hi, c.params) - emg_cdf(lo, c.params) < 0.999) uncovered.push_back(c.n);
  if (!uncovered.empty()) {
    std::ostringstream os;
    os << "LUT grid [" << lo << ", " << hi << "] ps covers < 99.9% of components n =";
    for (int n : uncovered) os << ' ' << n;
    fail(ErrorCategory::invalid_argument, os.str());
  }

  const std::size_t width = static_cast<std::size_t>(n_cap) + 1;
  std::vector<double> body(grid.len * width, 0.0);
  std::vector<char> degenerate(grid.len, 0);
  std::vector<double> logd(static_cast<std::size_t>(n_cap));
  for (std::size_t r = 0; r < grid.len; ++r) {
    const double t = grid.time(r);
    double top = -std::numeric_limits<double>::infinity();
    for (int n = 1; n <= n_cap; ++n) {
      double l = emg_log_pdf(t, model.component(n).params);
      if (!prior.empty()) l += std::log(prior[n - 1]);
      logd[n - 1] = l;
      top = std::max(top, l);
    }
    if (!(top >= kUnderflowLog)) {
      degenerate[r] = 1;
      continue;
    }
    double s = 0.0;
    double* out = body.data() + r * width;
    for (int n = 1; n <= n_cap; ++n) s += out[n] = std::exp(logd[n - 1] - top);
    for (int n = 1; n <= n_cap; ++n) out[n] /= s;
  }

  std::vector<std::size_t> flagged;
  std::vector<std::size_t> regular;
  for (std::size_t r = 0; r < grid.len; ++r) (degenerate[r] ? flagged : regular).push_back(r);
  if (regular.empty()) fail(ErrorCategory::data, "every LUT row underflowed");
  for (std::size_t r : flagged) {
    const auto it = std::lower_bound(regular.begin(), regular.end(), r);
    std::size_t src;
    if (it == regular.end()) src = regular.back();
    else if (it == regular.begin()) src = *it;
    else src = (r - *(it - 1) <= *it - r) ? *(it - 1) : *it;
    std::copy_n(body.begin() + static_cast<std::ptrdiff_t>(src * width), width,
                body.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  Lut lut(grid, n_cap, std::move(body));
  lut.set_degenerate_rows(std::move(flagged));
  return lut;
}

BinTable<Lut> build_luts(const BinTable<BinTimingModel>& models, const LutGrid& grid) {
  require(!models.empty(), "no timing models to build LUTs from");
  std::vector<Lut> luts;
  luts.reserve(models.distinct());
  for (const auto& m : models.values()) luts.push_back(build_lut(m, grid));
  return BinTable<Lut>(std::move(luts));
}

PhotonNumberDistribution lookup(const Lut& lut, ArrivalOutcome event, LookupCounters* counters) {
  if (!event) return PhotonNumberDistribution::vacuum();
  bool clamped = false;
  const std::size_t r = lut.row_index(*event, clamped);
  if (clamped && counters) ++counters->out_of_range;
  const auto row = lut.row(r);
  return PhotonNumberDistribution::from_trusted(std::vector<double>(row.begin(), row.end()));
}

void write_luts(std::ostream& os, const BinTable<Lut>& luts) {
  require(!luts.empty(), "no LUTs to write");
  detail::BinaryWriter w(os);
  w.bytes(kLutMagic, sizeof kLutMagic);
  w.u64(luts.distinct());
  for (const auto& lut : luts.values()) {
    w.f64(lut.grid().origin_ps);
    w.f64(lut.grid().step_ps);
    w.u64(lut.grid().len);
    w.u64(static_cast<std::uint64_t>(lut.n_cap()));
    for (double v : lut.body()) w.f64(v);
  }
}

BinTable<Lut> read_luts(std::istream& is) {
  detail::BinaryReader r(is, "LUT file");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kLutMagic)) fail(ErrorCategory::format, "LUT file has bad magic at byte offset 0");
  const std::uint64_t count = r.u64();
  if (count != 1 && count != static_cast<std::uint64_t>(kBins)) {
    std::ostringstream os;
    os << "LUT file holds " << count << " tables; expected 1 or 1024 (byte offset 8)";
    fail(ErrorCategory::format, os.str());
  }
  std::vector<Lut> luts;
  luts.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t at = r.offset();
    LutGrid g;
    g.origin_ps = r.f64();
    g.step_ps = r.f64();
    g.len = r.u64();
    const std::uint64_t n_cap = r.u64();
    if (g.len == 0 || g.len > (1u << 24) || n_cap == 0 || n_cap > 4096) {
      std::ostringstream os;
      os << "LUT table " << i << " header at byte offset " << at << " has implausible len/n_cap";
      fail(ErrorCategory::format, os.str());
    }
    std::vector<double> body(g.len * (n_cap + 1));
    for (auto& v : body) v = r.f64();
    try {
      luts.emplace_back(g, static_cast<int>(n_cap), std::move(body));
    } catch (const Error& e) {
      std::ostringstream os;
      os << "LUT table " << i << " at byte offset " << at << ": " << e.what();
      fail(ErrorCategory::format, os.str());
    }
  }
  return BinTable<Lut>(std::move(luts));
}

void write_lut_summary(std::ostream& os, const Lut& lut) {
  const auto& g = lut.grid();
  os << "grid_origin_ps " << g.origin_ps << "\ngrid_step_ps " << g.step_ps << "\ngrid_len " << g.len
     << "\nn_cap " << lut.n_cap() << "\ndegenerate_rows " << lut.degenerate_rows().size() << '\n';
  os << "time_ps,mean,std,most_likely_n\n";
  const std::size_t stride = std::max<std::size_t>(1, g.len / 64);
  for (std::size_t r = 0; r < g.len; r += stride) {
    const auto row = lut.row(r);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    os << g.time(r) << ',' << std::setprecision(6) << lut.row_mean(r) << ','
       << std::sqrt(lut.row_variance(r)) << ',' << best << '\n';
  }
}

}  // namespace pnr
