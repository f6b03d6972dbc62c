#include "pnr/shot_engine.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>

#include <fftw3.h>

#include "pnr/csv.hpp"

namespace pnr {

int ShotRecord::clicks() const noexcept {
  return static_cast<int>(std::count_if(outcomes.begin(), outcomes.end(),
                                        [](const ArrivalOutcome& o) { return o.has_value(); }));
}

// ---------------------------------------------------------------------------
// Tag assignment

ShotAssembler::ShotAssembler(const Geometry& geometry, Sink sink)
    : geometry_(geometry), sink_(std::move(sink)) {
  geometry_.validate();
  max_gap_ps_ = geometry_.rep_period_ps() + geometry_.rep_period_ps() / 2;
}

void ShotAssembler::emit() {
  if (current_) {
    sink_(std::move(*current_));
    current_.reset();
  }
}

void ShotAssembler::push(const TimeTag& tag) {
  if (tags_seen_ > 0 && tag.timestamp_ps < last_ts_) {
    std::ostringstream os;
    os << "unsorted tags: tag " << tags_seen_ << " at " << tag.timestamp_ps
       << " ps precedes the previous tag at " << last_ts_ << " ps";
    fail(ErrorCategory::data, os.str());
  }
  if (tag.channel > kSpatialBins) {
    std::ostringstream os;
    os << "tag " << tags_seen_ << " has channel " << int(tag.channel) << "; valid channels are 0..8";
    fail(ErrorCategory::data, os.str());
  }
  ++tags_seen_;
  last_ts_ = tag.timestamp_ps;

  if (current_ && tag.timestamp_ps - current_->trigger_ps > max_gap_ps_) {
    std::ostringstream os;
    os << "missing trigger: " << tag.timestamp_ps - current_->trigger_ps << " ps gap after the trigger at "
       << current_->trigger_ps << " ps (shot " << current_->shot_index << ")";
    fail(ErrorCategory::data, os.str());
  }
  if (tag.channel == kTriggerChannel) {
    emit();
    current_ = std::make_unique<ShotRecord>();
    current_->shot_index = next_index_++;
    current_->trigger_ps = tag.timestamp_ps;
    return;
  }
  if (!current_) {
    ++orphans_;
    return;
  }
  const std::uint64_t dt = tag.timestamp_ps - current_->trigger_ps;
  const std::uint64_t k = dt / geometry_.temporal_spacing_ps;
  const std::uint64_t offset = dt - k * geometry_.temporal_spacing_ps;
  if (k < static_cast<std::uint64_t>(kTemporalBins) && offset < geometry_.coincidence_window_ps) {
    auto& slot = current_->outcomes[BinId{tag.channel - 1, static_cast<int>(k)}.flat()];
    if (slot) ++current_->extra_tags;
    else slot = static_cast<double>(offset);
  } else {
    ++current_->out_of_window_tags;
  }
}

void ShotAssembler::finish() { emit(); }

AssignResult assign_bins(std::span<const TimeTag> tags, const Geometry& geometry) {
  std::array<std::uint64_t, kSpatialBins + 1> last{};
  std::array<bool, kSpatialBins + 1> seen{};
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto& t = tags[i];
    if (t.channel > kSpatialBins) {
      std::ostringstream os;
      os << "tag " << i << " has channel " << int(t.channel) << "; valid channels are 0..8";
      fail(ErrorCategory::data, os.str());
    }
    if (seen[t.channel] && t.timestamp_ps < last[t.channel]) {
      std::ostringstream os;
      os << "unsorted tags on channel " << int(t.channel) << ": tag " << i << " at " << t.timestamp_ps
         << " ps precedes " << last[t.channel] << " ps";
      fail(ErrorCategory::data, os.str());
    }
    seen[t.channel] = true;
    last[t.channel] = t.timestamp_ps;
  }
  std::vector<TimeTag> merged(tags.begin(), tags.end());
  std::stable_sort(merged.begin(), merged.end(), [](const TimeTag& a, const TimeTag& b) {
    return a.timestamp_ps != b.timestamp_ps ? a.timestamp_ps < b.timestamp_ps : a.channel < b.channel;
  });

  AssignResult result;
  ShotAssembler assembler(geometry, [&](ShotRecord&& s) {
    result.extra_tags += s.extra_tags;
    result.out_of_window_tags += s.out_of_window_tags;
    result.shots.push_back(std::move(s));
  });
  for (const auto& t : merged) assembler.push(t);
  assembler.finish();
  result.orphan_tags = assembler.orphan_tags();
  return result;
}

std::vector<PhotonNumberDistribution> per_bin_pnds(const ShotRecord& shot, const BinTable<Lut>& luts,
                                                   LookupCounters* counters) {
  if (luts.empty()) fail(ErrorCategory::invalid_argument, "no LUT available for the detection bins");
  std::vector<PhotonNumberDistribution> out;
  out.reserve(kBins);
  for (int b = 0; b < kBins; ++b) out.push_back(lookup(luts[b], shot.outcomes[b], counters));
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

constexpr double kInputFloor = 1e-17;
constexpr double kOutputFloor = 1e-15;
constexpr double kMaxCorrection = 1e-6;

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct Piece {
  const double* data;
  std::size_t len;
};

}  // namespace

struct Convolver::Plan {
  std::size_t length;
  double* real;
  fftw_complex* spectrum;
  fftw_complex* accum;
  fftw_plan forward;
  fftw_plan inverse;

  explicit Plan(std::size_t n) : length(n) {
    std::lock_guard lock(planner_mutex());
    real = fftw_alloc_real(n);
    spectrum = fftw_alloc_complex(n / 2 + 1);
    accum = fftw_alloc_complex(n / 2 + 1);
    // FFTW_ESTIMATE keeps the chosen algorithm, and so the rounding, fixed run to run.
    forward = fftw_plan_dft_r2c_1d(static_cast<int>(n), real, spectrum, FFTW_ESTIMATE);
    inverse = fftw_plan_dft_c2r_1d(static_cast<int>(n), accum, real, FFTW_ESTIMATE);
  }
  ~Plan() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(forward);
    fftw_destroy_plan(inverse);
    fftw_free(real);
    fftw_free(spectrum);
    fftw_free(accum);
  }
};

Convolver::Convolver(std::size_t max_support) : max_support_(max_support) {}
Convolver::~Convolver() = default;

Convolver::Plan& Convolver::plan_for(std::size_t length) {
  for (auto& p : plans_)
    if (p->length == length) return *p;
  plans_.push_back(std::make_unique<Plan>(length));
  return *plans_.back();
}

PhotonNumberDistribution Convolver::operator()(std::span<const PhotonNumberDistribution> inputs) {
  std::vector<std::span<const double>> spans;
  spans.reserve(inputs.size());
  for (const auto& p : inputs) spans.push_back(p.probs());
  return (*this)(spans);
}

PhotonNumberDistribution Convolver::operator()(std::span<const std::span<const double>> inputs) {
  std::size_t shift = 0;    // sum of leading offsets
  std::size_t support = 0;  // sum of trimmed (len - 1)
  std::vector<Piece> pieces;
  for (const auto& in : inputs) {
    std::size_t lo = 0, hi = in.size();
    while (lo < hi && in[lo] < kInputFloor) ++lo;
    while (hi > lo && in[hi - 1] < kInputFloor) --hi;
    if (lo == hi) fail(ErrorCategory::invalid_argument, "convolution input has no mass");
    shift += lo;
    support += hi - lo - 1;
    if (hi - lo > 1) pieces.push_back({in.data() + lo, hi - lo});
  }
  const std::size_t total = shift + support;
  if (total > max_support_) {
    std::ostringstream os;
    os << "convolution support " << total << " exceeds the configured maximum " << max_support_;
    fail(ErrorCategory::data, os.str());
  }

  std::vector<double> out(total + 1, 0.0);
  if (pieces.empty()) {
    out[shift] = 1.0;
    return PhotonNumberDistribution::from_trusted(std::move(out));
  }
  if (pieces.size() == 1) {
    std::copy_n(pieces[0].data, pieces[0].len, out.begin() + static_cast<std::ptrdiff_t>(shift));
  } else {
    const std::size_t n = std::bit_ceil(support + 1);
    Plan& plan = plan_for(n);
    const std::size_t bins = n / 2 + 1;
    for (std::size_t k = 0; k < bins; ++k) {
      plan.accum[k][0] = 1.0;
      plan.accum[k][1] = 0.0;
    }
    for (const auto& piece : pieces) {
      std::fill_n(plan.real, n, 0.0);
      std::copy_n(piece.data, piece.len, plan.real);
      fftw_execute(plan.forward);
      for (std::size_t k = 0; k < bins; ++k) {
        const double ar = plan.accum[k][0], ai = plan.accum[k][1];
        const double br = plan.spectrum[k][0], bi = plan.spectrum[k][1];
        plan.accum[k][0] = ar * br - ai * bi;
        plan.accum[k][1] = ar * bi + ai * br;
      }
    }
    fftw_execute(plan.inverse);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i <= support; ++i) {
      const double v = plan.real[i] * scale;
      out[shift + i] = v < kOutputFloor ? 0.0 : v;  // clamps ringing below zero as well
    }
  }

  const double sum = std::accumulate(out.begin(), out.end(), 0.0);
  const double correction = std::abs(sum - 1.0);
  if (correction > kMaxCorrection) {
    std::ostringstream os;
    os << "convolution lost normalization (sum " << sum << ")";
    fail(ErrorCategory::data, os.str());
  }
  max_correction_ = std::max(max_correction_, correction);
  for (auto& v : out) v /= sum;
  while (out.size() > 1 && out.back() == 0.0) out.pop_back();
  return PhotonNumberDistribution::from_trusted(std::move(out));
}

PhotonNumberDistribution convolve_all(std::span<const PhotonNumberDistribution> pnds, std::size_t max_support) {
  Convolver conv(max_support);
  return conv(pnds);
}

ShotMoments shot_moments(std::span<const PhotonNumberDistribution> pnds) {
  double mean = 0.0, var = 0.0;
  for (const auto& p : pnds) {
    const auto m = moments_of(p.probs());
    mean += m.mean;
    var += m.variance;
  }
  return {mean, std::sqrt(var)};
}

ShotResult analyze_shot(const ShotRecord& shot, const BinTable<Lut>& luts) {
  if (luts.empty()) fail(ErrorCategory::invalid_argument, "no LUT available for the detection bins");
  ShotResult r;
  r.shot_index = shot.shot_index;
  r.out_of_window_tags = shot.out_of_window_tags;
  r.extra_tags = shot.extra_tags;
  double mean = 0.0, var = 0.0;
  for (int b = 0; b < kBins; ++b) {
    const auto& o = shot.outcomes[b];
    if (!o) continue;
    const Lut& lut = luts[b];
    bool clamped = false;
    const std::size_t row = lut.row_index(*o, clamped);
    r.out_of_range_lookups += clamped;
    ++r.clicks;
    mean += lut.row_mean(row);
    var += lut.row_variance(row);
  }
  r.measured_mean = mean;
  r.measured_std = std::sqrt(var);
  return r;
}

namespace {
constexpr std::string_view kShotHeader =
    "shot_index,measured_mean_photons,measured_std_photons,clicks,out_of_window_tags";
}

void write_shot_csv_header(std::ostream& os) { os << kShotHeader << '\n'; }

void write_shot_csv_row(std::ostream& os, const ShotResult& r) {
  os << r.shot_index << ',' << csv::num(r.measured_mean) << ',' << csv::num(r.measured_std) << ','
     << r.clicks << ',' << r.out_of_window_tags << '\n';
}

std::vector<ShotResult> read_shot_csv(std::istream& is) {
  std::vector<ShotResult> out;
  csv::read(is, kShotHeader, [&](const std::vector<std::string_view>& f, std::size_t line) {
    ShotResult r;
    r.shot_index = csv::parse<std::uint64_t>(f[0], line);
    r.measured_mean = csv::parse<double>(f[1], line);
    r.measured_std = csv::parse<double>(f[2], line);
    r.clicks = csv::parse<std::uint32_t>(f[3], line);
    r.out_of_window_tags = csv::parse<std::uint32_t>(f[4], line);
    out.push_back(r);
  });
  return out;
}

}  // namespace pnr
