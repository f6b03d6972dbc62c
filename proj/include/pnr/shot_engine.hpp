#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "pnr/bins.hpp"
#include "pnr/detector_config.hpp"
#include "pnr/lut.hpp"
#include "pnr/photon_distribution.hpp"

namespace pnr {

inline constexpr std::uint8_t kTriggerChannel = 0;

struct TimeTag {
  std::uint64_t timestamp_ps = 0;
  std::uint8_t channel = 0;  // 0 = trigger, 1..8 = spatial channel + 1
  friend bool operator==(const TimeTag&, const TimeTag&) = default;
};

struct ShotRecord {
  std::uint64_t shot_index = 0;
  std::uint64_t trigger_ps = 0;
  std::array<ArrivalOutcome, kBins> outcomes{};
  std::uint32_t extra_tags = 0;         // second and later tags inside one window
  std::uint32_t out_of_window_tags = 0;  // tags between windows

  int clicks() const noexcept;
  friend bool operator==(const ShotRecord&, const ShotRecord&) = default;
};

/// Streams globally time-ordered tags into shots. A trigger opens a shot;
/// each click goes to the most recent trigger.
class ShotAssembler {
 public:
  using Sink = std::function<void(ShotRecord&&)>;
  ShotAssembler(const Geometry& geometry, Sink sink);

  void push(const TimeTag& tag);
  void finish();

  // Clicks seen before the first trigger.
  std::uint64_t orphan_tags() const noexcept { return orphans_; }
  std::uint64_t shots() const noexcept { return next_index_; }

 private:
  void emit();

  Geometry geometry_;
  Sink sink_;
  std::uint64_t max_gap_ps_;
  std::unique_ptr<ShotRecord> current_;
  std::uint64_t next_index_ = 0;
  std::uint64_t last_ts_ = 0;
  std::uint64_t tags_seen_ = 0;
  std::uint64_t orphans_ = 0;
};

struct AssignResult {
  std::vector<ShotRecord> shots;
  std::uint64_t orphan_tags = 0;
  std::uint64_t extra_tags = 0;
  std::uint64_t out_of_window_tags = 0;
};

/// Tags must be time-sorted within each channel; channels may interleave
/// arbitrarily.
AssignResult assign_bins(std::span<const TimeTag> tags, const Geometry& geometry);

std::vector<PhotonNumberDistribution> per_bin_pnds(const ShotRecord& shot, const BinTable<Lut>& luts,
                                                   LookupCounters* counters = nullptr);

inline constexpr std::size_t kDefaultMaxSupport = static_cast<std::size_t>(kBins) * 15;

/// Discrete convolution of many distributions via one zero-padded FFT length.
/// Keeps FFTW plans between calls; use one instance per thread.
class Convolver {
 public:
  explicit Convolver(std::size_t max_support = kDefaultMaxSupport);
  ~Convolver();
  Convolver(const Convolver&) = delete;
  Convolver& operator=(const Convolver&) = delete;

  PhotonNumberDistribution operator()(std::span<const std::span<const double>> inputs);
  PhotonNumberDistribution operator()(std::span<const PhotonNumberDistribution> inputs);

  // Largest relative normalization correction applied so far.
  double max_correction() const noexcept { return max_correction_; }

 private:
  struct Plan;
  Plan& plan_for(std::size_t length);

  std::size_t max_support_;
  std::vector<std::unique_ptr<Plan>> plans_;
  double max_correction_ = 0.0;
};

PhotonNumberDistribution convolve_all(std::span<const PhotonNumberDistribution> pnds,
                                      std::size_t max_support = kDefaultMaxSupport);

struct ShotMoments {
  double mean = 0.0;
  double std = 0.0;
};

ShotMoments shot_moments(std::span<const PhotonNumberDistribution> pnds);

struct ShotResult {
  std::uint64_t shot_index = 0;
  double measured_mean = 0.0;
  double measured_std = 0.0;
  std::uint32_t clicks = 0;
  std::uint32_t out_of_window_tags = 0;
  std::uint32_t extra_tags = 0;
  std::uint32_t out_of_range_lookups = 0;
  friend bool operator==(const ShotResult&, const ShotResult&) = default;
};

/// Shot mean and std from the LUT rows' cached moments; the same sums that
/// shot_moments(per_bin_pnds(shot, luts)) computes.
ShotResult analyze_shot(const ShotRecord& shot, const BinTable<Lut>& luts);

// Per-shot CSV: shot_index, measured_mean, measured_std, clicks, out_of_window_tags.
void write_shot_csv_header(std::ostream& os);
void write_shot_csv_row(std::ostream& os, const ShotResult& r);
std::vector<ShotResult> read_shot_csv(std::istream& is);

}  // namespace pnr
