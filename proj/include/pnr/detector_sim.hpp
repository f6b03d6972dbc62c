#pragma once

#include <bitset>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "pnr/detector_config.hpp"
#include "pnr/rng.hpp"
#include "pnr/shot_engine.hpp"
#include "pnr/tag_io.hpp"

namespace pnr {

/// What actually happened in one simulated shot.
struct ShotTruth {
  std::uint64_t shot_index = 0;
  std::uint32_t state = 0;
  double incident_mean = 0.0;
  std::array<std::uint32_t, kBins> photons{};   // reaching the bin, before bin efficiency
  std::array<std::uint32_t, kBins> detected{};  // after loss, blinding and the n_cap cap
  std::bitset<kBins> blinded;
  std::bitset<kBins> dark;  // the bin's reported click is a dark count
  // Photon clicks whose rounded arrival time fell outside the window; no tag
  // is emitted for them.
  std::uint32_t out_of_window_arrivals = 0;

  std::uint64_t total_photons() const noexcept;
  std::uint64_t total_detected() const noexcept;
};

/// Per-state sampling tables: per-bin Poisson means, blinding and dark
/// probabilities. Build once per incident mean and reuse for every shot.
class ShotPlan {
 public:
  ShotPlan(double incident_mean, const DetectorConfig& config);
  ~ShotPlan();
  ShotPlan(ShotPlan&&) noexcept;
  ShotPlan& operator=(ShotPlan&&) noexcept;

  double incident_mean() const noexcept { return incident_mean_; }
  const DetectorConfig& config() const noexcept { return *config_; }

  struct Tables;
  const Tables& tables() const noexcept { return *tables_; }

 private:
  double incident_mean_;
  const DetectorConfig* config_;
  std::unique_ptr<Tables> tables_;
};

struct SimulatedShot {
  ShotRecord record;  // what the analysis would assemble from `tags`
  ShotTruth truth;
  std::vector<TimeTag> tags;  // trigger first, then clicks in time order
};

/// Simulates one shot with its trigger at `trigger_ps`. The random draws for
/// a bin always happen in the same order, so a given stream reproduces the
/// shot exactly.
void simulate_shot(Rng& rng, const ShotPlan& plan, std::uint64_t shot_index, std::uint64_t trigger_ps,
                   SimulatedShot& out, bool emit_tags = true);

/// Trigger time of global shot g: g * rep_period + trigger_offset.
std::uint64_t trigger_time(const Geometry& geometry, std::uint64_t shot_index);

struct RunSpec {
  std::uint64_t seed = 1;
  std::vector<double> incident_means;
  std::uint64_t shots_per_state = 1;
};

/// Runs every state in order; shot g uses stream make_stream(seed, g).
/// Shots are simulated in parallel batches and handed to `sink` in shot order.
void simulate_shots(const RunSpec& run, const DetectorConfig& config, bool emit_tags,
                    const std::function<void(SimulatedShot&)>& sink);

struct RunTotals {
  std::uint64_t shots = 0;
  std::uint64_t records = 0;
};

/// Writes the tag stream and, if `truth` is given, the per-shot truth CSV.
RunTotals simulate_run(const RunSpec& run, const DetectorConfig& config, TagWriter& tags,
                       std::ostream* truth = nullptr);

void write_truth_csv_header(std::ostream& os);
void write_truth_csv_row(std::ostream& os, const ShotTruth& t, int clicks);

struct TruthRow {
  std::uint64_t shot_index = 0;
  std::uint32_t state = 0;
  double incident_mean = 0.0;
  std::uint64_t true_photons = 0;
  std::uint64_t detected_photons = 0;
  std::uint32_t clicks = 0;
  std::uint32_t blinded_bins = 0;
  std::uint32_t dark_clicks = 0;
  std::uint32_t out_of_window_arrivals = 0;
};

std::vector<TruthRow> read_truth_csv(std::istream& is);

}  // namespace pnr
