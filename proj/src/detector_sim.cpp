#include "pnr/detector_sim.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "pnr/csv.hpp"

namespace pnr {

namespace {

// Poisson draws by table inversion; large means fall back to the library
// sampler. Safe to share between threads.
class PoissonSampler {
 public:
  explicit PoissonSampler(double lambda) : lambda_(lambda) {
    if (lambda_ <= 0.0 || lambda_ > kTableLimit) return;
    double p = std::exp(-lambda_), c = p;
    cdf_.push_back(c);
    for (std::uint32_t k = 1; 1.0 - c > 1e-17 && p > 0.0; ++k) {
      p *= lambda_ / k;
      c += p;
      cdf_.push_back(c);
    }
  }

  std::uint32_t operator()(Rng& rng) const {
    if (lambda_ <= 0.0) return 0;
    if (lambda_ > kTableLimit) {
      std::poisson_distribution<std::uint32_t> d(lambda_);
      return d(rng);
    }
    const double u = uniform01(rng);
    std::uint32_t k = 0;
    while (k < cdf_.size() && u >= cdf_[k]) ++k;
    return k;
  }

 private:
  static constexpr double kTableLimit = 40.0;
  double lambda_;
  std::vector<double> cdf_;
};

}  // namespace

struct ShotPlan::Tables {
  std::vector<PoissonSampler> samplers;
  std::array<std::uint32_t, kBins> detected_sampler{};
  std::array<std::uint32_t, kBins> lost_sampler{};
  double blind_probability = 0.0;
  std::array<double, kSpatialBins> dark_probability{};
  std::array<const BinTimingModel*, kBins> model{};
};

std::uint64_t ShotTruth::total_photons() const noexcept {
  std::uint64_t s = 0;
  for (auto v : photons) s += v;
  return s;
}

std::uint64_t ShotTruth::total_detected() const noexcept {
  std::uint64_t s = 0;
  for (auto v : detected) s += v;
  return s;
}

ShotPlan::ShotPlan(double incident_mean, const DetectorConfig& config)
    : incident_mean_(incident_mean), config_(&config), tables_(std::make_unique<Tables>()) {
  config.validate();
  require(incident_mean >= 0.0 && std::isfinite(incident_mean), "incident mean must be >= 0");
  auto& t = *tables_;
  std::map<double, std::uint32_t> index;
  auto sampler_for = [&](double lambda) {
    auto [it, fresh] = index.try_emplace(lambda, static_cast<std::uint32_t>(t.samplers.size()));
    if (fresh) t.samplers.emplace_back(lambda);
    return it->second;
  };
  for (int b = 0; b < kBins; ++b) {
    const double reaching = incident_mean * split_fraction(BinId::from_flat(b), config);
    const double eta = config.bin_efficiency[b];
    t.detected_sampler[b] = sampler_for(reaching * eta);
    t.lost_sampler[b] = sampler_for(reaching * (1.0 - eta));
    t.model[b] = &config.timing_models[b];
  }
  t.blind_probability = config.blinding.probability(incident_mean);
  const double window_s = static_cast<double>(config.geometry.coincidence_window_ps) * 1e-12;
  for (int s = 0; s < kSpatialBins; ++s) t.dark_probability[s] = config.dark_rate_hz[s] * window_s;
}

ShotPlan::~ShotPlan() = default;
ShotPlan::ShotPlan(ShotPlan&&) noexcept = default;
ShotPlan& ShotPlan::operator=(ShotPlan&&) noexcept = default;

std::uint64_t trigger_time(const Geometry& geometry, std::uint64_t shot_index) {
  return shot_index * geometry.rep_period_ps() + geometry.trigger_offset_ps;
}

void simulate_shot(Rng& rng, const ShotPlan& plan, std::uint64_t shot_index, std::uint64_t trigger_ps,
                   SimulatedShot& out, bool emit_tags) {
  const auto& t = plan.tables();
  const auto& cfg = plan.config();
  const auto& geo = cfg.geometry;
  const auto window = static_cast<std::int64_t>(geo.coincidence_window_ps);

  out.record = ShotRecord{};
  out.record.shot_index = shot_index;
  out.record.trigger_ps = trigger_ps;
  out.truth = ShotTruth{};
  out.truth.shot_index = shot_index;
  out.truth.incident_mean = plan.incident_mean();
  out.tags.clear();
  if (emit_tags) out.tags.push_back({trigger_ps, kTriggerChannel});

  // Temporal-major order so the tags of one window group come out together.
  for (int k = 0; k < kTemporalBins; ++k) {
    const std::size_t group = out.tags.size();
    for (int s = 0; s < kSpatialBins; ++s) {
      const int b = BinId{s, k}.flat();
      const std::uint32_t n = t.samplers[t.detected_sampler[b]](rng);
      const std::uint32_t lost = t.samplers[t.lost_sampler[b]](rng);
      out.truth.photons[b] = n + lost;
      const bool blinded = t.blind_probability > 0.0 && uniform01(rng) < t.blind_probability;
      if (blinded) {
        out.truth.blinded.set(b);
        continue;
      }
      std::int64_t click = -1;
      bool dark = false;
      if (t.dark_probability[s] > 0.0 && uniform01(rng) < t.dark_probability[s]) {
        click = static_cast<std::int64_t>(uniform01(rng) * static_cast<double>(window));
        dark = true;
      }
      if (n > 0) {
        const int capped = std::min<int>(static_cast<int>(n), cfg.n_cap);
        out.truth.detected[b] = static_cast<std::uint32_t>(capped);
        const std::int64_t at = std::llround(emg_sample(rng, t.model[b]->component(capped).params));
        if (at < 0 || at >= window) {
          ++out.truth.out_of_window_arrivals;
        } else if (click < 0 || at <= click) {
          click = at;
          dark = false;
        }
      }
      if (click < 0) continue;
      if (dark) out.truth.dark.set(b);
      out.record.outcomes[b] = static_cast<double>(click);
      if (emit_tags)
        out.tags.push_back({trigger_ps + geo.window_start(k) + static_cast<std::uint64_t>(click),
                            static_cast<std::uint8_t>(s + 1)});
    }
    if (emit_tags)
      std::sort(out.tags.begin() + static_cast<std::ptrdiff_t>(group), out.tags.end(),
                [](const TimeTag& a, const TimeTag& b) {
                  return a.timestamp_ps != b.timestamp_ps ? a.timestamp_ps < b.timestamp_ps : a.channel < b.channel;
                });
  }
}

void simulate_shots(const RunSpec& run, const DetectorConfig& config, bool emit_tags,
                    const std::function<void(SimulatedShot&)>& sink) {
  require(run.shots_per_state >= 1, "shots_per_state must be >= 1");
  constexpr std::uint64_t kBatch = 1024;
  std::vector<SimulatedShot> batch(kBatch);
  for (std::size_t state = 0; state < run.incident_means.size(); ++state) {
    const ShotPlan plan(run.incident_means[state], config);
    const std::uint64_t first = state * run.shots_per_state;
    for (std::uint64_t done = 0; done < run.shots_per_state; done += kBatch) {
      const auto count = static_cast<std::int64_t>(std::min(kBatch, run.shots_per_state - done));
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < count; ++i) {
        const std::uint64_t g = first + done + static_cast<std::uint64_t>(i);
        Rng rng = make_stream(run.seed, g);
        auto& shot = batch[static_cast<std::size_t>(i)];
        simulate_shot(rng, plan, g, trigger_time(config.geometry, g), shot, emit_tags);
        shot.truth.state = static_cast<std::uint32_t>(state);
      }
      for (std::int64_t i = 0; i < count; ++i) sink(batch[static_cast<std::size_t>(i)]);
    }
  }
}

RunTotals simulate_run(const RunSpec& run, const DetectorConfig& config, TagWriter& tags, std::ostream* truth) {
  RunTotals totals;
  if (truth) write_truth_csv_header(*truth);
  simulate_shots(run, config, true, [&](SimulatedShot& shot) {
    tags.write(shot.tags);
    if (truth) write_truth_csv_row(*truth, shot.truth, shot.record.clicks());
    ++totals.shots;
    totals.records += shot.tags.size();
  });
  tags.finish();
  if (truth) {
    truth->flush();
    if (!*truth) fail(ErrorCategory::io, "failed writing the truth file");
  }
  return totals;
}

namespace {
constexpr std::string_view kTruthHeader =
    "shot_index,state,incident_mean_photons,true_photons,detected_photons,clicks,blinded_bins,dark_clicks,"
    "out_of_window_arrivals";
}

void write_truth_csv_header(std::ostream& os) { os << kTruthHeader << '\n'; }

void write_truth_csv_row(std::ostream& os, const ShotTruth& t, int clicks) {
  os << t.shot_index << ',' << t.state << ',' << csv::num(t.incident_mean) << ',' << t.total_photons() << ','
     << t.total_detected() << ',' << clicks << ',' << t.blinded.count() << ',' << t.dark.count() << ','
     << t.out_of_window_arrivals << '\n';
}

std::vector<TruthRow> read_truth_csv(std::istream& is) {
  std::vector<TruthRow> out;
  csv::read(is, kTruthHeader, [&](const std::vector<std::string_view>& f, std::size_t line) {
    TruthRow r;
    r.shot_index = csv::parse<std::uint64_t>(f[0], line);
    r.state = csv::parse<std::uint32_t>(f[1], line);
    r.incident_mean = csv::parse<double>(f[2], line);
    r.true_photons = csv::parse<std::uint64_t>(f[3], line);
    r.detected_photons = csv::parse<std::uint64_t>(f[4], line);
    r.clicks = csv::parse<std::uint32_t>(f[5], line);
    r.blinded_bins = csv::parse<std::uint32_t>(f[6], line);
    r.dark_clicks = csv::parse<std::uint32_t>(f[7], line);
    r.out_of_window_arrivals = csv::parse<std::uint32_t>(f[8], line);
    out.push_back(r);
  });
  return out;
}

}  // namespace pnr
