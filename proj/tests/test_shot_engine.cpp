#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "pnr/shot_engine.hpp"

using namespace pnr;

namespace {

Geometry test_geometry() {
  Geometry g;
  g.temporal_spacing_ps = 100'000;
  g.rep_rate_hz = 50'000.0;
  return g;
}

std::vector<double> random_pmf(std::mt19937_64& rng, std::size_t len) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> p(len);
  for (auto& v : p) v = u(rng);
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= s;
  return p;
}

std::vector<double> brute_convolve(const std::vector<std::vector<double>>& in) {
  std::vector<double> acc{1.0};
  for (const auto& p : in) {
    std::vector<double> next(acc.size() + p.size() - 1, 0.0);
    for (std::size_t i = 0; i < acc.size(); ++i)
      for (std::size_t j = 0; j < p.size(); ++j) next[i + j] += acc[i] * p[j];
    acc = std::move(next);
  }
  return acc;
}

std::vector<PhotonNumberDistribution> as_pnds(const std::vector<std::vector<double>>& in) {
  std::vector<PhotonNumberDistribution> out;
  for (const auto& p : in) out.emplace_back(p);
  return out;
}

}  // namespace

TEST_CASE("tag assignment geometry") {
  const auto g = test_geometry();
  const std::uint64_t T = 5'000'000;
  const std::vector<TimeTag> tags{{T, 0}, {T + 64 * 100'000 + 120, 3}};
  const auto r = assign_bins(tags, g);
  REQUIRE(r.shots.size() == 1);
  const auto& s = r.shots[0];
  CHECK(s.clicks() == 1);
  REQUIRE(s.outcomes[BinId{2, 64}.flat()].has_value());
  CHECK(*s.outcomes[BinId{2, 64}.flat()] == 120.0);
  CHECK(s.trigger_ps == T);
}

TEST_CASE("vacuum shots and tag bookkeeping") {
  const auto g = test_geometry();
  const std::uint64_t P = g.rep_period_ps();
  std::vector<TimeTag> tags;
  for (int s = 0; s < 4; ++s) tags.push_back({s * P + 1000, 0});
  auto r = assign_bins(tags, g);
  REQUIRE(r.shots.size() == 4);
  for (const auto& s : r.shots) CHECK(s.clicks() == 0);
  CHECK(r.shots[3].shot_index == 3);

  // Orphan before the first trigger, duplicate inside a window, tag between windows.
  tags = {{10, 5}, {1000, 0}, {1000 + 300, 1}, {1000 + 310, 1}, {1000 + 50'000, 2}, {P + 1000, 0}};
  r = assign_bins(tags, g);
  CHECK(r.orphan_tags == 1);
  CHECK(r.extra_tags == 1);
  CHECK(r.out_of_window_tags == 1);
  CHECK(*r.shots[0].outcomes[BinId{0, 0}.flat()] == 300.0);
  CHECK(r.shots[0].extra_tags == 1);
}

TEST_CASE("assignment errors") {
  const auto g = test_geometry();
  const std::uint64_t P = g.rep_period_ps();
  std::vector<TimeTag> gap{{0, 0}, {2 * P, 0}};
  CHECK_THROWS_AS(assign_bins(gap, g), Error);
  try {
    assign_bins(gap, g);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("missing trigger") != std::string::npos);
  }

  std::vector<TimeTag> unsorted{{0, 0}, {500, 1}, {400, 1}};
  CHECK_THROWS_AS(assign_bins(unsorted, g), Error);

  std::vector<TimeTag> bad_channel{{0, 0}, {500, 9}};
  CHECK_THROWS_AS(assign_bins(bad_channel, g), Error);

  // Interleaved channels, each sorted, are fine.
  std::vector<TimeTag> interleaved{{200'100, 2}, {0, 0}, {100'050, 1}, {P, 0}};
  const auto r = assign_bins(interleaved, g);
  CHECK(r.shots.size() == 2);
  CHECK(*r.shots[0].outcomes[BinId{1, 2}.flat()] == 100.0);
  CHECK(*r.shots[0].outcomes[BinId{0, 1}.flat()] == 50.0);
}

TEST_CASE("streaming assembler matches batch assignment") {
  const auto g = test_geometry();
  std::mt19937_64 rng(11);
  std::vector<TimeTag> tags;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const std::uint64_t t0 = s * g.rep_period_ps() + 777;
    tags.push_back({t0, 0});
    for (int i = 0; i < 40; ++i) {
      const auto k = rng() % 128;
      tags.push_back({t0 + k * g.temporal_spacing_ps + rng() % 600, static_cast<std::uint8_t>(1 + rng() % 8)});
    }
  }
  std::stable_sort(tags.begin(), tags.end(), [](const TimeTag& a, const TimeTag& b) {
    return a.timestamp_ps != b.timestamp_ps ? a.timestamp_ps < b.timestamp_ps : a.channel < b.channel;
  });
  const auto batch = assign_bins(tags, g);
  std::vector<ShotRecord> streamed;
  ShotAssembler a(g, [&](ShotRecord&& s) { streamed.push_back(std::move(s)); });
  for (const auto& t : tags) a.push(t);
  a.finish();
  CHECK(streamed == batch.shots);
}

TEST_CASE("per-bin distributions follow the LUT") {
  const BinTable<Lut> luts(build_lut(TimingFamily{}.model(15)));
  ShotRecord shot;
  auto pnds = per_bin_pnds(shot, luts);
  CHECK(pnds.size() == 1024);
  CHECK(std::all_of(pnds.begin(), pnds.end(), [](const auto& p) { return p.is_vacuum(); }));

  shot.outcomes[517] = 212.0;
  pnds = per_bin_pnds(shot, luts);
  CHECK(std::count_if(pnds.begin(), pnds.end(), [](const auto& p) { return !p.is_vacuum(); }) == 1);
  CHECK(pnds[517] == lookup(luts[517], 212.0));

  CHECK_THROWS_AS(per_bin_pnds(shot, BinTable<Lut>{}), Error);
}

TEST_CASE("convolution basics") {
  const PhotonNumberDistribution coin(std::vector<double>{0.5, 0.5});
  const std::vector<PhotonNumberDistribution> two{coin, coin};
  const auto c = convolve_all(two);
  REQUIRE(c.probs().size() == 3);
  CHECK(c[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(c[1] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(c[2] == doctest::Approx(0.25).epsilon(1e-14));

  const std::vector<PhotonNumberDistribution> vac(1024);
  CHECK(convolve_all(vac).is_vacuum());

  // Point masses shift the result.
  const PhotonNumberDistribution two_photons(std::vector<double>{0.0, 0.0, 1.0});
  const auto shifted = convolve_all(std::vector<PhotonNumberDistribution>{coin, two_photons});
  CHECK(shifted.probs().size() == 4);
  CHECK(shifted[2] == doctest::Approx(0.5));
  CHECK(shifted[3] == doctest::Approx(0.5));

  std::vector<PhotonNumberDistribution> big(100, PhotonNumberDistribution(std::vector<double>(16, 1.0 / 16)));
  CHECK_THROWS_AS(convolve_all(big, 1000), Error);
}

TEST_CASE("FFT convolution matches brute force") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> in;
    for (int i = 0; i < 8; ++i) in.push_back(random_pmf(rng, 16));
    const auto ref = brute_convolve(in);
    const auto got = convolve_all(as_pnds(in));
    double err = 0.0;
    for (std::size_t n = 0; n < ref.size(); ++n) err = std::max(err, std::abs(got[n] - ref[n]));
    CHECK(err <= 1e-10);
    CHECK(std::accumulate(got.probs().begin(), got.probs().end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("convolution invariants") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> in;
    std::size_t support = 0;
    for (int i = 0; i < 4; ++i) {
      in.push_back(random_pmf(rng, 2 + rng() % 12));
      support += in.back().size() - 1;
    }
    auto pnds = as_pnds(in);
    const auto a = convolve_all(pnds);
    CHECK(a.support_max() == support);
    const double s = std::accumulate(a.probs().begin(), a.probs().end(), 0.0);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    std::shuffle(pnds.begin(), pnds.end(), rng);
    const auto b = convolve_all(pnds);
    REQUIRE(b.probs().size() == a.probs().size());
    for (std::size_t n = 0; n < a.probs().size(); ++n) CHECK(std::abs(a[n] - b[n]) <= 1e-14);
  }
}

TEST_CASE("shot moments") {
  // Two bins each with mean 1.5, variance 0.25.
  const PhotonNumberDistribution p(std::vector<double>{0.0, 0.5, 0.5});
  const auto m = shot_moments(std::vector<PhotonNumberDistribution>{p, p});
  CHECK(m.mean == doctest::Approx(3.0));
  CHECK(m.std == doctest::Approx(std::sqrt(0.5)));

  const auto v = shot_moments(std::vector<PhotonNumberDistribution>(1024));
  CHECK(v.mean == 0.0);
  CHECK(v.std == 0.0);

  std::mt19937_64 rng(21);
  Convolver conv;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> in;
    for (int i = 0; i < 64; ++i) in.push_back(random_pmf(rng, 1 + rng() % 16));
    const auto pnds = as_pnds(in);
    const auto direct = shot_moments(pnds);
    const auto full = conv(pnds);
    CHECK(std::abs(full.mean() / direct.mean - 1.0) <= 1e-9);
    CHECK(std::abs(std::sqrt(full.variance()) / direct.std - 1.0) <= 1e-9);
  }
}

TEST_CASE("moment path equals the distribution path") {
  const BinTable<Lut> luts(build_lut(TimingFamily{}.model(15)));
  std::mt19937_64 rng(4);
  ShotRecord shot;
  shot.shot_index = 9;
  for (int i = 0; i < 300; ++i) shot.outcomes[rng() % 1024] = static_cast<double>(rng() % 500);
  const auto r = analyze_shot(shot, luts);
  LookupCounters counters;
  const auto m = shot_moments(per_bin_pnds(shot, luts, &counters));
  CHECK(r.measured_mean == m.mean);
  CHECK(r.measured_std == m.std);
  CHECK(r.clicks == static_cast<std::uint32_t>(shot.clicks()));
  CHECK(r.out_of_range_lookups == counters.out_of_range);
  CHECK(r.out_of_range_lookups > 0);
}

TEST_CASE("shot CSV round-trips") {
  std::vector<ShotResult> rows{{0, 0.0, 0.0, 0, 0, 0, 0}, {1, 276.123456789012345, 1.0 / 3.0, 400, 2, 0, 0}};
  std::stringstream ss;
  write_shot_csv_header(ss);
  for (const auto& r : rows) write_shot_csv_row(ss, r);
  const auto back = read_shot_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[1].measured_mean == rows[1].measured_mean);
  CHECK(back[1].measured_std == rows[1].measured_std);
  CHECK(back[1].clicks == 400);

  std::stringstream bad("shot_index,foo\n1,2\n");
  CHECK_THROWS_AS(read_shot_csv(bad), Error);
}
