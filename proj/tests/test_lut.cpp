#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "pnr/lut.hpp"

using namespace pnr;

namespace {

double row_sum(std::span<const double> r) { return std::accumulate(r.begin(), r.end(), 0.0); }

}  // namespace

TEST_CASE("isolated component gives a certain posterior") {
  const BinTimingModel m({{1, {400.0, 5.0, 2.0}, 0.5}, {2, {200.0, 5.0, 2.0}, 0.5}});
  const auto lut = build_lut(m, {0.0, 1.0, 600});
  CHECK(lut.row(402)[1] >= 1.0 - 1e-6);
  CHECK(lut.row(202)[2] >= 1.0 - 1e-6);
  CHECK(lut.row(402)[0] == 0.0);
}

TEST_CASE("identical shapes split evenly at the midpoint") {
  // tau << sigma makes each component symmetric about its mean.
  const BinTimingModel m({{1, {300.0, 20.0, 20e-9}, 0.5}, {2, {250.0, 20.0, 20e-9}, 0.5}});
  const auto lut = build_lut(m, {0.0, 0.5, 1200});
  const auto p = lookup(lut, 275.0);
  CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("rows are normalized on a fine grid") {
  const auto m = TimingFamily{}.model(15);
  const auto lut = build_lut(m, {0.0, 450.0 / 4096.0, 4096});
  for (std::size_t r = 0; r < lut.grid().len; ++r) CHECK(row_sum(lut.row(r)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("lookup semantics") {
  const auto m = TimingFamily{}.model(15);
  const auto lut = build_lut(m);
  LookupCounters counters;

  const auto vac = lookup(lut, std::nullopt, &counters);
  CHECK(vac.is_vacuum());
  CHECK(vac.mean() == 0.0);
  CHECK(vac.variance() == 0.0);

  for (std::size_t k : {0u, 17u, 211u, 449u}) {
    const auto p = lookup(lut, lut.grid().time(k), &counters);
    const auto row = lut.row(k);
    CHECK(std::equal(row.begin(), row.end(), p.probs().begin(), p.probs().end()));
  }
  CHECK(counters.out_of_range == 0);

  const auto below = lookup(lut, -30.0, &counters);
  const auto above = lookup(lut, 10'000.0, &counters);
  CHECK(counters.out_of_range == 2);
  CHECK(below == lookup(lut, 0.0));
  CHECK(above == lookup(lut, 449.0));

  // Direct density ratios at 150 ps.
  const auto p = lookup(lut, 150.0);
  double denom = 0.0;
  for (int n = 1; n <= 15; ++n) denom += emg_pdf(150.0, m.component(n).params);
  int populated = 0;
  for (int n = 1; n <= 15; ++n) {
    const double expect = emg_pdf(150.0, m.component(n).params) / denom;
    CHECK(std::abs(p[n] - expect) <= 1e-9);
    populated += p[n] > 1e-3;
  }
  CHECK(populated >= 2);
}

TEST_CASE("posterior ratios equal density ratios") {
  const auto m = TimingFamily{}.model(15);
  const auto lut = build_lut(m);
  for (std::size_t r = 60; r < 450; r += 13) {
    const double t = lut.grid().time(r);
    const auto row = lut.row(r);
    for (int n = 1; n <= 15; ++n)
      for (int k = n + 1; k <= 15; ++k) {
        if (row[n] < 1e-250 || row[k] < 1e-250) continue;
        const double lhs = std::log(row[n] / row[k]);
        const double rhs = emg_log_pdf(t, m.component(n).params) - emg_log_pdf(t, m.component(k).params);
        CHECK(std::abs(std::exp(lhs - rhs) - 1.0) <= 1e-9);
      }
  }
}

TEST_CASE("non-flat prior multiplies the flat posterior") {
  const auto m = TimingFamily{}.model(15);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  std::vector<double> prior(15);
  for (auto& w : prior) w = u(rng);
  const auto flat = build_lut(m);
  const auto weighted = build_lut(m, {}, prior);
  for (std::size_t r = 0; r < 450; r += 7) {
    const auto f = flat.row(r);
    const auto w = weighted.row(r);
    double z = 0.0;
    for (int n = 1; n <= 15; ++n) z += prior[n - 1] * f[n];
    for (int n = 1; n <= 15; ++n) CHECK(w[n] == doctest::Approx(prior[n - 1] * f[n] / z).epsilon(1e-9));
  }
}

TEST_CASE("underflowed rows copy the nearest regular row") {
  const auto m = TimingFamily{}.model(15);
  const auto lut = build_lut(m, {0.0, 1.0, 5000});
  const auto& flagged = lut.degenerate_rows();
  REQUIRE(!flagged.empty());
  CHECK(flagged.back() == 4999);
  auto is_flagged = [&](std::size_t r) { return std::binary_search(flagged.begin(), flagged.end(), r); };
  for (std::size_t r : flagged) {
    // Nearest regular row, searching outward with ties to the lower index.
    std::size_t src = r;
    for (std::size_t d = 1;; ++d) {
      if (d <= r && !is_flagged(r - d)) { src = r - d; break; }
      if (r + d < 5000 && !is_flagged(r + d)) { src = r + d; break; }
    }
    const auto a = lut.row(src);
    CHECK(std::equal(a.begin(), a.end(), lut.row(r).begin()));
  }
}

TEST_CASE("grid must cover every component") {
  const auto m = TimingFamily{}.model(15);
  try {
    build_lut(m, {0.0, 1.0, 200});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("n = 1") != std::string::npos);
  }
}

TEST_CASE("binary LUT files round-trip and reject damage") {
  const BinTable<Lut> luts(build_lut(TimingFamily{}.model(15)));
  std::stringstream ss;
  write_luts(ss, luts);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 8 + 8 + 32 + 450 * 16 * 8);

  std::stringstream in(bytes);
  const auto back = read_luts(in);
  REQUIRE(back.shared());
  CHECK(back[0] == luts[0]);
  CHECK(back[0].row_mean(200) == luts[0].row_mean(200));

  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream b1(bad);
  CHECK_THROWS_AS(read_luts(b1), Error);

  std::stringstream b2(bytes.substr(0, 1000));
  try {
    read_luts(b2);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::format);
    CHECK(std::string(e.what()).find("byte offset 1000") != std::string::npos);
  }

  std::ostringstream summary;
  write_lut_summary(summary, back[0]);
  CHECK(summary.str().find("n_cap 15") != std::string::npos);
}
