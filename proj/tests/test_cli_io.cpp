#include <doctest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "pnr/detector_sim.hpp"
#include "pnr/ensemble_stats.hpp"
#include "pnr/run_config.hpp"
#include "pnr/tomography.hpp"

using namespace pnr;
namespace fs = std::filesystem;

namespace {

struct Scratch {
  fs::path dir = fs::temp_directory_path() / ("pnr_cli_" + std::to_string(::getpid()));
  // Outputs without an explicit path land here too.
  Scratch() {
    fs::create_directories(dir);
    ::setenv("PNR_DATA_DIR", dir.c_str(), 1);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

// Runs the tool with stdout captured into `out`; returns the exit status.
int tool(const std::string& args, const Scratch& s, std::string* out = nullptr) {
  const std::string log = s / "stdout.txt";
  const std::string cmd = std::string(PNRTOOL_PATH) + " " + args + " > " + log + " 2> " + (s / "stderr.txt");
  const int rc = std::system(cmd.c_str());
  if (out) {
    std::ifstream in(log);
    std::ostringstream ss;
    ss << in.rdbuf();
    *out = ss.str();
  }
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

}  // namespace

TEST_CASE("click table command") {
  Scratch s;
  std::string out;
  REQUIRE(tool("click-table --bins 28,100,1024", s, &out) == 0);
  CHECK(out == "bins,n_max_click_photons\n28,10\n100,16\n1024,47\n");
}

TEST_CASE("vacuum run analyzes to zero") {
  Scratch s;
  REQUIRE(tool("simulate --incident-mean 0 --shots 100 --tags " + (s / "v.tags") + " --truth " + (s / "v.csv"), s) == 0);
  REQUIRE(tool("analyze --tags " + (s / "v.tags") + " --out " + (s / "shots.csv"), s) == 0);
  std::ifstream in(s / "shots.csv");
  const auto rows = read_shot_csv(in);
  REQUIRE(rows.size() == 100);
  for (const auto& r : rows) CHECK(r.measured_mean == 0.0);
}

TEST_CASE("pipeline output equals the library computation") {
  Scratch s;
  spit(s / "run.json", R"({"seed": 42, "shots_per_state": 400, "schedule": {"max_mean_photons": 15393, "states": 25},
                           "paths": {"tags": ")" + (s / "run.tags") + R"(", "shots": ")" + (s / "shots.csv") + R"("}})");
  const std::string cfg = "--config " + (s / "run.json");
  REQUIRE(tool("simulate " + cfg, s) == 0);
  REQUIRE(tool("analyze " + cfg, s) == 0);
  REQUIRE(tool("ensemble-report " + cfg + " --out " + (s / "ensemble.csv"), s) == 0);

  const auto run = load_run_config(s / "run.json");
  REQUIRE(run.incident_means.size() == 25);
  const auto luts = build_luts(run.detector.timing_models, run.analysis.lut_grid);
  std::vector<EnsembleAccumulator> acc(25);
  simulate_shots({run.seed, run.incident_means, run.shots_per_state}, run.detector, false,
                 [&](SimulatedShot& shot) { acc[shot.truth.state].add(analyze_shot(shot.record, luts)); });
  std::ostringstream expect;
  write_ensemble_csv_header(expect);
  for (std::size_t i = 0; i < acc.size(); ++i) write_ensemble_csv_row(expect, i, acc[i].summary(run.incident_means[i]));
  CHECK(slurp(s / "ensemble.csv") == expect.str());

  // The same report again, grouped by the truth file instead of the schedule.
  REQUIRE(tool("simulate " + cfg + " --truth " + (s / "truth.csv"), s) == 0);
  REQUIRE(tool("ensemble-report " + cfg + " --truth " + (s / "truth.csv") + " --out " + (s / "again.csv"), s) == 0);
  CHECK(slurp(s / "again.csv") == expect.str());
}

TEST_CASE("exit status reflects the error category") {
  Scratch s;
  CHECK(tool("simulate --no-such-flag", s) == 2);
  spit(s / "bad.json", R"({"detector": {"n_cap": 15, "colour": "blue"}})");
  CHECK(tool("simulate --config " + (s / "bad.json"), s) == 2);
  CHECK(tool("analyze --tags " + (s / "missing.tags"), s) == 3);
  spit(s / "junk.tags", "definitely not a tag file");
  CHECK(tool("analyze --tags " + (s / "junk.tags") + " --out " + (s / "x.csv"), s) == 4);

  REQUIRE(tool("simulate --incident-mean 10,20 --shots 5 --tags " + (s / "t.tags") + " --truth " + (s / "t.csv"), s) == 0);
  REQUIRE(tool("analyze --tags " + (s / "t.tags") + " --out " + (s / "t_shots.csv"), s) == 0);
  // Ten shots against a schedule of two states with three shots each.
  spit(s / "short.json", R"({"shots_per_state": 3, "schedule": {"incident_means_photons": [10, 20]}})");
  CHECK(tool("ensemble-report --config " + (s / "short.json") + " --shots " + (s / "t_shots.csv") + " --out " +
                 (s / "e.csv"),
             s) == 5);
  CHECK(tool("tomography --shots " + (s / "t_shots.csv") + " --truth " + (s / "t.csv") +
                 " --outcome-bins 30 --truncation 80 --max-iterations 2 --povm " + (s / "p.bin") + " --diagnostics " +
                 (s / "d.csv"),
             s) == 6);
  std::ifstream pv(s / "p.bin", std::ios::binary);
  const auto povm = read_povm(pv);
  CHECK(povm.rows() == 80);
  CHECK(constraint_violation(povm) <= 1e-8);
}

TEST_CASE("run configuration") {
  std::istringstream empty("{}");
  const auto defaults = parse_run_config(empty);
  CHECK(defaults.incident_means.size() == 125);
  CHECK(defaults.detector.n_cap == 15);

  std::istringstream doc(R"({"seed": 5, "detector": {"dark_rate_hz": 3, "blinding": {"form": "none"}, "n_cap": 6,
      "timing_family": {"sigma0_ps": 9}}, "analysis": {"gamma": 0.5}})");
  const auto c = parse_run_config(doc);
  CHECK(c.seed == 5);
  CHECK(c.detector.dark_rate_hz[7] == 3.0);
  CHECK(c.detector.blinding.form == BlindingForm::none);
  CHECK(c.detector.timing_models[0].n_cap() == 6);
  CHECK(c.detector.timing_models[0].component(1).params.sigma_ps == 9.0);
  CHECK(*c.analysis.tomography.gamma == 0.5);

  std::stringstream written;
  write_run_config(written, c);
  const auto back = parse_run_config(written);
  CHECK(back.detector.timing_models[0] == c.detector.timing_models[0]);
  CHECK(back.incident_means == c.incident_means);
  CHECK(back.detector.dark_rate_hz == c.detector.dark_rate_hz);

  for (const char* bad : {R"({"sed": 1})", R"({"detector": {"dark_rate": 3}})", R"({"detector": {"n_cap": "x"}})",
                          R"({"schedule": {"states": 3, "incident_means_photons": [1]}})", R"({"detector": [1]})",
                          "{not json"}) {
    std::istringstream in(bad);
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_run_config(in), Error);
  }
}
