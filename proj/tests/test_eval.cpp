#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ottabp/eval.hpp"

using namespace ottabp;

namespace {

const ModelGeometry kGeo{8, 8, 4, 1};

struct SweepFixture {
  NormStats stats;
  ModelParams params = allocate_params(kGeo);
  std::vector<SubjectStream> targets;

  SweepFixture() {
    SynthConfig synth;
    synth.L = kGeo.window_length();
    synth.d = kGeo.d;
    synth.T = 30;
    synth.n_init = 10;
    synth.heart_cycles = 2.0;
    synth.noise_sigma = 0.02;
    synth.drift_delta = 8.0;
    synth.seed = 21;
    std::vector<SubjectStream> source;
    for (std::uint64_t i = 0; i < 3; ++i)
      source.push_back(synth_subject(synth, Domain::Source, i));
    stats = fit_norm(source);
    params = init_params(kGeo, 9);
    for (std::uint64_t i = 0; i < 3; ++i)
      targets.push_back(synth_subject(synth, Domain::Target, 100 + i));
  }

  AdaptConfig cfg() const {
    AdaptConfig c;
    c.reps_per_batch = 2;
    c.seed = 5;
    return c;
  }
};

}  // namespace

TEST_CASE("mae") {
  CHECK(mae({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(mae({1, 3}, {2, 2}) == 1.0);
  CHECK(mae({3, 1}, {2, 2}) == 1.0);  // order invariant
  CHECK_THROWS_AS(mae({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(mae({1}, {1, 2}), std::invalid_argument);
}

TEST_CASE("pearson") {
  SUBCASE("perfect correlation") { CHECK(pearson({0, 2}, {0, 2}) == 1.0); }
  SUBCASE("perfect anti-correlation") { CHECK(pearson({0, 2}, {2, 0}) == -1.0); }
  SUBCASE("longhand example") {
    CHECK(pearson({1, 2, 3}, {1, 2, 4}) == doctest::Approx(0.98198050606).epsilon(1e-8));
  }
  SUBCASE("zero variance is an explicit error") {
    CHECK_THROWS_AS(pearson({1, 1, 1}, {1, 2, 3}), ZeroVarianceError);
    CHECK_THROWS_AS(pearson({1, 2, 3}, {5, 5, 5}), ZeroVarianceError);
  }
  SUBCASE("short input is rejected") {
    CHECK_THROWS_AS(pearson({1}, {1}), std::invalid_argument);
  }
}

TEST_CASE("evaluate") {
  PredictionLog log;
  log.subject_id = "x";
  SUBCASE("perfect predictor") {
    for (int i = 0; i < 5; ++i)
      log.entries.push_back({i, 100.0 + i, 60.0 + i, BPLabel{100.0 + i, 60.0 + i}});
    const RunMetrics m = evaluate(log);
    CHECK(m.mae_sbp == 0.0);
    CHECK(m.mae_dbp == 0.0);
    CHECK(m.n_eval == 5);
    REQUIRE(m.corr_sbp.has_value());
    CHECK(*m.corr_sbp == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("truthless entries are excluded") {
    log.entries.push_back({0, 100, 60, BPLabel{101, 61}});
    log.entries.push_back({1, 100, 60, std::nullopt});
    log.entries.push_back({2, 103, 64, BPLabel{102, 62}});
    const RunMetrics m = evaluate(log);
    CHECK(m.n_eval == 2);
  }
  SUBCASE("constant truths leave the correlation missing, not zero") {
    log.entries.push_back({0, 100, 60, BPLabel{110, 70}});
    log.entries.push_back({1, 104, 63, BPLabel{110, 70}});
    const RunMetrics m = evaluate(log);
    CHECK(!m.corr_sbp.has_value());
    CHECK(m.mae_sbp == doctest::Approx(8.0));
  }
  SUBCASE("fewer than two entries is an error") {
    log.entries.push_back({0, 100, 60, BPLabel{101, 61}});
    CHECK_THROWS_AS(evaluate(log), DataError);
  }
}

TEST_CASE("baseline equals the degenerate run definitionally") {
  SweepFixture fx;
  AdaptConfig cfg = fx.cfg();
  cfg.lr_test = 0.0;
  cfg.init_labels = 0;
  cfg.injection_frequency.reset();
  for (const auto& stream : fx.targets) {
    const PredictionLog a = baseline_log(fx.params, fx.stats, stream);
    const PredictionLog b = run_subject(fx.params, fx.stats, attach_labels(stream, {}), cfg);
    REQUIRE(a.entries.size() == b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
      CHECK(a.entries[i].pred_sbp == b.entries[i].pred_sbp);
      CHECK(a.entries[i].pred_dbp == b.entries[i].pred_dbp);
    }
  }
  const RunMetrics m = baseline_no_adapt(fx.params, fx.stats, fx.targets);
  CHECK(m.n_eval == 90);
  // repeated calls are deterministic
  const RunMetrics m2 = baseline_no_adapt(fx.params, fx.stats, fx.targets);
  CHECK(m.mae_sbp == m2.mae_sbp);
}

TEST_CASE("sweep") {
  SweepFixture fx;
  SweepGrid grid;
  grid.frequencies = {10};
  grid.init_label_counts = {0};
  grid.seeds = {1};

  SUBCASE("a 1x1 grid with one subject equals that run's metrics") {
    const std::vector<SubjectStream> one = {fx.targets[0]};
    const ReportTable table = sweep(grid, fx.params, fx.stats, one, fx.cfg());
    const CellStats& cell = table.cells.at({0, 0});
    CHECK(cell.n_runs == 1);

    AdaptConfig cfg = fx.cfg();
    cfg.injection_frequency = 10;
    cfg.init_labels = 0;
    cfg.seed = mix_seed(fx.cfg().seed, 1);
    const RunMetrics direct = evaluate(run_subject(
        fx.params, fx.stats, attach_labels(fx.targets[0], label_schedule(30, 10)), cfg));
    CHECK(cell.mae_sbp == direct.mae_sbp);
    CHECK(cell.n_eval_mean == direct.n_eval);
  }
  SUBCASE("subject order does not change the table") {
    std::vector<SubjectStream> shuffled = {fx.targets[2], fx.targets[0], fx.targets[1]};
    const ReportTable a = sweep(grid, fx.params, fx.stats, fx.targets, fx.cfg());
    const ReportTable b = sweep(grid, fx.params, fx.stats, shuffled, fx.cfg());
    CHECK(a.cells.at({0, 0}).mae_sbp == doctest::Approx(b.cells.at({0, 0}).mae_sbp).epsilon(1e-12));
  }
  SUBCASE("parallel execution matches serial") {
    const ReportTable a = sweep(grid, fx.params, fx.stats, fx.targets, fx.cfg(), 1);
    const ReportTable b = sweep(grid, fx.params, fx.stats, fx.targets, fx.cfg(), 2);
    CHECK(a.cells.at({0, 0}).mae_sbp == b.cells.at({0, 0}).mae_sbp);
    CHECK(a.baseline.mae_sbp == b.baseline.mae_sbp);
  }
  SUBCASE("a diverging cell records errors and other cells proceed") {
    SweepGrid wide = grid;
    wide.frequencies = {std::nullopt, 10};
    AdaptConfig cfg = fx.cfg();
    cfg.init_labels = 0;
    // absurd learning rate blows up the labeled cells only
    cfg.lr_test = 1e9;
    const ReportTable table = sweep(wide, fx.params, fx.stats, fx.targets, cfg);
    CHECK(table.cells.at({1, 0}).failed());
    CHECK(table.any_failed());
  }
}

TEST_CASE("report writers") {
  SweepFixture fx;
  SweepGrid grid;
  grid.frequencies = {std::nullopt, 10};
  grid.init_label_counts = {0, 5};
  grid.seeds = {1};
  ReportTable table = sweep(grid, fx.params, fx.stats, fx.targets, fx.cfg());
  table.config_hash = "deadbeef00000000";
  table.seed = 42;

  SUBCASE("text table carries the layout, baseline, and reference footer") {
    std::ostringstream os;
    write_report_text(table, os);
    const std::string text = os.str();
    CHECK(text.find("N/A") != std::string::npos);
    CHECK(text.find("MAE") != std::string::npos);
    CHECK(text.find("Corr") != std::string::npos);
    CHECK(text.find("No-adaptation baseline") != std::string::npos);
    CHECK(text.find("13.66/8.15") != std::string::npos);
    CHECK(text.find("deadbeef00000000") != std::string::npos);
  }
  SUBCASE("CSV has one row per cell/metric/target") {
    const auto path = std::filesystem::temp_directory_path() / "ottabp_report_test.csv";
    write_report_csv(table, path.string());
    std::ifstream in(path);
    std::string line;
    int rows = 0;
    std::getline(in, line);
    CHECK(line.find("config_hash=deadbeef00000000") != std::string::npos);
    std::getline(in, line);
    CHECK(line == "frequency,init_labels,metric,target,value,n_eval,n_runs");
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    // (2 frequencies x 2 init counts + baseline) x 4 metric/target rows
    CHECK(rows == 20);
    std::filesystem::remove(path);
  }
}
