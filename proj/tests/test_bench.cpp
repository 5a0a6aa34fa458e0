#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dynn/bench.hpp"
#include "dynn/stats.hpp"
#include "test_util.hpp"

using namespace dynn;
using namespace dynn::bench;
using dynn::testing::random_model;
using dynn::testing::small_cell;
using dynn::testing::small_model;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

BenchConfig small_bench() {
  BenchConfig bc;
  bc.eval_scenarios = 20;
  bc.widths = {1, 3, 6};
  bc.fig3_points = 5;
  bc.fig5_trials = 30;
  return bc;
}

}  // namespace

TEST(Render, CsvAndPlotData) {
  ResultTable t{{"a", "b", "c"}, {{std::int64_t{1}, 0.1, std::string("x")}}};
  EXPECT_EQ(render(t, Format::csv), "a,b,c\n1,0.1,x\n");
  EXPECT_EQ(render(t, Format::plot_data), "# a b c\n1 0.1 x\n");
  ResultTable empty{{"a", "b"}, {}};
  EXPECT_EQ(render(empty, Format::csv), "a,b\n");
  ResultTable ragged{{"a"}, {{1.0, 2.0}}};
  EXPECT_THROW(render(ragged, Format::csv), ContractError);
}

TEST(Render, TwelveSignificantDigitsRoundTrip) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double v = rng.uniform(-1e6, 1e6) * std::pow(10.0, rng.uniform(-12, 6));
    const std::string s = render({{"v"}, {{v}}}, Format::csv);
    const double back = std::strtod(s.c_str() + 2, nullptr);
    EXPECT_LE(std::abs(back - v), 1e-11 * std::abs(v));
  }
}

TEST(Emit, DeterministicBytes) {
  const auto cell = small_cell();
  const auto dynn = random_model(small_model(), 1);
  const auto fixed = random_model(small_model(5, 6, false), 2);
  const auto bc = small_bench();
  const auto dir = std::filesystem::temp_directory_path();
  emit(run_table1(dynn, fixed, bc, cell).table(), dir / "dynn_t1a.csv", Format::csv);
  emit(run_table1(dynn, fixed, bc, cell).table(), dir / "dynn_t1b.csv", Format::csv);
  EXPECT_EQ(slurp(dir / "dynn_t1a.csv"), slurp(dir / "dynn_t1b.csv"));
  EXPECT_THROW(emit(ResultTable{}, "/nonexistent/dir/x.csv", Format::csv), IoError);
}

TEST(Table1, PerfAndMacc) {
  const auto cell = small_cell();
  const auto dynn = random_model(small_model(), 3);
  const auto fixed = random_model(small_model(5, 6, false), 4);
  const auto t = run_table1(dynn, fixed, small_bench(), cell);
  ASSERT_EQ(t.rows.size(), 4u);
  double best = 1e300;
  for (const auto& r : t.rows) best = std::min(best, r.t_tra);
  for (const auto& r : t.rows) {
    EXPECT_DOUBLE_EQ(r.perf, best / r.t_tra);
    EXPECT_LE(r.perf, 1.0);
    EXPECT_EQ(r.macc, r.column.k * dynn.cfg.expert_cost());
  }
  EXPECT_EQ(t.rows.back().column.label, "static");
}

TEST(Fig3, TotalsDecreaseWithFrequency) {
  const auto cell = small_cell();
  const auto dynn = random_model(small_model(), 5);
  const auto fixed = random_model(small_model(5, 6, false), 6);
  const auto fig = run_fig3(dynn, fixed, small_bench(), cell);
  for (std::size_t i = 1; i < fig.f.size(); ++i)
    for (std::size_t c = 0; c < fig.columns.size(); ++c) EXPECT_LE(fig.total[i][c], fig.total[i - 1][c]);
}

TEST(Fig5, PairedPoliciesShareTrials) {
  const auto cell = small_cell();
  const auto dynn = random_model(small_model(), 7);
  const auto fixed = random_model(small_model(5, 6, false), 8);
  const auto bc = small_bench();
  const auto kb = run_fig4(dynn, bc, cell, {1e3, 5e3, 10e3}, kb::log_grid(1e7, 1e9, 4));
  const auto fig = run_fig5(dynn, fixed, kb, bc, cell);
  EXPECT_EQ(fig.policies.size(), 1 + dynn.cfg.experts + 2);
  for (const auto& s : fig.totals) EXPECT_EQ(s.size(), bc.fig5_trials);
  EXPECT_EQ(fig.trial_s_mean.back(), bc.fig5_s_max);
  for (double f : fig.trial_f) {
    EXPECT_GE(f, bc.fig5_f_min);
    EXPECT_LT(f, bc.fig5_f_max);
  }
  const auto again = run_fig5(dynn, fixed, kb, bc, cell);
  EXPECT_EQ(render(fig.trials_table(), Format::csv), render(again.trials_table(), Format::csv));
  EXPECT_THROW(fig.index_of("nope"), ContractError);
}

TEST(Stats, SummaryOrderingAndQuantiles) {
  const std::vector<double> v{5, 1, 4, 2, 3};
  const auto s = stats::summarize(v);
  EXPECT_EQ(s.min, 1);
  EXPECT_EQ(s.q1, 2);
  EXPECT_EQ(s.median, 3);
  EXPECT_EQ(s.q3, 4);
  EXPECT_EQ(s.max, 5);
  EXPECT_EQ(s.mean, 3);
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(1 + rng.index(40));
    for (double& e : x) e = rng.uniform(-10, 10);
    const auto r = stats::summarize(x);
    EXPECT_LE(r.min, r.q1);
    EXPECT_LE(r.q1, r.median);
    EXPECT_LE(r.median, r.q3);
    EXPECT_LE(r.q3, r.max);
  }
}

TEST(Stats, Spearman) {
  const std::vector<double> x{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(stats::spearman(x, std::vector<double>{10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(stats::spearman(x, std::vector<double>{4, 3, 2, 1}), -1.0);
  EXPECT_TRUE(std::isnan(stats::spearman(x, std::vector<double>{1, 1, 1, 1})));
  const auto ranks = stats::average_ranks(std::vector<double>{3, 1, 3, 2});
  EXPECT_EQ(ranks, (std::vector<double>{3.5, 1, 3.5, 2}));
}
