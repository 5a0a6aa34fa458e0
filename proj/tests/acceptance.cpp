// End-to-end acceptance run: trains both networks at the reference settings,
// builds the knowledge base, runs every experiment and prints one PASS/FAIL
// line per criterion. Exit status is nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dense_reference.hpp"
#include "dynn/bench.hpp"
#include "dynn/checkpoint.hpp"
#include "dynn/knowledge.hpp"
#include "dynn/stats.hpp"
#include "dynn/training.hpp"

#ifndef DYNN_ORCH_PATH
#error "DYNN_ORCH_PATH must name the dynn_orch executable"
#endif

namespace fs = std::filesystem;
using namespace dynn;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("criterion %d %s  %s  (%s)\n", id, ok ? "PASS" : "FAIL", what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> ranks_of(const std::vector<double>& v) { return stats::average_ranks(v); }

// ---- 1: gradient correctness -------------------------------------------------

// Randomly initialised networks: at convergence most gradients fall below
// the resolution of double-precision central differences.
void criterion1(const moe::ModelConfig& mc, const delay::CellConfig& cell) {
  double worst = 0;
  std::size_t runs = 0, min_entries = SIZE_MAX;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng init(derive_seed(5, seed));
    moe::DynnModel m = moe::DynnModel::init(mc, init);
    Rng rng(derive_seed(11, seed));
    for (std::size_t k : {std::size_t{1}, std::size_t{3}, mc.experts}) {
      const auto batch = delay::sample_scenario_with_mean(rng, cell, 5e3, 500.0);
      auto f = [&](ad::Tape& tape) { return train::loss(tape, batch, m, k, cell); };
      const auto params = m.parameters();
      ad::GradientCheckOptions opt;
      opt.samples = 200;
      opt.seed = derive_seed(seed, k);
      opt.eps = 1e-4;
      opt.tol = 1e-4;
      const auto r = ad::gradient_check(f, params, opt);
      worst = std::max(worst, r.worst);
      min_entries = std::min(min_entries, r.entries_checked);
      ok = ok && r.passed && r.entries_checked >= 50;
      ++runs;
    }
  }
  report(1, ok, "gradient check of the full loss at K in {1,3,M}",
         "worst relative error " + fmt("%.3g", worst) + " over " + std::to_string(runs) + " runs of " +
             std::to_string(min_entries) + " sampled parameters; limit 1e-4");
}

// ---- 2: conservation ------------------------------------------------------

void criterion2(const moe::DynnModel& dynn, const moe::DynnModel& fixed, const delay::CellConfig& cell) {
  Rng init(6);
  const moe::DynnModel untrained = moe::DynnModel::init(dynn.cfg, init);
  const moe::DynnModel* models[] = {&dynn, &untrained, &fixed};
  Rng rng(21);
  double worst = 0;
  const std::size_t calls = 10000;
  for (std::size_t i = 0; i < calls; ++i) {
    const moe::DynnModel& m = *models[i % 3];
    const std::size_t k = 1 + (i / 3) % m.cfg.experts;
    const auto batch = delay::sample_scenario(rng, cell, rng.uniform_open_closed(1.0, 20e3), 500.0);
    const auto a = moe::forward(batch, m, k, cell);
    worst = std::max(worst, std::abs(a.total() - cell.b_max_hz) / cell.b_max_hz);
  }
  report(2, worst <= 1e-9, "sum of allocated bandwidth equals b_max",
         std::to_string(calls) + " forward calls, worst |sum b - b_max|/b_max " + fmt("%.3g", worst) +
             "; limit 1e-9");
}

// ---- 3: sparse-execution equivalence ---------------------------------------

void criterion3(const moe::DynnModel& dynn, const delay::CellConfig& cell) {
  Rng rng(31);
  double worst = 0;
  const std::size_t inputs = 1000;
  std::vector<std::size_t> ks(dynn.cfg.experts);
  std::iota(ks.begin(), ks.end(), std::size_t{1});
  for (std::size_t i = 0; i < inputs; ++i) {
    const auto batch = delay::sample_scenario(rng, cell, rng.uniform_open_closed(1.0, 20e3), 500.0);
    for (std::size_t k : ks) {
      const auto sparse = moe::forward(batch, dynn, k, cell);
      const auto dense = testing::dense_reference(batch, dynn, k, cell);
      for (std::size_t u = 0; u < dense.size(); ++u)
        worst = std::max(worst, std::abs(sparse.b[u] - dense[u]) / std::abs(dense[u]));
    }
  }
  report(3, worst <= 1e-12, "expert-skipping forward equals the dense reference",
         std::to_string(inputs) + " inputs x all K, worst per-user relative error " + fmt("%.3g", worst) +
             "; limit 1e-12");
}

// ---- 4: table1 trends ----------------------------------------------------

void criterion4(const bench::Table1& t, const moe::ModelConfig& mc) {
  std::vector<double> k, t_tra;
  double perf1 = 0;
  bool macc_ok = true;
  const std::map<std::size_t, double> printed{{1, 2.17e3},   {2, 4.35e3},   {5, 10.87e3},
                                              {10, 21.74e3}, {20, 43.48e3}, {30, 65.22e3}};
  double worst_macc = 0;
  for (const auto& r : t.rows) {
    if (r.column.is_static) continue;
    k.push_back(static_cast<double>(r.column.k));
    t_tra.push_back(r.t_tra);
    if (r.column.k == 1) perf1 = r.perf;
    macc_ok = macc_ok && r.macc == r.column.k * mc.expert_cost();
    const auto it = printed.find(r.column.k);
    if (it != printed.end()) {
      const double rel = std::abs(static_cast<double>(r.macc) - it->second) / it->second;
      worst_macc = std::max(worst_macc, rel);
      macc_ok = macc_ok && rel <= 0.005;
    }
  }
  bool monotone = true;
  for (std::size_t i = 1; i < t_tra.size(); ++i) monotone = monotone && t_tra[i] <= t_tra[i - 1];
  const double rho = stats::spearman(k, t_tra);
  std::string series;
  for (std::size_t i = 0; i < t_tra.size(); ++i) series += (i ? " " : "") + fmt("%.4f", t_tra[i] * 1e3);
  report(4, perf1 >= 0.90 && monotone && rho <= -0.8 && macc_ok, "width table trends at 10 kb",
         "PERF(1) " + fmt("%.4f", perf1) + " (>= 0.90); T_tra ms " + series + (monotone ? " non-increasing" : " NOT monotone") +
             ", Spearman " + fmt("%.3f", rho) + " (<= -0.8); MACC exact, worst deviation from printed " +
             fmt("%.3f%%", worst_macc * 100) + " (<= 0.5%)" + (macc_ok ? "" : " FAILED"));
}

// ---- 5: table2 crossover --------------------------------------------------

void criterion5(const bench::Table2& t) {
  auto gain_at = [&](double s) {
    const auto it = std::find(t.s_means.begin(), t.s_means.end(), s);
    const auto& row = t.cells[static_cast<std::size_t>(it - t.s_means.begin())];
    double best = 1e300, fixed = 0;
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      if (t.columns[c].is_static) {
        fixed = row[c].total;
      } else {
        best = std::min(best, row[c].total);
      }
    }
    return std::pair{best, fixed};
  };
  const auto [best2, static2] = gain_at(2e3);
  const auto [best10, static10] = gain_at(10e3);
  const double gain2 = (static2 - best2) / static2;
  const double gap10 = std::abs(static10 - best10) / static10;
  report(5, gain2 >= 0.10 && gap10 <= 0.05, "best width vs static at f = 0.5 GHz",
         "2 kb: best " + fmt("%.4f", best2 * 1e3) + " ms vs static " + fmt("%.4f", static2 * 1e3) + " ms, gain " +
             fmt("%.2f%%", gain2 * 100) + " (>= 10%); 10 kb: best " + fmt("%.4f", best10 * 1e3) + " vs static " +
             fmt("%.4f", static10 * 1e3) + ", gap " + fmt("%.2f%%", gap10 * 100) + " (<= 5%)");
}

// ---- 6: delay vs frequency --------------------------------------------------

void criterion6(const bench::Fig3& fig, const bench::Table1& t1) {
  bool monotone = true;
  for (std::size_t i = 1; i < fig.f.size(); ++i)
    for (std::size_t c = 0; c < fig.columns.size(); ++c) monotone = monotone && fig.total[i][c] <= fig.total[i - 1][c];

  std::size_t k1 = 0, st = 0;
  std::vector<std::size_t> dyn;
  for (std::size_t c = 0; c < fig.columns.size(); ++c) {
    if (fig.columns[c].is_static) {
      st = c;
    } else {
      dyn.push_back(c);
      if (fig.columns[c].k == 1) k1 = c;
    }
  }
  const bool low_f = fig.f.front() == 20e6 && fig.total.front()[k1] < fig.total.front()[st];

  // Rank of each width by total at the top frequency vs by T_tra in Table 1.
  std::vector<double> total_hi, tra;
  for (std::size_t c : dyn) {
    total_hi.push_back(fig.total.back()[c]);
    tra.push_back(t1.rows[c].t_tra);
  }
  const bool same_order = ranks_of(total_hi) == ranks_of(tra);
  std::string order_hi, order_tra;
  auto order = [&](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::string s;
    for (std::size_t i : idx) s += (s.empty() ? "" : "<") + std::to_string(fig.columns[dyn[i]].k);
    return s;
  };
  report(6, monotone && low_f && same_order, "total delay vs CPU frequency",
         std::string("curves non-increasing: ") + (monotone ? "yes" : "NO") + "; at 20 MHz K=1 " +
             fmt("%.3f", fig.total.front()[k1] * 1e3) + " ms vs static " + fmt("%.3f", fig.total.front()[st] * 1e3) +
             " ms" + (low_f ? "" : " NOT better") + "; order at 2 GHz by total K " + order(total_hi) +
             ", by T_tra K " + order(tra) + (same_order ? "" : " MISMATCH"));
}

// ---- 7: optimal-width surface -----------------------------------------------

void criterion7(const kb::KnowledgeBase& kb, const moe::DynnModel& dynn, const delay::CellConfig& cell) {
  double min_row = 2, min_col = 2;
  for (std::size_t si = 0; si < kb.s_grid.size(); ++si) {
    std::vector<double> k;
    for (std::size_t fi = 0; fi < kb.f_grid.size(); ++fi) k.push_back(static_cast<double>(kb.at(si, fi)));
    const double rho = stats::spearman(kb.f_grid, k);
    min_row = std::isnan(rho) ? -2 : std::min(min_row, rho);
  }
  for (std::size_t fi = kb.f_grid.size() / 2; fi < kb.f_grid.size(); ++fi) {
    std::vector<double> k;
    for (std::size_t si = 0; si < kb.s_grid.size(); ++si) k.push_back(static_cast<double>(kb.at(si, fi)));
    const double rho = stats::spearman(kb.s_grid, k);
    min_col = std::isnan(rho) ? -2 : std::min(min_col, rho);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto mismatches = kb::verify_kb(kb, dynn, cell);
  report(7, min_row >= 0.6 && min_col > 0 && mismatches.empty(), "knowledge-base surface shape",
         "min Spearman(K*, f) per s row " + fmt("%.3f", min_row) + " (>= 0.6); min Spearman(K*, s) per column in "
             "the high-f half " + fmt("%.3f", min_col) + " (> 0); brute-force re-verification " +
             std::to_string(kb.k_star.size() - mismatches.size()) + "/" + std::to_string(kb.k_star.size()) +
             " cells exact (" + fmt("%.0f s", seconds_since(t0)) + ")");
}

// ---- 8: policy comparison ----------------------------------------------------

void criterion8(const bench::Fig5& fig) {
  const auto& know = fig.stats_of("knowledge");
  const auto& fixed = fig.stats_of("static");
  double best_other = 1e300;
  std::string best_name;
  for (std::size_t i = 0; i < fig.policies.size(); ++i) {
    const auto& p = fig.policies[i];
    if (p == "knowledge" || p == "static") continue;
    if (fig.summary[i].mean < best_other) {
      best_other = fig.summary[i].mean;
      best_name = p;
    }
  }
  const bool ok = know.count >= 1000 && know.median <= fixed.median && know.min <= 0.75 * fixed.min &&
                  know.mean <= best_other;
  report(8, ok, "knowledge-assisted width vs fixed, random and static",
         std::to_string(know.count) + " paired trials; median " + fmt("%.3f", know.median * 1e3) + " vs static " +
             fmt("%.3f", fixed.median * 1e3) + " ms; min " + fmt("%.4f", know.min * 1e3) + " vs 0.75 x static " +
             fmt("%.4f", 0.75 * fixed.min * 1e3) + " ms; mean " + fmt("%.4f", know.mean * 1e3) +
             " vs best other (" + best_name + ") " + fmt("%.4f", best_other * 1e3) + " ms");
}

// ---- 9: CLI determinism -------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool run(const std::string& cmd) {
  const std::string full = cmd + " > /dev/null";
  return std::system(full.c_str()) == 0;
}

void criterion9(const fs::path& root, const delay::CellConfig& cell) {
  fs::create_directories(root);
  const fs::path config = root / "small.json";
  std::ofstream(config) << R"({"epochs": 300, "eval_scenarios": 20, "fig5_trials": 40, "seed": 7})" << '\n';
  const fs::path scenario = root / "scenario.csv";
  {
    Rng rng(77);
    const auto b = delay::sample_scenario_with_mean(rng, cell, 4e3, 500.0);
    std::ofstream out(scenario);
    out << "s_bits,w,d_m\n";
    out.precision(17);
    for (std::size_t i = 0; i < b.size(); ++i) out << b.s[i] << ',' << b.w[i] << ',' << b.d[i] << '\n';
  }
  const std::string exe = DYNN_ORCH_PATH;
  bool ran = true;
  for (const char* tag : {"a", "b"}) {
    const fs::path out = root / tag;
    fs::remove_all(out);
    const std::string common = " --config " + config.string() + " --out " + out.string();
    ran = ran && run(exe + " train" + common);
    ran = ran && run(exe + " build-kb" + common + " --scenarios 10 --f-points 6");
    ran = ran && run(exe + " eval" + common + " --s-mean 3000 --f 4e8");
    ran = ran && run(exe + " allocate" + common + " --scenario " + scenario.string() + " --f 3e8");
    for (const char* e : {"table1", "table2", "fig3", "fig4", "fig5"}) ran = ran && run(exe + " reproduce " + e + common);
  }
  std::size_t files = 0, identical = 0, files_b = 0;
  if (!fs::is_directory(root / "a") || !fs::is_directory(root / "b")) ran = false;
  if (ran) {
    for (const auto& entry : fs::directory_iterator(root / "a")) {
      ++files;
      const fs::path other = root / "b" / entry.path().filename();
      if (fs::exists(other) && slurp(entry.path()) == slurp(other)) ++identical;
    }
    for ([[maybe_unused]] const auto& entry : fs::directory_iterator(root / "b")) ++files_b;
  }
  report(9, ran && files > 0 && files == identical && files == files_b, "CLI re-runs are byte-identical",
         std::string("train, build-kb, eval, allocate, reproduce x5 run twice") + (ran ? "" : " (a command FAILED)") +
             "; " + std::to_string(identical) + "/" + std::to_string(files) + " output files identical");
}

}  // namespace

int main() {
  const auto started = std::chrono::steady_clock::now();
  const delay::CellConfig cell;
  const moe::ModelConfig mc;
  const train::TrainConfig tc;
  const bench::BenchConfig bc;
  const fs::path out = fs::current_path() / "acceptance_out";
  fs::create_directories(out);

  std::printf("training gated network (%zu steps)...\n", tc.epochs);
  std::fflush(stdout);
  auto [dynn, dynn_report] = train::train_stage1(tc, mc, cell);
  moe::ModelConfig static_cfg = mc;
  static_cfg.gated = false;
  std::printf("training static network (%zu steps)...\n", tc.epochs);
  std::fflush(stdout);
  auto [fixed, fixed_report] = train::train_stage1(tc, static_cfg, cell);
  moe::save_checkpoint(dynn, out / "dynn.ckpt");
  moe::save_checkpoint(fixed, out / "static.ckpt");
  std::printf("trained in %.0f s\n", seconds_since(started));

  const auto t1 = bench::run_table1(dynn, fixed, bc, cell);
  const auto t2 = bench::run_table2(dynn, fixed, bc, cell);
  const auto f3 = bench::run_fig3(dynn, fixed, bc, cell);
  const auto kb = bench::run_fig4(dynn, bc, cell);
  const auto f5 = bench::run_fig5(dynn, fixed, kb, bc, cell);
  bench::emit(t1.table(), out / "table1.csv", bench::Format::csv);
  bench::emit(t2.table(), out / "table2.csv", bench::Format::csv);
  bench::emit(f3.table(), out / "fig3.csv", bench::Format::csv);
  bench::emit(bench::surface_table(kb), out / "fig4_surface.csv", bench::Format::csv);
  bench::emit(f5.table(), out / "fig5.csv", bench::Format::csv);
  std::printf("experiments done at %.0f s\n\n", seconds_since(started));

  criterion1(mc, cell);
  criterion2(dynn, fixed, cell);
  criterion3(dynn, cell);
  criterion4(t1, mc);
  criterion5(t2);
  criterion6(f3, t1);
  criterion7(kb, dynn, cell);
  criterion8(f5);
  criterion9(out / "cli", cell);

  std::printf("\n%d of 9 criteria failed; total %.0f s\n", failures, seconds_since(started));
  return failures == 0 ? 0 : 1;
}
