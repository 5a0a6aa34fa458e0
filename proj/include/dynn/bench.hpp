#pragma once

// Evaluation harness: width/delay tables, delay-vs-frequency curves, the
// optimal-width surface and the paired policy comparison, plus CSV and
// plot-data emission.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dynn/delay_model.hpp"
#include "dynn/errors.hpp"
#include "dynn/knowledge.hpp"
#include "dynn/moe.hpp"
#include "dynn/rng.hpp"
#include "dynn/stats.hpp"

namespace dynn::bench {

using delay::CellConfig;
using delay::DelayBreakdown;
using delay::ScenarioBatch;
using moe::DynnModel;

// ---- results and emission -------------------------------------------------

using Cell = std::variant<std::int64_t, double, std::string>;

struct ResultTable {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

enum class Format { csv, plot_data };

namespace detail_bench {

inline std::string render_cell(const Cell& c) {
  if (const auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&c)) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", *d);
    return buf;
  }
  return std::get<std::string>(c);
}

}  // namespace detail_bench

// CSV: comma-separated with a header row. Plot data: whitespace-separated
// columns under a '#'-prefixed header, one row per x value.
inline std::string render(const ResultTable& t, Format format) {
  const char* sep = format == Format::csv ? "," : " ";
  std::ostringstream out;
  if (format == Format::plot_data) out << "# ";
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? sep : "") << t.columns[i];
  out << '\n';
  for (const auto& row : t.rows) {
    detail::require(row.size() == t.columns.size(), "render: row width differs from header");
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? sep : "") << detail_bench::render_cell(row[i]);
    out << '\n';
  }
  return out.str();
}

inline void emit(const ResultTable& t, const std::filesystem::path& path, Format format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << render(t, format);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// ---- experiment settings --------------------------------------------------

struct BenchConfig {
  std::uint64_t seed = 2024;
  std::size_t eval_scenarios = 1000;
  double d_max = 500.0;
  std::vector<std::size_t> widths{1, 2, 5, 10, 20, 30};
  double table1_s_mean = 10e3;
  std::vector<double> table2_s_means{2e3, 4e3, 6e3, 8e3, 10e3};
  double table2_f = 0.5e9;
  double fig3_f_min = 20e6;
  double fig3_f_max = 2e9;
  std::size_t fig3_points = 20;
  std::size_t fig5_trials = 1000;
  double fig5_f_min = 10e6;
  double fig5_f_max = 1e9;
  double fig5_s_max = 10e3;  // largest per-trial mean task size

  kb::EvalConfig kb_eval() const { return {eval_scenarios, seed, d_max}; }
};

// Frozen evaluation set for a mean task size; the same (seed, s_mean)
// always gives the same set, so tables at equal task size share it.
inline std::vector<ScenarioBatch> eval_set(const BenchConfig& bc, double s_mean, const CellConfig& cell) {
  Rng rng(derive_seed(bc.seed, static_cast<std::uint64_t>(std::llround(s_mean))));
  std::vector<ScenarioBatch> out;
  out.reserve(bc.eval_scenarios);
  for (std::size_t i = 0; i < bc.eval_scenarios; ++i)
    out.push_back(delay::sample_scenario_with_mean(rng, cell, s_mean, bc.d_max));
  return out;
}

// One column of the width tables: a DyNN width or the static network.
struct Column {
  std::string label;
  std::size_t k = 0;  // width used for the computing delay
  bool is_static = false;
};

inline std::vector<Column> width_columns(const BenchConfig& bc, const DynnModel& static_model) {
  std::vector<Column> cols;
  for (std::size_t k : bc.widths) cols.push_back({"K=" + std::to_string(k), k, false});
  cols.push_back({"static", static_model.cfg.experts, true});
  return cols;
}

// Mean T_tra of every column on one set.
inline std::vector<double> column_t_tra(const DynnModel& dynn, const DynnModel& static_model,
                                        const std::vector<Column>& cols, const std::vector<ScenarioBatch>& set,
                                        const CellConfig& cell) {
  std::vector<std::size_t> ks;
  for (const Column& c : cols)
    if (!c.is_static) ks.push_back(c.k);
  std::vector<double> out(cols.size(), 0.0);
  for (const ScenarioBatch& b : set) {
    const auto allocs = moe::forward_widths(b, dynn, ks, cell);
    std::size_t next = 0;
    for (std::size_t i = 0; i < cols.size(); ++i) {
      const auto alloc = cols[i].is_static ? moe::static_forward(b, static_model, cell) : allocs[next++];
      out[i] += delay::weighted_transmission_delay(b, alloc, cell);
    }
  }
  for (double& v : out) v /= static_cast<double>(set.size());
  return out;
}

inline std::vector<double> column_t_com(const DynnModel& dynn, const std::vector<Column>& cols,
                                        const std::vector<ScenarioBatch>& set, double f, const CellConfig& cell) {
  std::vector<double> out;
  for (const Column& c : cols) out.push_back(kb::mean_computing_delay(dynn, c.k, set, f, cell));
  return out;
}

// ---- table1: T_tra, PERF and MACC per width --------------------------------

struct Table1Row {
  Column column;
  double t_tra = 0.0;
  double perf = 0.0;
  std::size_t macc = 0;
};

struct Table1 {
  std::vector<Table1Row> rows;

  ResultTable table() const {
    ResultTable t{{"model", "k", "t_tra_ms", "perf", "macc"}, {}};
    for (const auto& r : rows)
      t.rows.push_back({r.column.label, static_cast<std::int64_t>(r.column.k), r.t_tra * 1e3, r.perf,
                        static_cast<std::int64_t>(r.macc)});
    return t;
  }
};

inline Table1 run_table1(const DynnModel& dynn, const DynnModel& static_model, const BenchConfig& bc,
                         const CellConfig& cell) {
  const auto cols = width_columns(bc, static_model);
  const auto set = eval_set(bc, bc.table1_s_mean, cell);
  const auto t_tra = column_t_tra(dynn, static_model, cols, set, cell);
  const double best = *std::min_element(t_tra.begin(), t_tra.end());
  Table1 out;
  for (std::size_t i = 0; i < cols.size(); ++i)
    out.rows.push_back({cols[i], t_tra[i], best / t_tra[i], moe::macc(dynn.cfg, cols[i].k)});
  return out;
}

// ---- table2: total delay per task size and width at fixed f ---------------

struct Table2 {
  std::vector<double> s_means;
  std::vector<Column> columns;
  std::vector<std::vector<DelayBreakdown>> cells;  // [s][column]

  ResultTable table() const {
    ResultTable t{{"s_kb"}, {}};
    for (const auto& c : columns) t.columns.push_back(c.label);
    for (std::size_t si = 0; si < s_means.size(); ++si) {
      std::vector<Cell> row{s_means[si] / 1e3};
      for (const auto& d : cells[si]) row.emplace_back(d.total * 1e3);
      t.rows.push_back(std::move(row));
    }
    return t;
  }
};

inline Table2 run_table2(const DynnModel& dynn, const DynnModel& static_model, const BenchConfig& bc,
                         const CellConfig& cell) {
  Table2 out;
  out.s_means = bc.table2_s_means;
  out.columns = width_columns(bc, static_model);
  for (double s : out.s_means) {
    const auto set = eval_set(bc, s, cell);
    const auto t_tra = column_t_tra(dynn, static_model, out.columns, set, cell);
    const auto t_com = column_t_com(dynn, out.columns, set, bc.table2_f, cell);
    std::vector<DelayBreakdown> row;
    for (std::size_t i = 0; i < out.columns.size(); ++i) row.push_back(DelayBreakdown::of(t_tra[i], t_com[i]));
    out.cells.push_back(std::move(row));
  }
  return out;
}

// ---- fig3: total delay against CPU frequency ------------------------------

struct Fig3 {
  std::vector<double> f;
  std::vector<Column> columns;
  std::vector<double> t_tra;                  // per column, frequency independent
  std::vector<std::vector<double>> total;     // [f][column]

  ResultTable table() const {
    ResultTable t{{"f_hz"}, {}};
    for (const auto& c : columns) t.columns.push_back(c.label);
    for (std::size_t i = 0; i < f.size(); ++i) {
      std::vector<Cell> row{f[i]};
      for (double v : total[i]) row.emplace_back(v * 1e3);
      t.rows.push_back(std::move(row));
    }
    return t;
  }
};

inline Fig3 run_fig3(const DynnModel& dynn, const DynnModel& static_model, const BenchConfig& bc,
                     const CellConfig& cell) {
  Fig3 out;
  out.f = kb::log_grid(bc.fig3_f_min, bc.fig3_f_max, bc.fig3_points);
  out.columns = width_columns(bc, static_model);
  const auto set = eval_set(bc, bc.table1_s_mean, cell);
  out.t_tra = column_t_tra(dynn, static_model, out.columns, set, cell);
  for (double f : out.f) {
    const auto t_com = column_t_com(dynn, out.columns, set, f, cell);
    std::vector<double> row;
    for (std::size_t i = 0; i < out.columns.size(); ++i) row.push_back(out.t_tra[i] + t_com[i]);
    out.total.push_back(std::move(row));
  }
  return out;
}

// ---- fig4: optimal-width surface ------------------------------------------

inline kb::KnowledgeBase run_fig4(const DynnModel& dynn, const BenchConfig& bc, const CellConfig& cell,
                                  std::vector<double> s_grid = kb::default_s_grid(),
                                  std::vector<double> f_grid = kb::default_f_grid()) {
  return kb::build_kb(dynn, std::move(s_grid), std::move(f_grid), bc.kb_eval(), cell);
}

inline ResultTable surface_table(const kb::KnowledgeBase& kb) {
  ResultTable t{{"s_bits", "f_hz", "k"}, {}};
  for (std::size_t si = 0; si < kb.s_grid.size(); ++si)
    for (std::size_t fi = 0; fi < kb.f_grid.size(); ++fi)
      t.rows.push_back({kb.s_grid[si], kb.f_grid[fi], static_cast<std::int64_t>(kb.at(si, fi))});
  return t;
}

// ---- fig5: paired policy comparison ---------------------------------------

struct Fig5 {
  std::vector<std::string> policies;
  std::vector<std::vector<double>> totals;  // [policy][trial], seconds
  std::vector<stats::SummaryStats> summary;
  std::vector<double> trial_s_mean;
  std::vector<double> trial_f;

  std::size_t index_of(const std::string& policy) const {
    for (std::size_t i = 0; i < policies.size(); ++i)
      if (policies[i] == policy) return i;
    throw ContractError("Fig5: unknown policy '" + policy + "'");
  }
  const stats::SummaryStats& stats_of(const std::string& policy) const { return summary[index_of(policy)]; }

  ResultTable table() const {
    ResultTable t{{"policy", "min_ms", "q1_ms", "median_ms", "q3_ms", "max_ms", "mean_ms", "trials"}, {}};
    for (std::size_t i = 0; i < policies.size(); ++i) {
      const auto& s = summary[i];
      t.rows.push_back({policies[i], s.min * 1e3, s.q1 * 1e3, s.median * 1e3, s.q3 * 1e3, s.max * 1e3,
                        s.mean * 1e3, static_cast<std::int64_t>(s.count)});
    }
    return t;
  }

  ResultTable trials_table() const {
    ResultTable t{{"trial", "s_mean_bits", "f_hz"}, {}};
    for (const auto& p : policies) t.columns.push_back(p + "_ms");
    for (std::size_t j = 0; j < trial_f.size(); ++j) {
      std::vector<Cell> row{static_cast<std::int64_t>(j), trial_s_mean[j], trial_f[j]};
      for (const auto& series : totals) row.emplace_back(series[j] * 1e3);
      t.rows.push_back(std::move(row));
    }
    return t;
  }
};

// Every policy sees the same (scenario, f) stream. Trial j uses mean task
// size fig5_s_max * (j + 1) / trials and f ~ U[fig5_f_min, fig5_f_max).
inline Fig5 run_fig5(const DynnModel& dynn, const DynnModel& static_model, const kb::KnowledgeBase& kb,
                     const BenchConfig& bc, const CellConfig& cell) {
  detail::require(bc.fig5_trials >= 1, "run_fig5: need at least one trial");
  Fig5 out;
  out.policies.push_back("static");
  const std::size_t m = dynn.cfg.experts;
  std::vector<std::size_t> fixed(m);
  std::iota(fixed.begin(), fixed.end(), std::size_t{1});
  for (std::size_t k : fixed) out.policies.push_back("K=" + std::to_string(k));
  out.policies.push_back("random");
  out.policies.push_back("knowledge");
  out.totals.assign(out.policies.size(), {});

  Rng trial_rng(derive_seed(bc.seed, 0xf165));
  Rng width_rng(derive_seed(bc.seed, 0xf166));
  const double phi = static_cast<double>(dynn.cfg.expert_cost());
  for (std::size_t j = 0; j < bc.fig5_trials; ++j) {
    const double s_mean = bc.fig5_s_max * static_cast<double>(j + 1) / static_cast<double>(bc.fig5_trials);
    const double f = trial_rng.uniform(bc.fig5_f_min, bc.fig5_f_max);
    const ScenarioBatch batch = delay::sample_scenario_with_mean(trial_rng, cell, s_mean, bc.d_max);
    const std::size_t random_k = 1 + width_rng.index(m);
    out.trial_s_mean.push_back(s_mean);
    out.trial_f.push_back(f);

    auto total = [&](const delay::AllocationVector& a, std::size_t k) {
      return delay::weighted_transmission_delay(batch, a, cell) +
             delay::weighted_computing_delay(batch.w, k, phi, f, cell.alpha);
    };
    std::size_t p = 0;
    out.totals[p++].push_back(total(moe::static_forward(batch, static_model, cell), static_model.cfg.experts));
    std::vector<std::size_t> ks = fixed;
    ks.push_back(random_k);
    const auto allocs = moe::forward_widths(batch, dynn, ks, cell);
    for (std::size_t i = 0; i < ks.size(); ++i) out.totals[p++].push_back(total(allocs[i], ks[i]));
    out.totals[p++].push_back(kb::allocate_on_demand(kb, dynn, batch, f, cell).delay.total);
  }
  for (const auto& series : out.totals) out.summary.push_back(stats::summarize(series));
  return out;
}

}  // namespace dynn::bench
