#pragma once

// Width selection. An offline sweep measures, for every cell of a
// (mean task size, CPU frequency) grid, the mean total delay of each width K
// and keeps the argmin; at run time the nearest cell answers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dynn/checkpoint.hpp"
#include "dynn/delay_model.hpp"
#include "dynn/errors.hpp"
#include "dynn/moe.hpp"
#include "dynn/rng.hpp"

namespace dynn::kb {

using delay::AllocationVector;
using delay::CellConfig;
using delay::DelayBreakdown;
using delay::ScenarioBatch;
using moe::DynnModel;

struct EvalConfig {
  std::size_t scenarios = 1000;  // per grid cell
  std::uint64_t seed = 2024;
  double d_max = 500.0;
};

struct Provenance {
  std::string checkpoint;  // model fingerprint
  std::size_t scenarios = 0;
  std::uint64_t seed = 0;
  double d_max = 500.0;

  bool operator==(const Provenance&) const = default;
};

struct KnowledgeBase {
  std::vector<double> s_grid;  // bits, ascending
  std::vector<double> f_grid;  // Hz, ascending
  std::vector<std::size_t> k_star;  // |s_grid| x |f_grid|, s-major
  std::size_t max_k = 0;
  Provenance provenance;

  std::size_t at(std::size_t si, std::size_t fi) const { return k_star[si * f_grid.size() + fi]; }
  std::size_t cell_index(std::size_t si, std::size_t fi) const { return si * f_grid.size() + fi; }
  bool empty() const { return k_star.empty(); }

  void validate() const {
    auto ascending = [](const std::vector<double>& g) {
      return std::adjacent_find(g.begin(), g.end(), [](double a, double b) { return !(a < b); }) == g.end();
    };
    detail::require(!s_grid.empty() && !f_grid.empty(), "KnowledgeBase: empty grid");
    detail::require(ascending(s_grid) && ascending(f_grid), "KnowledgeBase: grids must be strictly ascending");
    detail::require(k_star.size() == s_grid.size() * f_grid.size(), "KnowledgeBase: table shape mismatch");
    for (std::size_t k : k_star)
      detail::require(k >= 1 && k <= max_k, "KnowledgeBase: stored K outside [1, M]");
  }

  bool operator==(const KnowledgeBase&) const = default;
};

struct ServiceContext {
  double s_mean = 0.0;  // bits
  double f = 0.0;       // Hz
};

// Frozen evaluation scenarios of one grid cell. The seed is the base seed
// XOR the cell index, so any cell can be rebuilt on its own.
inline std::vector<ScenarioBatch> cell_scenarios(const Provenance& prov, std::size_t cell_index, double s_mean,
                                                 const CellConfig& cell) {
  Rng rng(prov.seed ^ static_cast<std::uint64_t>(cell_index));
  std::vector<ScenarioBatch> out;
  out.reserve(prov.scenarios);
  for (std::size_t i = 0; i < prov.scenarios; ++i)
    out.push_back(delay::sample_scenario_with_mean(rng, cell, s_mean, prov.d_max));
  return out;
}

inline double mean_computing_delay(const DynnModel& model, std::size_t k, const std::vector<ScenarioBatch>& set,
                                   double f, const CellConfig& cell) {
  const double phi = static_cast<double>(model.cfg.expert_cost());
  double total = 0.0;
  for (const ScenarioBatch& b : set) total += delay::weighted_computing_delay(b.w, k, phi, f, cell.alpha);
  return total / static_cast<double>(set.size());
}

// Mean over the set of T_tra(forward at K) and of T_com(K, f).
inline DelayBreakdown total_delay_at_k(const DynnModel& model, std::size_t k, const std::vector<ScenarioBatch>& set,
                                       double f, const CellConfig& cell) {
  detail::require(!set.empty(), "total_delay_at_k: empty scenario set");
  detail::require(k >= 1 && k <= model.cfg.experts, "total_delay_at_k: K out of range [1, M]");
  if (!(f > 0)) throw DomainError("total_delay_at_k: CPU frequency must be > 0");
  double t_tra = 0.0;
  for (const ScenarioBatch& b : set) t_tra += delay::weighted_transmission_delay(b, moe::forward(b, model, k, cell), cell);
  t_tra /= static_cast<double>(set.size());
  return DelayBreakdown::of(t_tra, mean_computing_delay(model, k, set, f, cell));
}

// Mean T_tra for every width 1..M on one scenario set. Each scenario's
// experts are evaluated once and reused across widths; the per-width values
// equal those of total_delay_at_k bit for bit.
struct WidthSweep {
  std::vector<double> t_tra;  // index K-1
  double mean_weight_sum = 0.0;

  std::size_t max_k() const { return t_tra.size(); }
};

inline WidthSweep sweep_widths(const DynnModel& model, const std::vector<ScenarioBatch>& set,
                               const CellConfig& cell) {
  detail::require(!set.empty(), "sweep_widths: empty scenario set");
  const std::size_t m = model.cfg.experts;
  std::vector<std::size_t> ks(m);
  std::iota(ks.begin(), ks.end(), std::size_t{1});
  WidthSweep sweep;
  sweep.t_tra.assign(m, 0.0);
  for (const ScenarioBatch& b : set) {
    const auto allocs = moe::forward_widths(b, model, ks, cell);
    for (std::size_t i = 0; i < m; ++i) sweep.t_tra[i] += delay::weighted_transmission_delay(b, allocs[i], cell);
    sweep.mean_weight_sum += b.weight_sum();
  }
  for (double& t : sweep.t_tra) t /= static_cast<double>(set.size());
  sweep.mean_weight_sum /= static_cast<double>(set.size());
  return sweep;
}

// Smallest K minimizing total delay, given per-width breakdowns.
inline std::size_t argmin_width(const std::vector<DelayBreakdown>& per_k) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < per_k.size(); ++i)
    if (per_k[i].total < per_k[best].total) best = i;
  return best + 1;
}

inline std::vector<DelayBreakdown> breakdowns(const DynnModel& model, const WidthSweep& sweep,
                                              const std::vector<ScenarioBatch>& set, double f,
                                              const CellConfig& cell) {
  std::vector<DelayBreakdown> out;
  out.reserve(sweep.max_k());
  for (std::size_t k = 1; k <= sweep.max_k(); ++k)
    out.push_back(DelayBreakdown::of(sweep.t_tra[k - 1], mean_computing_delay(model, k, set, f, cell)));
  return out;
}

// Default grids: mean task size 1..10 kb, 20 log-spaced frequencies over
// [20 MHz, 2 GHz].
inline std::vector<double> default_s_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 10; ++i) g.push_back(1e3 * i);
  return g;
}

inline std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  detail::require(n >= 1 && lo > 0 && hi >= lo, "log_grid: invalid range");
  if (n == 1) return {lo};
  std::vector<double> g(n);
  const double step = std::log(hi / lo) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) g[i] = lo * std::exp(step * static_cast<double>(i));
  g.front() = lo;
  g.back() = hi;
  return g;
}

inline std::vector<double> default_f_grid() { return log_grid(20e6, 2e9, 20); }

inline KnowledgeBase build_kb(const DynnModel& model, std::vector<double> s_grid, std::vector<double> f_grid,
                              const EvalConfig& eval, const CellConfig& cell) {
  KnowledgeBase kb;
  kb.s_grid = std::move(s_grid);
  kb.f_grid = std::move(f_grid);
  kb.max_k = model.cfg.experts;
  kb.provenance = {moe::fingerprint(model), eval.scenarios, eval.seed, eval.d_max};
  kb.k_star.assign(kb.s_grid.size() * kb.f_grid.size(), 0);
  detail::require(eval.scenarios >= 1, "build_kb: need at least one scenario per cell");
  for (std::size_t si = 0; si < kb.s_grid.size(); ++si) {
    for (std::size_t fi = 0; fi < kb.f_grid.size(); ++fi) {
      const std::size_t idx = kb.cell_index(si, fi);
      const auto set = cell_scenarios(kb.provenance, idx, kb.s_grid[si], cell);
      const WidthSweep sweep = sweep_widths(model, set, cell);
      kb.k_star[idx] = argmin_width(breakdowns(model, sweep, set, kb.f_grid[fi], cell));
    }
  }
  kb.validate();
  return kb;
}

struct CellMismatch {
  std::size_t s_index = 0;
  std::size_t f_index = 0;
  std::size_t stored = 0;
  std::size_t recomputed = 0;
};

// Brute-force re-check: rebuilds each cell's scenarios from the provenance
// and re-evaluates total_delay_at_k for every K with a full forward per K.
inline std::vector<CellMismatch> verify_kb(const KnowledgeBase& kb, const DynnModel& model, const CellConfig& cell) {
  std::vector<CellMismatch> bad;
  for (std::size_t si = 0; si < kb.s_grid.size(); ++si) {
    for (std::size_t fi = 0; fi < kb.f_grid.size(); ++fi) {
      const auto set = cell_scenarios(kb.provenance, kb.cell_index(si, fi), kb.s_grid[si], cell);
      std::vector<DelayBreakdown> per_k;
      for (std::size_t k = 1; k <= model.cfg.experts; ++k)
        per_k.push_back(total_delay_at_k(model, k, set, kb.f_grid[fi], cell));
      const std::size_t k = argmin_width(per_k);
      if (k != kb.at(si, fi)) bad.push_back({si, fi, kb.at(si, fi), k});
    }
  }
  return bad;
}

namespace detail_kb {

// Index of the grid point nearest to v; ties go to the lower index and
// values outside the grid clamp to its ends.
inline std::size_t nearest(const std::vector<double>& grid, double v) {
  const auto it = std::lower_bound(grid.begin(), grid.end(), v);
  if (it == grid.begin()) return 0;
  if (it == grid.end()) return grid.size() - 1;
  const std::size_t hi = static_cast<std::size_t>(it - grid.begin());
  const std::size_t lo = hi - 1;
  return (v - grid[lo]) <= (grid[hi] - v) ? lo : hi;
}

}  // namespace detail_kb

inline std::size_t lookup(const KnowledgeBase& kb, const ServiceContext& ctx) {
  detail::require(!kb.empty(), "lookup: empty knowledge base");
  return kb.at(detail_kb::nearest(kb.s_grid, ctx.s_mean), detail_kb::nearest(kb.f_grid, ctx.f));
}

struct OnDemandResult {
  AllocationVector alloc;
  std::size_t k = 0;
  DelayBreakdown delay;
};

inline OnDemandResult allocate_on_demand(const KnowledgeBase& kb, const DynnModel& model, const ScenarioBatch& batch,
                                         double f, const CellConfig& cell) {
  detail::require(kb.max_k == model.cfg.experts, "allocate_on_demand: knowledge base built for a different M");
  OnDemandResult r;
  r.k = lookup(kb, {batch.mean_task_size(), f});
  r.alloc = moe::forward(batch, model, r.k, cell);
  r.delay = DelayBreakdown::of(
      delay::weighted_transmission_delay(batch, r.alloc, cell),
      delay::weighted_computing_delay(batch.w, r.k, static_cast<double>(model.cfg.expert_cost()), f, cell.alpha));
  return r;
}

// ---- text format ----------------------------------------------------------

namespace detail_kb {

inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail_kb

inline constexpr const char* kKbHeader = "# dynn knowledge base v1";
inline constexpr const char* kKbColumns = "s_bits,f_hz,k";

inline std::string to_text(const KnowledgeBase& kb) {
  std::ostringstream out;
  out << kKbHeader << '\n';
  out << "checkpoint " << kb.provenance.checkpoint << '\n';
  out << "scenarios " << kb.provenance.scenarios << '\n';
  out << "seed " << kb.provenance.seed << '\n';
  out << "d_max " << detail_kb::num(kb.provenance.d_max) << '\n';
  out << "max_k " << kb.max_k << '\n';
  out << "s_grid " << kb.s_grid.size();
  for (double v : kb.s_grid) out << ' ' << detail_kb::num(v);
  out << '\n' << "f_grid " << kb.f_grid.size();
  for (double v : kb.f_grid) out << ' ' << detail_kb::num(v);
  out << '\n' << kKbColumns << '\n';
  for (std::size_t si = 0; si < kb.s_grid.size(); ++si)
    for (std::size_t fi = 0; fi < kb.f_grid.size(); ++fi)
      out << detail_kb::num(kb.s_grid[si]) << ',' << detail_kb::num(kb.f_grid[fi]) << ',' << kb.at(si, fi) << '\n';
  return out.str();
}

inline KnowledgeBase from_text(const std::string& text) {
  std::istringstream in(text);
  in.imbue(std::locale::classic());
  std::string line;
  auto fail = [](const std::string& why) -> IoError { return IoError("knowledge base: " + why); };
  if (!std::getline(in, line) || line != kKbHeader) throw fail("missing header line");

  KnowledgeBase kb;
  auto read_grid = [&](std::istringstream& ls, std::vector<double>& grid) {
    std::size_t n = 0;
    if (!(ls >> n)) throw fail("bad grid size");
    grid.resize(n);
    for (double& v : grid)
      if (!(ls >> v)) throw fail("bad grid value");
  };
  bool have_columns = false;
  while (std::getline(in, line)) {
    if (line == kKbColumns) {
      have_columns = true;
      break;
    }
    std::istringstream ls(line);
    ls.imbue(std::locale::classic());
    std::string key;
    ls >> key;
    if (key == "checkpoint") {
      ls >> kb.provenance.checkpoint;
    } else if (key == "scenarios") {
      ls >> kb.provenance.scenarios;
    } else if (key == "seed") {
      ls >> kb.provenance.seed;
    } else if (key == "d_max") {
      ls >> kb.provenance.d_max;
    } else if (key == "max_k") {
      ls >> kb.max_k;
    } else if (key == "s_grid") {
      read_grid(ls, kb.s_grid);
    } else if (key == "f_grid") {
      read_grid(ls, kb.f_grid);
    } else {
      throw fail("unknown header key '" + key + "'");
    }
    if (ls.fail()) throw fail("bad value for '" + key + "'");
  }
  if (!have_columns) throw fail("missing column line");
  kb.k_star.assign(kb.s_grid.size() * kb.f_grid.size(), 0);
  for (std::size_t si = 0; si < kb.s_grid.size(); ++si) {
    for (std::size_t fi = 0; fi < kb.f_grid.size(); ++fi) {
      if (!std::getline(in, line)) throw fail("truncated table");
      std::istringstream ls(line);
      ls.imbue(std::locale::classic());
      double s = 0, f = 0;
      std::size_t k = 0;
      char c1 = 0, c2 = 0;
      if (!(ls >> s >> c1 >> f >> c2 >> k) || c1 != ',' || c2 != ',') throw fail("bad row '" + line + "'");
      if (s != kb.s_grid[si] || f != kb.f_grid[fi]) throw fail("row out of grid order: '" + line + "'");
      kb.k_star[kb.cell_index(si, fi)] = k;
    }
  }
  while (std::getline(in, line))
    if (!line.empty()) throw fail("trailing content");
  try {
    kb.validate();
  } catch (const ContractError& e) {
    throw fail(e.what());
  }
  return kb;
}

inline void save_kb(const KnowledgeBase& kb, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << to_text(kb);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline KnowledgeBase load_kb(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return from_text(ss.str());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace dynn::kb
