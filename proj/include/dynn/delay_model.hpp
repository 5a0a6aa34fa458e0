#pragma once

// Physical-layer delay model of a single FDMA downlink cell: per-user
// Shannon rate with bandwidth-proportional noise, weighted transmission
// delay and weighted inference computing delay.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dynn/errors.hpp"
#include "dynn/rng.hpp"

namespace dynn::delay {

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

struct CellConfig {
  double power_w = 0.1;
  double g0 = 1e-4;  // linear, -40 dB
  double d0_m = 1.0;
  double n0_w_per_hz = 1e-17;
  double b_max_hz = 10e6;
  std::size_t n_users = 30;
  double alpha = 1.0;
  std::vector<double> weight_levels{0.8, 0.4, 0.2, 0.1};

  void validate() const {
    detail::require(power_w > 0, "CellConfig: power_w must be > 0");
    detail::require(g0 > 0, "CellConfig: g0 must be > 0");
    detail::require(d0_m > 0, "CellConfig: d0_m must be > 0");
    detail::require(n0_w_per_hz > 0, "CellConfig: n0_w_per_hz must be > 0");
    detail::require(b_max_hz > 0, "CellConfig: b_max_hz must be > 0");
    detail::require(n_users >= 1, "CellConfig: n_users must be >= 1");
    detail::require(alpha > 0, "CellConfig: alpha must be > 0");
    detail::require(!weight_levels.empty(), "CellConfig: weight_levels is empty");
    for (double w : weight_levels) {
      detail::require(w > 0 && std::isfinite(w), "CellConfig: weight levels must be positive");
    }
  }

  // P (d0/d)^2 g0 / N0. The SNR at bandwidth b is this divided by b.
  double snr_numerator(double d) const {
    const double ratio = d0_m / d;
    return power_w * ratio * ratio * g0 / n0_w_per_hz;
  }
};

struct ScenarioBatch {
  std::vector<double> s;  // task sizes, bits
  std::vector<double> w;  // importance weights
  std::vector<double> d;  // distances, m

  std::size_t size() const { return s.size(); }

  double mean_task_size() const {
    return s.empty() ? 0.0 : std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  }

  double weight_sum() const { return std::accumulate(w.begin(), w.end(), 0.0); }

  void validate(const CellConfig& cfg) const {
    detail::require(s.size() == w.size() && s.size() == d.size(),
                    "ScenarioBatch: s, w, d must have identical length");
    detail::require(s.size() == cfg.n_users, "ScenarioBatch: length differs from n_users");
    for (std::size_t i = 0; i < s.size(); ++i) {
      detail::require(s[i] > 0, "ScenarioBatch: task size must be > 0");
      detail::require(d[i] > 0, "ScenarioBatch: distance must be > 0");
      detail::require(std::find(cfg.weight_levels.begin(), cfg.weight_levels.end(), w[i]) !=
                          cfg.weight_levels.end(),
                      "ScenarioBatch: weight is not an admissible level");
    }
  }
};

struct AllocationVector {
  std::vector<double> b;  // Hz

  std::size_t size() const { return b.size(); }
  double total() const { return std::accumulate(b.begin(), b.end(), 0.0); }
};

struct DelayBreakdown {
  double t_tra = 0.0;
  double t_com = 0.0;
  double total = 0.0;

  static DelayBreakdown of(double t_tra, double t_com) { return {t_tra, t_com, t_tra + t_com}; }
};

inline double user_rate(double b, double d, const CellConfig& cfg) {
  if (!(b > 0)) throw DomainError("user_rate: bandwidth must be > 0");
  if (!(d > 0)) throw DomainError("user_rate: distance must be > 0");
  const double snr = cfg.snr_numerator(d) / b;
  return b * std::log2(1.0 + snr);
}

inline double weighted_transmission_delay(const ScenarioBatch& batch, const AllocationVector& alloc,
                                          const CellConfig& cfg) {
  detail::require(batch.s.size() == batch.w.size() && batch.s.size() == batch.d.size(),
                  "weighted_transmission_delay: malformed batch");
  detail::require(alloc.size() == batch.size(),
                  "weighted_transmission_delay: allocation length differs from batch");
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    total += batch.w[i] * batch.s[i] / user_rate(alloc.b[i], batch.d[i], cfg);
  }
  return total;
}

inline double weighted_computing_delay(std::span<const double> w, std::size_t k, double phi,
                                       double f, double alpha) {
  detail::require(k >= 1, "weighted_computing_delay: K must be >= 1");
  detail::require(phi > 0, "weighted_computing_delay: phi must be > 0");
  if (!(f > 0)) throw DomainError("weighted_computing_delay: CPU frequency must be > 0");
  const double weight_sum = std::accumulate(w.begin(), w.end(), 0.0);
  return weight_sum * static_cast<double>(k) * alpha * phi / f;
}

// Lower bound of the sampling intervals, as a fraction of their upper bound.
inline constexpr double kSampleFloor = 1e-6;

// s_i ~ U(s_max*1e-6, s_max], d_i ~ U(d_max*1e-6, d_max], w_i uniform over
// the configured levels.
inline ScenarioBatch sample_scenario(Rng& rng, const CellConfig& cfg, double s_max, double d_max) {
  detail::require(s_max > 0, "sample_scenario: s_max must be > 0");
  detail::require(d_max > 0, "sample_scenario: d_max must be > 0");
  ScenarioBatch batch;
  const std::size_t n = cfg.n_users;
  batch.s.resize(n);
  batch.w.resize(n);
  batch.d.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    batch.s[i] = rng.uniform_open_closed(kSampleFloor * s_max, s_max);
    batch.d[i] = rng.uniform_open_closed(kSampleFloor * d_max, d_max);
    batch.w[i] = cfg.weight_levels[rng.index(cfg.weight_levels.size())];
  }
  return batch;
}

// Scenario whose task sizes have expected mean s_mean: s_i ~ U(0, 2 s_mean].
inline ScenarioBatch sample_scenario_with_mean(Rng& rng, const CellConfig& cfg, double s_mean,
                                               double d_max) {
  return sample_scenario(rng, cfg, 2.0 * s_mean, d_max);
}

inline AllocationVector equal_split(const CellConfig& cfg) {
  return {std::vector<double>(cfg.n_users, cfg.b_max_hz / static_cast<double>(cfg.n_users))};
}

}  // namespace dynn::delay
