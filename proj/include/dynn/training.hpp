#pragma once

// Stage-1 training: the weighted transmission delay of the model's own
// allocation is the loss, and the width K is drawn uniformly from {1..M}
// at every step so that one parameter set serves every width.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dynn/autodiff.hpp"
#include "dynn/delay_model.hpp"
#include "dynn/errors.hpp"
#include "dynn/moe.hpp"
#include "dynn/rng.hpp"

namespace dynn::train {

using delay::CellConfig;
using delay::ScenarioBatch;
using moe::DynnModel;
using moe::ModelConfig;

enum class Optimizer { sgd, adam };

enum class Schedule { constant, cosine };

inline Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return Schedule::constant;
  if (s == "cosine") return Schedule::cosine;
  throw ContractError("unknown learning-rate schedule '" + s + "' (expected constant or cosine)");
}

inline const char* to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }

inline const char* to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw ContractError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

struct TrainConfig {
  std::size_t epochs = 20000;  // optimizer steps
  double lr = 1e-3;
  std::size_t batch_scenarios = 4;
  std::uint64_t seed = 1;
  double s_max = 20e3;  // bits
  double d_max = 500.0;
  // Draw a fresh upper task-size bound U(0, s_max] per scenario so the model
  // sees every mean task size it will later be queried at.
  bool vary_task_scale = true;
  Optimizer optimizer = Optimizer::adam;
  Schedule schedule = Schedule::cosine;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t validation_scenarios = 200;
  double validation_s_mean = 10e3;
  std::vector<std::size_t> validation_widths{1, 2, 5, 10, 20, 30};

  void validate() const {
    detail::require(epochs >= 1, "TrainConfig: epochs must be >= 1");
    detail::require(lr >= 0 && std::isfinite(lr), "TrainConfig: learning rate must be finite and >= 0");
    detail::require(batch_scenarios >= 1, "TrainConfig: batch_scenarios must be >= 1");
    detail::require(s_max > 0 && d_max > 0, "TrainConfig: sampling bounds must be > 0");
  }
};

struct ValidationPoint {
  std::size_t k = 0;
  double t_tra = 0.0;
};

struct TrainReport {
  std::vector<double> loss_trace;  // one mean loss per step
  std::vector<ValidationPoint> validation;
  double seconds = 0.0;
};

// Per-user SNR numerators P (d0/d_i)^2 g0 / N0 as a 1 x N row.
inline ad::Matrix snr_numerators(const ScenarioBatch& batch, const CellConfig& cell) {
  ad::Matrix c(1, batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) c.data[i] = cell.snr_numerator(batch.d[i]);
  return c;
}

// sum_i w_i s_i / (b_i log2(1 + c_i / b_i)) on the tape.
inline ad::Var transmission_delay(ad::Tape& tape, ad::Var bandwidth, const ScenarioBatch& batch,
                                  const CellConfig& cell) {
  ad::Matrix ws(1, batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) ws.data[i] = batch.w[i] * batch.s[i];
  const ad::Var rate = ad::mul(bandwidth, ad::log2_1p_scaled(bandwidth, snr_numerators(batch, cell)));
  return ad::reduce_sum(ad::div(tape.constant(std::move(ws)), rate));
}

inline ad::Var loss(ad::Tape& tape, const ScenarioBatch& batch, DynnModel& model, std::size_t k,
                    const CellConfig& cell) {
  const moe::TapedForward fwd = moe::forward_taped(tape, batch, model, k, cell);
  return transmission_delay(tape, fwd.bandwidth, batch, cell);
}

inline double loss_value(const ScenarioBatch& batch, DynnModel& model, std::size_t k, const CellConfig& cell) {
  ad::Tape tape;
  return loss(tape, batch, model, k, cell).scalar();
}

class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void set_lr(double lr) { lr_ = lr; }

  void step(std::vector<ad::Tensor*> params) {
    for (ad::Tensor* p : params) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value.data[i] -= lr_ * p->grad.data[i];
    }
  }

 private:
  double lr_;
};

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  void set_lr(double lr) { lr_ = lr; }

  void step(std::vector<ad::Tensor*> params) {
    if (m_.empty()) {
      for (ad::Tensor* p : params) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      ad::Tensor* p = params[k];
      if (!p->requires_grad) continue;
      double* value = p->value.data.data();
      const double* grad = p->grad.data.data();
      double* m = m_[k].data();
      double* v = v_[k].data();
      const std::size_t n = p->value.size();
      for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i];
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        // Moments of entries that stopped receiving gradient decay towards
        // subnormals, which are very slow on x86.
        if (std::abs(m[i]) < kFlush) m[i] = 0.0;
        if (v[i] < kFlush) v[i] = 0.0;
      }
    }
  }

 private:
  static constexpr double kFlush = 1e-250;

  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Frozen set of scenarios with expected mean task size s_mean.
inline std::vector<ScenarioBatch> scenario_set(std::uint64_t seed, std::size_t n, const CellConfig& cell,
                                               double s_mean, double d_max) {
  Rng rng(seed);
  std::vector<ScenarioBatch> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(delay::sample_scenario_with_mean(rng, cell, s_mean, d_max));
  return out;
}

// Mean weighted transmission delay at width K over a scenario set.
inline double validate(const DynnModel& model, std::size_t k, const std::vector<ScenarioBatch>& scenarios,
                       const CellConfig& cell) {
  detail::require(!scenarios.empty(), "validate: empty scenario set");
  double total = 0.0;
  for (const ScenarioBatch& b : scenarios) {
    total += delay::weighted_transmission_delay(b, moe::forward(b, model, k, cell), cell);
  }
  return total / static_cast<double>(scenarios.size());
}

inline ScenarioBatch sample_training_scenario(Rng& rng, const TrainConfig& tc, const CellConfig& cell) {
  const double s_upper = tc.vary_task_scale ? rng.uniform_open_closed(delay::kSampleFloor * tc.s_max, tc.s_max)
                                            : tc.s_max;
  return delay::sample_scenario(rng, cell, s_upper, tc.d_max);
}

// Runs `tc.epochs` optimizer steps on `model` in place.
inline TrainReport fit(DynnModel& model, const TrainConfig& tc, const CellConfig& cell) {
  tc.validate();
  cell.validate();
  model.cfg.validate_against(cell);
  const auto started = std::chrono::steady_clock::now();

  Rng rng(tc.seed);
  Sgd sgd(tc.lr);
  Adam adam(tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
  TrainReport report;
  report.loss_trace.reserve(tc.epochs);
  const auto params = model.parameters();
  const double inv_batch = 1.0 / static_cast<double>(tc.batch_scenarios);

  for (std::size_t step = 0; step < tc.epochs; ++step) {
    const std::size_t k = 1 + rng.index(model.cfg.experts);
    model.zero_grad();
    double step_loss = 0.0;
    for (std::size_t b = 0; b < tc.batch_scenarios; ++b) {
      const ScenarioBatch batch = sample_training_scenario(rng, tc, cell);
      try {
        ad::Tape tape;
        const ad::Var l = ad::scale(loss(tape, batch, model, k, cell), inv_batch);
        tape.backward(l);
        step_loss += l.scalar();
      } catch (const NumericError& e) {
        throw TrainingError("training diverged at step " + std::to_string(step) + " with K=" +
                            std::to_string(k) + ": " + e.what());
      }
    }
    if (tc.schedule == Schedule::cosine) {
      const double progress = static_cast<double>(step) / static_cast<double>(tc.epochs);
      const double lr = 0.5 * tc.lr * (1.0 + std::cos(std::numbers::pi * progress));
      sgd.set_lr(lr);
      adam.set_lr(lr);
    }
    if (tc.optimizer == Optimizer::sgd) {
      sgd.step(params);
    } else {
      adam.step(params);
    }
    report.loss_trace.push_back(step_loss);
  }

  if (tc.validation_scenarios > 0) {
    const auto held_out = scenario_set(derive_seed(tc.seed, 0x7661), tc.validation_scenarios, cell,
                                       tc.validation_s_mean, tc.d_max);
    for (std::size_t k : tc.validation_widths) {
      if (k >= 1 && k <= model.cfg.experts) report.validation.push_back({k, validate(model, k, held_out, cell)});
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

inline std::pair<DynnModel, TrainReport> train_stage1(const TrainConfig& tc, const ModelConfig& mc,
                                                      const CellConfig& cell) {
  Rng init_rng(derive_seed(tc.seed, 0x1417));
  DynnModel model = DynnModel::init(mc, init_rng);
  TrainReport report = fit(model, tc, cell);
  return {std::move(model), std::move(report)};
}

}  // namespace dynn::train
