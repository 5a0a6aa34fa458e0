#pragma once

// Variable-width mixture-of-experts bandwidth allocator.
//
//   features x (3N) -> shared input layer (Linear + ReLU) -> h
//   gate:    Softmax(TopK(h W_g, K))              (K weights, others zero)
//   experts: E_j(h) = LogSoftmax(Linear(ReLU(Linear(h))))
//   output:  b = b_max * Softmax(sum_j gate_j E_j(h))
//
// Only the K selected experts are evaluated. Selected experts are always
// combined in ascending index order, which makes the sparse sum identical to
// the dense sum over all M experts (the skipped terms are exact zeros).
//
// The same kernels back both the taped (training) and the plain (inference)
// forward, so the two produce bit-identical allocations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dynn/autodiff.hpp"
#include "dynn/delay_model.hpp"
#include "dynn/errors.hpp"
#include "dynn/rng.hpp"

namespace dynn::moe {

using ad::Matrix;
using ad::Tensor;
using delay::AllocationVector;
using delay::CellConfig;
using delay::ScenarioBatch;

struct ModelConfig {
  std::size_t experts = 30;  // M
  std::size_t n_users = 30;
  std::size_t embed_dim = 38;
  std::size_t expert_hidden = 32;
  std::size_t expert_out = 30;
  double s_norm = 20e3;  // bits; task sizes are divided by this
  double d_norm = 500.0;  // meters
  // false: gate-free static network combining all experts with weight 1/M.
  bool gated = true;

  std::size_t input_dim() const { return 3 * n_users; }

  // Multiply-accumulates of one expert: sum over adjacent layer widths.
  std::size_t expert_cost() const { return embed_dim * expert_hidden + expert_hidden * expert_out; }

  void validate() const {
    detail::require(experts >= 1, "ModelConfig: experts must be >= 1");
    detail::require(n_users >= 1 && embed_dim >= 1 && expert_hidden >= 1 && expert_out >= 1,
                    "ModelConfig: all layer sizes must be >= 1");
    detail::require(expert_out == n_users, "ModelConfig: expert_out must equal n_users");
    detail::require(s_norm > 0 && d_norm > 0, "ModelConfig: feature normalizers must be > 0");
  }

  void validate_against(const CellConfig& cell) const {
    validate();
    detail::require(n_users == cell.n_users, "ModelConfig: n_users differs from the cell config");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Number of multiply-accumulates for a forward pass at width K. The gate
// and the shared input layer are not counted.
inline std::size_t macc(const ModelConfig& cfg, std::size_t k) {
  detail::require(k >= 1 && k <= cfg.experts, "macc: K out of range [1, M]");
  return k * cfg.expert_cost();
}

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    Matrix w(in, out), b(1, out);
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    for (double& v : b.data) v = rng.uniform(-bound, bound);
    l.weight = Tensor(std::move(w));
    l.bias = Tensor(std::move(b));
    return l;
  }

  Matrix apply(const Matrix& x) const {
    return ad::kernels::add_bias(ad::kernels::matmul(x, weight.value), bias.value);
  }

  ad::Var apply(ad::Tape& tape, ad::Var x) {
    return ad::add_bias(ad::matmul(x, tape.leaf(weight)), tape.leaf(bias));
  }
};

struct Expert {
  Linear hidden;
  Linear out;
};

struct DynnModel {
  ModelConfig cfg;
  Linear input;
  Tensor gate;  // embed_dim x M, no bias
  std::vector<Expert> experts;

  static DynnModel init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    DynnModel m;
    m.cfg = cfg;
    m.input = Linear::init(cfg.input_dim(), cfg.embed_dim, rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    Matrix g(cfg.embed_dim, cfg.experts);
    for (double& v : g.data) v = rng.uniform(-bound, bound);
    m.gate = Tensor(std::move(g), cfg.gated);
    m.experts.reserve(cfg.experts);
    for (std::size_t j = 0; j < cfg.experts; ++j) {
      Expert e;
      e.hidden = Linear::init(cfg.embed_dim, cfg.expert_hidden, rng);
      e.out = Linear::init(cfg.expert_hidden, cfg.expert_out, rng);
      m.experts.push_back(std::move(e));
    }
    return m;
  }

  // Stable order: input, gate, then experts in index order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps{&input.weight, &input.bias, &gate};
    for (Expert& e : experts) {
      ps.push_back(&e.hidden.weight);
      ps.push_back(&e.hidden.bias);
      ps.push_back(&e.out.weight);
      ps.push_back(&e.out.bias);
    }
    return ps;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> ps;
    for (Tensor* t : const_cast<DynnModel*>(this)->parameters()) ps.push_back(t);
    return ps;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names{"input.weight", "input.bias", "gate.weight"};
    for (std::size_t j = 0; j < experts.size(); ++j) {
      const std::string p = "expert." + std::to_string(j) + ".";
      for (const char* s : {"hidden.weight", "hidden.bias", "out.weight", "out.bias"}) names.push_back(p + s);
    }
    return names;
  }

  void zero_grad() {
    for (Tensor* t : parameters()) t->zero_grad();
  }
};

// [w, s / s_norm, d / d_norm], length 3N.
inline std::vector<double> featurize(const ScenarioBatch& batch, const ModelConfig& cfg) {
  detail::require(batch.s.size() == cfg.n_users && batch.w.size() == cfg.n_users &&
                      batch.d.size() == cfg.n_users,
                  "featurize: batch length differs from n_users");
  std::vector<double> x;
  x.reserve(cfg.input_dim());
  x.insert(x.end(), batch.w.begin(), batch.w.end());
  for (double s : batch.s) x.push_back(s / cfg.s_norm);
  for (double d : batch.d) x.push_back(d / cfg.d_norm);
  return x;
}

// Indices of the k largest entries; ties go to the lower index. The result
// is in ascending index order.
inline std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
  detail::require(k >= 1 && k <= v.size(), "top_k: k out of range [1, M]");
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

// Keeps the top k entries of v and sets the rest to -inf.
inline std::vector<double> top_k(std::span<const double> v, std::size_t k) {
  std::vector<double> out(v.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i : top_k_indices(v, k)) out[i] = v[i];
  return out;
}

struct GateDecision {
  std::vector<std::size_t> selected;  // ascending
  std::vector<double> weights;        // aligned with selected

  std::size_t k() const { return selected.size(); }

  // Weight of every expert, zero for unselected ones.
  std::vector<double> dense(std::size_t m) const {
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < selected.size(); ++i) out[selected[i]] = weights[i];
    return out;
  }

  static GateDecision uniform(std::size_t m) {
    GateDecision g;
    g.selected.resize(m);
    std::iota(g.selected.begin(), g.selected.end(), std::size_t{0});
    g.weights.assign(m, 1.0 / static_cast<double>(m));
    return g;
  }
};

inline Matrix embed(const DynnModel& model, std::span<const double> features) {
  detail::require(features.size() == model.cfg.input_dim(), "embed: feature length mismatch");
  return ad::kernels::relu(model.input.apply(Matrix::row({features.begin(), features.end()})));
}

inline Matrix gate_logits(const DynnModel& model, const Matrix& embedded) {
  return ad::kernels::matmul(embedded, model.gate.value);
}

inline GateDecision gate_from_logits(const Matrix& logits, std::size_t k) {
  GateDecision g;
  g.selected = top_k_indices(logits.data, k);
  g.weights = ad::kernels::softmax_rows(ad::kernels::select_cols(logits, g.selected)).data;
  return g;
}

// Softmax(TopK(h W_g, K)).
inline GateDecision gate(const Matrix& embedded, const DynnModel& model, std::size_t k) {
  detail::require(k >= 1 && k <= model.cfg.experts, "gate: K out of range [1, M]");
  return gate_from_logits(gate_logits(model, embedded), k);
}

inline Matrix expert_output(const DynnModel& model, std::size_t j, const Matrix& embedded) {
  const Expert& e = model.experts.at(j);
  return ad::kernels::log_softmax_rows(e.out.apply(ad::kernels::relu(e.hidden.apply(embedded))));
}

// sum_j weights_j * outputs_j, as (1 x K) * (K x N).
inline Matrix combine(std::span<const double> weights, std::span<const Matrix* const> outputs) {
  detail::require(weights.size() == outputs.size(), "combine: weight/output count mismatch");
  return ad::kernels::matmul(Matrix::row({weights.begin(), weights.end()}), ad::kernels::concat_rows(outputs));
}

inline AllocationVector to_allocation(const Matrix& combined, const CellConfig& cell) {
  return {ad::kernels::scale(ad::kernels::softmax_rows(combined), cell.b_max_hz).data};
}

// Allocation from precomputed expert outputs (indexed by expert id) under a
// given gate decision.
inline AllocationVector allocate_with(const GateDecision& g, std::span<const Matrix> outputs,
                                      const CellConfig& cell) {
  std::vector<const Matrix*> picked;
  picked.reserve(g.k());
  for (std::size_t j : g.selected) picked.push_back(&outputs[j]);
  return to_allocation(combine(g.weights, picked), cell);
}

struct ForwardTrace {
  GateDecision gate;
  AllocationVector alloc;
};

inline ForwardTrace forward_traced(const ScenarioBatch& batch, const DynnModel& model, std::size_t k,
                                   const CellConfig& cell) {
  model.cfg.validate_against(cell);
  detail::require(k >= 1 && k <= model.cfg.experts, "forward: K out of range [1, M]");
  const Matrix h = embed(model, featurize(batch, model.cfg));
  ForwardTrace t;
  t.gate = model.cfg.gated ? gate(h, model, k) : GateDecision::uniform(model.cfg.experts);
  std::vector<Matrix> outputs(model.cfg.experts);
  for (std::size_t j : t.gate.selected) outputs[j] = expert_output(model, j, h);
  t.alloc = allocate_with(t.gate, outputs, cell);
  return t;
}

// Allocation at width K. Only the K selected experts are evaluated.
inline AllocationVector forward(const ScenarioBatch& batch, const DynnModel& model, std::size_t k,
                                const CellConfig& cell) {
  return forward_traced(batch, model, k, cell).alloc;
}

// Gate-free baseline: every expert with weight 1/M.
inline AllocationVector static_forward(const ScenarioBatch& batch, const DynnModel& model,
                                       const CellConfig& cell) {
  model.cfg.validate_against(cell);
  const Matrix h = embed(model, featurize(batch, model.cfg));
  std::vector<Matrix> outputs(model.cfg.experts);
  for (std::size_t j = 0; j < model.cfg.experts; ++j) outputs[j] = expert_output(model, j, h);
  return allocate_with(GateDecision::uniform(model.cfg.experts), outputs, cell);
}

// Allocations for several widths of one scenario, sharing the embedding and
// expert evaluations. Entry i matches forward(batch, model, ks[i], cell) bit
// for bit.
inline std::vector<AllocationVector> forward_widths(const ScenarioBatch& batch, const DynnModel& model,
                                                    std::span<const std::size_t> ks, const CellConfig& cell) {
  model.cfg.validate_against(cell);
  const Matrix h = embed(model, featurize(batch, model.cfg));
  std::vector<AllocationVector> result;
  result.reserve(ks.size());
  if (!model.cfg.gated) {
    std::vector<Matrix> outputs(model.cfg.experts);
    for (std::size_t j = 0; j < model.cfg.experts; ++j) outputs[j] = expert_output(model, j, h);
    const AllocationVector a = allocate_with(GateDecision::uniform(model.cfg.experts), outputs, cell);
    result.assign(ks.size(), a);
    return result;
  }
  const Matrix logits = gate_logits(model, h);
  std::vector<Matrix> outputs(model.cfg.experts);
  std::vector<bool> ready(model.cfg.experts, false);
  for (std::size_t k : ks) {
    detail::require(k >= 1 && k <= model.cfg.experts, "forward: K out of range [1, M]");
    const GateDecision g = gate_from_logits(logits, k);
    for (std::size_t j : g.selected) {
      if (!ready[j]) {
        outputs[j] = expert_output(model, j, h);
        ready[j] = true;
      }
    }
    result.push_back(allocate_with(g, outputs, cell));
  }
  return result;
}

struct TapedForward {
  ad::Var bandwidth;  // 1 x N
  GateDecision gate;
};

// Differentiable forward. Gradients reach the input layer, the gate columns
// of the selected experts and the selected experts only.
inline TapedForward forward_taped(ad::Tape& tape, const ScenarioBatch& batch, DynnModel& model, std::size_t k,
                                  const CellConfig& cell) {
  model.cfg.validate_against(cell);
  detail::require(k >= 1 && k <= model.cfg.experts, "forward: K out of range [1, M]");
  const ad::Var x = tape.constant(Matrix::row(featurize(batch, model.cfg)));
  const ad::Var h = ad::relu(model.input.apply(tape, x));

  TapedForward out;
  ad::Var weights;
  if (model.cfg.gated) {
    const ad::Var logits = ad::matmul(h, tape.leaf(model.gate));
    out.gate.selected = top_k_indices(logits.value().data, k);
    weights = ad::softmax_rows(ad::select_cols(logits, out.gate.selected));
    out.gate.weights = weights.value().data;
  } else {
    out.gate = GateDecision::uniform(model.cfg.experts);
    weights = tape.constant(Matrix::row(out.gate.weights));
  }

  std::vector<ad::Var> outputs;
  outputs.reserve(out.gate.k());
  for (std::size_t j : out.gate.selected) {
    Expert& e = model.experts[j];
    outputs.push_back(ad::log_softmax_rows(e.out.apply(tape, ad::relu(e.hidden.apply(tape, h)))));
  }
  const ad::Var combined = ad::matmul(weights, ad::concat_rows(outputs));
  out.bandwidth = ad::scale(ad::softmax_rows(combined), cell.b_max_hz);
  return out;
}

}  // namespace dynn::moe
