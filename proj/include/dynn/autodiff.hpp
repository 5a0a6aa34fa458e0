#pragma once

// Define-by-run reverse-mode automatic differentiation over dense,
// row-major double matrices.
//
// A Tape records every primitive application in creation order, which is a
// topological order of the computation. Parameters live outside the tape as
// Tensors; Tape::leaf() links one into the graph and Tape::backward() adds
// d(loss)/d(param) into Tensor::grad. Calling backward() twice accumulates
// twice; call Tensor::zero_grad() between steps.
//
// Forward values are produced by the functions in ad::kernels, which are
// also used directly by the tape-free inference path in moe.hpp, so both
// paths give bit-identical values.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dynn/errors.hpp"
#include "dynn/rng.hpp"

namespace dynn::ad {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    detail::require(data.size() == r * c, "Matrix: data length differs from rows*cols");
  }

  static Matrix row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Matrix(1, n, std::move(values));
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Matrix& o) const = default;
};

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](double v) { return std::isfinite(v); });
}

namespace kernels {

inline void check_finite(const Matrix& m, const char* op) {
  if (!all_finite(m)) throw NumericError(std::string("autodiff: non-finite value in ") + op);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require(a.cols == b.rows, "matmul: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = a(i, k);
      const double* brow = &b.data[k * b.cols];
      double* orow = &out.data[i * out.cols];
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline Matrix add_bias(const Matrix& x, const Matrix& bias) {
  detail::require(bias.rows == 1 && bias.cols == x.cols, "add_bias: bias must be 1 x cols");
  Matrix out = x;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) += bias.data[j];
  return out;
}

inline Matrix relu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Matrix log_softmax_rows(const Matrix& x) {
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < x.cols; ++j) mx = std::max(mx, x(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) sum += std::exp(x(i, j) - mx);
    const double lse = std::log(sum);
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = x(i, j) - mx - lse;
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& x) {
  Matrix out = log_softmax_rows(x);
  for (double& v : out.data) v = std::exp(v);
  return out;
}

inline Matrix exp(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data) v = std::exp(v);
  return out;
}

// log2(1 + c / x), elementwise.
inline Matrix log2_1p_scaled(const Matrix& x, const Matrix& c) {
  detail::require(x.same_shape(c), "log2_1p_scaled: shape mismatch");
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = std::log2(1.0 + c.data[i] / x.data[i]);
  return out;
}

inline Matrix mul(const Matrix& a, const Matrix& b) {
  detail::require(a.same_shape(b), "mul: shape mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

inline Matrix div(const Matrix& a, const Matrix& b) {
  detail::require(a.same_shape(b), "div: shape mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] /= b.data[i];
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  detail::require(a.same_shape(b), "add: shape mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data) v *= s;
  return out;
}

inline double sum(const Matrix& a) {
  double total = 0.0;
  for (double v : a.data) total += v;
  return total;
}

inline Matrix select_cols(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(x.rows, idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    detail::require(idx[j] < x.cols, "select_cols: index out of range");
    for (std::size_t i = 0; i < x.rows; ++i) out(i, j) = x(i, idx[j]);
  }
  return out;
}

inline Matrix concat_rows(std::span<const Matrix* const> parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts.front()->cols;
  std::size_t rows = 0;
  for (const Matrix* p : parts) {
    detail::require(p->cols == cols, "concat_rows: column counts differ");
    rows += p->rows;
  }
  Matrix out(rows, cols);
  auto it = out.data.begin();
  for (const Matrix* p : parts) it = std::copy(p->data.begin(), p->data.end(), it);
  return out;
}

}  // namespace kernels

// Trainable (or frozen) array that can be linked into a tape.
struct Tensor {
  Matrix value;
  Matrix grad;
  bool requires_grad = true;

  Tensor() = default;
  explicit Tensor(Matrix v, bool trainable = true)
      : value(std::move(v)), grad(value.rows, value.cols), requires_grad(trainable) {}

  void zero_grad() {
    if (grad.same_shape(value)) {
      std::fill(grad.data.begin(), grad.data.end(), 0.0);
    } else {
      grad = Matrix(value.rows, value.cols);
    }
  }
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  double scalar() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Pullback = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Matrix value;
    Matrix grad;
    const char* op = "";
    bool needs_grad = false;
    Tensor* sink = nullptr;
    Pullback pullback;
  };

  Var leaf(Tensor& t) {
    kernels::check_finite(t.value, "leaf");
    Node n;
    n.value = t.value;
    n.op = "leaf";
    n.needs_grad = t.requires_grad;
    n.sink = t.requires_grad ? &t : nullptr;
    return push(std::move(n));
  }

  Var constant(Matrix m) {
    kernels::check_finite(m, "constant");
    Node n;
    n.value = std::move(m);
    n.op = "constant";
    return push(std::move(n));
  }

  // Records the result of a primitive. The pullback is dropped when no input
  // requires a gradient.
  Var record(const char* op, Matrix value, bool needs_grad, Pullback pullback) {
    kernels::check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.needs_grad = needs_grad;
    if (needs_grad) n.pullback = std::move(pullback);
    return push(std::move(n));
  }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(std::size_t id) { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Adds g into the gradient accumulator of node `id` (if it wants one).
  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
  }

  Matrix& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix(n.value.rows, n.value.cols);
    return n.grad;
  }

  void backward(Var loss) {
    detail::require(loss.tape() == this, "backward: variable belongs to another tape");
    const Node& out = nodes_[loss.id()];
    detail::require(out.value.rows == 1 && out.value.cols == 1, "backward: loss must be a scalar");
    detail::require(out.needs_grad, "backward: loss does not depend on any trainable tensor");
    for (Node& n : nodes_) n.grad = Matrix();
    nodes_[loss.id()].grad = Matrix(1, 1, 1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.size() == 0 || !n.needs_grad) continue;
      if (n.pullback) n.pullback(*this, id);
      if (n.sink != nullptr) {
        Matrix& acc = n.sink->grad;
        if (!acc.same_shape(n.value)) acc = Matrix(n.value.rows, n.value.cols);
        for (std::size_t i = 0; i < acc.size(); ++i) acc.data[i] += n.grad.data[i];
      }
    }
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->node(id_).value; }

inline double Var::scalar() const {
  const Matrix& v = value();
  detail::require(v.size() == 1, "Var::scalar: not a 1x1 value");
  return v.data[0];
}

namespace detail_ad {

inline Tape& same_tape(const Var& a, const Var& b) {
  detail::require(a.tape() != nullptr && a.tape() == b.tape(), "autodiff: operands on different tapes");
  return *a.tape();
}

inline bool wants(const Var& v) { return v.tape()->node(v.id()).needs_grad; }

}  // namespace detail_ad

inline Var matmul(Var a, Var b) {
  Tape& t = detail_ad::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", kernels::matmul(a.value(), b.value()),
                  detail_ad::wants(a) || detail_ad::wants(b), [ia, ib](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& av = tp.node(ia).value;
                    const Matrix& bv = tp.node(ib).value;
                    if (tp.node(ia).needs_grad) {
                      Matrix da(av.rows, av.cols);
                      for (std::size_t i = 0; i < av.rows; ++i)
                        for (std::size_t k = 0; k < av.cols; ++k) {
                          double acc = 0.0;
                          for (std::size_t j = 0; j < bv.cols; ++j) acc += g(i, j) * bv(k, j);
                          da(i, k) = acc;
                        }
                      tp.accumulate(ia, da);
                    }
                    if (tp.node(ib).needs_grad) {
                      Matrix db(bv.rows, bv.cols);
                      for (std::size_t i = 0; i < av.rows; ++i)
                        for (std::size_t k = 0; k < av.cols; ++k) {
                          const double aik = av(i, k);
                          if (aik == 0.0) continue;
                          for (std::size_t j = 0; j < bv.cols; ++j) db(k, j) += aik * g(i, j);
                        }
                      tp.accumulate(ib, db);
                    }
                  });
}

inline Var add_bias(Var x, Var bias) {
  Tape& t = detail_ad::same_tape(x, bias);
  const std::size_t ix = x.id(), ibias = bias.id();
  return t.record("add_bias", kernels::add_bias(x.value(), bias.value()),
                  detail_ad::wants(x) || detail_ad::wants(bias),
                  [ix, ibias](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ix, g);
                    if (tp.node(ibias).needs_grad) {
                      Matrix db(1, g.cols);
                      for (std::size_t i = 0; i < g.rows; ++i)
                        for (std::size_t j = 0; j < g.cols; ++j) db.data[j] += g(i, j);
                      tp.accumulate(ibias, db);
                    }
                  });
}

inline Var relu(Var x) {
  Tape& t = *x.tape();
  const std::size_t ix = x.id();
  return t.record("relu", kernels::relu(x.value()), detail_ad::wants(x),
                  [ix](Tape& tp, std::size_t self) {
                    Matrix g = tp.node(self).grad;
                    const Matrix& xv = tp.node(ix).value;
                    for (std::size_t i = 0; i < g.size(); ++i)
                      if (!(xv.data[i] > 0.0)) g.data[i] = 0.0;
                    tp.accumulate(ix, g);
                  });
}

inline Var log_softmax_rows(Var x) {
  Tape& t = *x.tape();
  const std::size_t ix = x.id();
  return t.record("log_softmax_rows", kernels::log_softmax_rows(x.value()), detail_ad::wants(x),
                  [ix](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& y = tp.node(self).value;
                    Matrix dx(g.rows, g.cols);
                    for (std::size_t i = 0; i < g.rows; ++i) {
                      double gs = 0.0;
                      for (std::size_t j = 0; j < g.cols; ++j) gs += g(i, j);
                      for (std::size_t j = 0; j < g.cols; ++j) dx(i, j) = g(i, j) - std::exp(y(i, j)) * gs;
                    }
                    tp.accumulate(ix, dx);
                  });
}

inline Var softmax_rows(Var x) {
  Tape& t = *x.tape();
  const std::size_t ix = x.id();
  return t.record("softmax_rows", kernels::softmax_rows(x.value()), detail_ad::wants(x),
                  [ix](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& y = tp.node(self).value;
                    Matrix dx(g.rows, g.cols);
                    for (std::size_t i = 0; i < g.rows; ++i) {
                      double gy = 0.0;
                      for (std::size_t j = 0; j < g.cols; ++j) gy += g(i, j) * y(i, j);
                      for (std::size_t j = 0; j < g.cols; ++j) dx(i, j) = y(i, j) * (g(i, j) - gy);
                    }
                    tp.accumulate(ix, dx);
                  });
}

inline Var exp(Var x) {
  Tape& t = *x.tape();
  const std::size_t ix = x.id();
  return t.record("exp", kernels::exp(x.value()), detail_ad::wants(x),
                  [ix](Tape& tp, std::size_t self) {
                    tp.accumulate(ix, kernels::mul(tp.node(self).grad, tp.node(self).value));
                  });
}

// log2(1 + c / x) with c a constant of the same shape.
inline Var log2_1p_scaled(Var x, const Matrix& c) {
  Tape& t = *x.tape();
  const std::size_t ix = x.id();
  return t.record("log2_1p_scaled", kernels::log2_1p_scaled(x.value(), c), detail_ad::wants(x),
                  [ix, c](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& xv = tp.node(ix).value;
                    Matrix dx(g.rows, g.cols);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const double xi = xv.data[i];
                      dx.data[i] = -g.data[i] * c.data[i] / (std::numbers::ln2 * xi * (xi + c.data[i]));
                    }
                    tp.accumulate(ix, dx);
                  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail_ad::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mul", kernels::mul(a.value(), b.value()),
                  detail_ad::wants(a) || detail_ad::wants(b), [ia, ib](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    if (tp.node(ia).needs_grad) tp.accumulate(ia, kernels::mul(g, tp.node(ib).value));
                    if (tp.node(ib).needs_grad) tp.accumulate(ib, kernels::mul(g, tp.node(ia).value));
                  });
}

inline Var div(Var a, Var b) {
  Tape& t = detail_ad::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("div", kernels::div(a.value(), b.value()),
                  detail_ad::wants(a) || detail_ad::wants(b), [ia, ib](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& bv = tp.node(ib).value;
                    if (tp.node(ia).needs_grad) tp.accumulate(ia, kernels::div(g, bv));
                    if (tp.node(ib).needs_grad) {
                      const Matrix& y = tp.node(self).value;  // a / b
                      Matrix db(g.rows, g.cols);
                      for (std::size_t i = 0; i < g.size(); ++i) db.data[i] = -g.data[i] * y.data[i] / bv.data[i];
                      tp.accumulate(ib, db);
                    }
                  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail_ad::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", kernels::add(a.value(), b.value()),
                  detail_ad::wants(a) || detail_ad::wants(b), [ia, ib](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, g);
                  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  return t.record("scale", kernels::scale(a.value(), s), detail_ad::wants(a),
                  [ia, s](Tape& tp, std::size_t self) { tp.accumulate(ia, kernels::scale(tp.node(self).grad, s)); });
}

inline Var reduce_sum(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  return t.record("reduce_sum", Matrix(1, 1, kernels::sum(a.value())), detail_ad::wants(a),
                  [ia](Tape& tp, std::size_t self) {
                    const Matrix& av = tp.node(ia).value;
                    tp.accumulate(ia, Matrix(av.rows, av.cols, tp.node(self).grad.data[0]));
                  });
}

inline Var select_cols(Var x, std::vector<std::size_t> idx) {
  Tape& t = *x.tape();
  const std::size_t ix = x.id();
  Matrix value = kernels::select_cols(x.value(), idx);
  return t.record("select_cols", std::move(value), detail_ad::wants(x),
                  [ix, idx = std::move(idx)](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& xv = tp.node(ix).value;
                    Matrix dx(xv.rows, xv.cols);
                    for (std::size_t j = 0; j < idx.size(); ++j)
                      for (std::size_t i = 0; i < g.rows; ++i) dx(i, idx[j]) += g(i, j);
                    tp.accumulate(ix, dx);
                  });
}

inline Var concat_rows(std::span<const Var> parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Tape& t = *parts.front().tape();
  std::vector<const Matrix*> values;
  std::vector<std::size_t> ids;
  bool needs = false;
  for (const Var& p : parts) {
    detail::require(p.tape() == &t, "concat_rows: operands on different tapes");
    values.push_back(&p.value());
    ids.push_back(p.id());
    needs = needs || detail_ad::wants(p);
  }
  return t.record("concat_rows", kernels::concat_rows(values), needs,
                  [ids = std::move(ids)](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.node(self).grad;
                    std::size_t offset = 0;
                    for (std::size_t id : ids) {
                      const Matrix& pv = tp.node(id).value;
                      Matrix part(pv.rows, pv.cols);
                      std::copy_n(g.data.begin() + static_cast<std::ptrdiff_t>(offset), pv.size(), part.data.begin());
                      offset += pv.size();
                      tp.accumulate(id, part);
                    }
                  });
}

// Analytic vs. central-difference comparison.
struct GradientCheckReport {
  std::vector<double> max_rel_deviation;  // one entry per parameter tensor
  double worst = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

struct GradientCheckOptions {
  double eps = 1e-6;    // central-difference step
  double tol = 1e-4;    // pass threshold on relative deviation
  // Entries whose analytic and numeric magnitudes are both below this are
  // counted as agreeing (both are zero up to rounding).
  double abs_floor = 0.0;
  std::size_t samples = 0;  // 0: every entry of every tensor
  std::uint64_t seed = 0;
};

using ScalarFn = std::function<Var(Tape&)>;

inline GradientCheckReport gradient_check(const ScalarFn& f, std::span<Tensor* const> params,
                                          const GradientCheckOptions& opt) {
  detail::require(opt.eps > 0, "gradient_check: eps must be > 0");
  for (Tensor* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(f(tape));
  }
  auto eval = [&f] {
    Tape tape;
    return f(tape).scalar();
  };

  std::vector<std::pair<std::size_t, std::size_t>> entries;
  std::size_t total = 0;
  for (std::size_t p = 0; p < params.size(); ++p) total += params[p]->value.size();
  if (opt.samples == 0 || opt.samples >= total) {
    for (std::size_t p = 0; p < params.size(); ++p)
      for (std::size_t i = 0; i < params[p]->value.size(); ++i) entries.emplace_back(p, i);
  } else {
    Rng rng(opt.seed);
    for (std::size_t n = 0; n < opt.samples; ++n) {
      std::size_t flat = rng.index(total);
      std::size_t p = 0;
      while (flat >= params[p]->value.size()) flat -= params[p++]->value.size();
      entries.emplace_back(p, flat);
    }
  }

  GradientCheckReport report;
  report.max_rel_deviation.assign(params.size(), 0.0);
  for (auto [p, i] : entries) {
    double& slot = params[p]->value.data[i];
    const double saved = slot;
    slot = saved + opt.eps;
    const double up = eval();
    slot = saved - opt.eps;
    const double down = eval();
    slot = saved;
    const double numeric = (up - down) / (2.0 * opt.eps);
    const double analytic = params[p]->grad.data[i];
    const double scale = std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
    const double dev = scale > 0.0 ? std::abs(analytic - numeric) / scale : 0.0;
    report.max_rel_deviation[p] = std::max(report.max_rel_deviation[p], dev);
    report.worst = std::max(report.worst, dev);
    ++report.entries_checked;
  }
  for (Tensor* p : params) p->zero_grad();
  report.passed = report.worst < opt.tol;
  return report;
}

}  // namespace dynn::ad
