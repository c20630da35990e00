#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfmplan/diffcore/params.hpp"
#include "cfmplan/diffcore/tensor.hpp"

namespace cfmplan::diff {

/// Handle to a node on a Tape.
struct Var {
  std::uint32_t id = 0;
};

enum class GradMode {
  none,         // values only, backward rejected
  inputs_only,  // parameters are constants; gradients flow to marked inputs
  full,         // gradients for parameters and marked inputs
};

/// Reverse-mode recording of one forward pass.
///
/// A tape is built fresh for every forward/backward pair and discarded
/// afterwards. Parameter nodes borrow the ParamStore values; backward adds
/// their gradients into the store.
class Tape {
 public:
  explicit Tape(GradMode mode = GradMode::full) : mode_(mode) { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] GradMode mode() const { return mode_; }
  [[nodiscard]] bool recording() const { return mode_ != GradMode::none; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor2 v) { return push(std::move(v), nullptr, false); }

  /// Borrowed constant; `v` must outlive the tape.
  Var constant_ref(const Tensor2& v) { return push(Tensor2{}, &v, false); }

  /// Differentiable input; its gradient is available through grad() after backward.
  Var input(Tensor2 v) { return push(std::move(v), nullptr, recording()); }

  Var param(ParamStore& store, const std::string& name) {
    auto it = param_index_.find(name);
    if (it != param_index_.end()) return Var{it->second};
    ParamBlock& b = store.block(name);
    const bool tracked = mode_ == GradMode::full;
    Var v = push(Tensor2{}, &b.value, tracked);
    if (tracked) params_.push_back({v.id, &b.grad, &store});
    param_index_.emplace(name, v.id);
    return v;
  }

  /// Read-only parameter access for shared, concurrent inference.
  Var param(const ParamStore& store, const std::string& name) {
    if (mode_ == GradMode::full) throw StateError("Tape: const ParamStore used with full gradients");
    auto it = param_index_.find(name);
    if (it != param_index_.end()) return Var{it->second};
    Var v = push(Tensor2{}, &store.value(name), false);
    param_index_.emplace(name, v.id);
    return v;
  }

  [[nodiscard]] const Tensor2& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.own;
  }

  /// Gradient of the last backward() loss with respect to `v`; zeros if unreached.
  [[nodiscard]] const Tensor2& grad(Var v) {
    if (!backward_done_) throw StateError("Tape::grad: backward has not run");
    return grad_buffer(v.id);
  }

  [[nodiscard]] bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Record a node computed by an op. `back` receives the tape and the output id.
  Var record(Tensor2 value, std::span<const Var> parents, std::function<void(Tape&, std::uint32_t)> back) {
    bool ng = false;
    if (recording()) {
      for (Var p : parents) ng = ng || nodes_[p.id].needs_grad;
    }
    Var out = push(std::move(value), nullptr, ng);
    if (ng) nodes_[out.id].back = std::move(back);
    return out;
  }
  Var record(Tensor2 value, std::initializer_list<Var> parents, std::function<void(Tape&, std::uint32_t)> back) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(back));
  }

  /// Mutable gradient buffer (allocated zero on first access). Used by op backward closures.
  Tensor2& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) {
      const Tensor2& v = n.ref ? *n.ref : n.own;
      n.grad = Tensor2(v.rows, v.cols);
    }
    return n.grad;
  }

  [[nodiscard]] const Tensor2& value_at(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.own;
  }
  [[nodiscard]] bool needs_grad_at(std::uint32_t id) const { return nodes_[id].needs_grad; }

  /// Reverse sweep from a 1x1 loss. Parameter gradients are accumulated into their stores.
  void backward(Var loss) {
    if (!recording()) throw StateError("Tape::backward: tape was built without gradient recording");
    if (nodes_.empty()) throw StateError("Tape::backward: no forward pass recorded");
    if (backward_done_) throw StateError("Tape::backward: already run for this forward pass");
    const Tensor2& lv = value(loss);
    if (lv.rows != 1 || lv.cols != 1) throw DimensionError("Tape::backward: loss must be 1x1, got " + lv.shape());
    backward_done_ = true;
    if (!nodes_[loss.id].needs_grad) {
      for (const auto& p : params_) p.store->mark_gradients();
      return;
    }
    grad_buffer(loss.id).data[0] = 1.0;
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.back) continue;
      n.back(*this, i);
    }
    for (const auto& p : params_) {
      Node& n = nodes_[p.node];
      if (!n.grad.empty()) {
        for (std::size_t k = 0; k < n.grad.size(); ++k) p.target->data[k] += n.grad.data[k];
      }
      p.store->mark_gradients();
    }
  }

 private:
  struct Node {
    Tensor2 own;
    const Tensor2* ref = nullptr;
    Tensor2 grad;
    bool needs_grad = false;
    std::function<void(Tape&, std::uint32_t)> back;
  };
  struct ParamLink {
    std::uint32_t node;
    Tensor2* target;
    ParamStore* store;
  };

  Var push(Tensor2 v, const Tensor2* ref, bool needs_grad) {
    Node n;
    n.own = std::move(v);
    n.ref = ref;
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  GradMode mode_;
  std::vector<Node> nodes_;
  std::vector<ParamLink> params_;
  std::unordered_map<std::string, std::uint32_t> param_index_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable ops

namespace detail {
inline void add_into(Tensor2& dst, const Tensor2& src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += s * src.data[i];
}
}  // namespace detail

inline Var matmul(Tape& t, Var a, Var b) {
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  if (av.cols != bv.rows) throw DimensionError("matmul: " + av.shape() + " * " + bv.shape());
  Tensor2 out = diff::matmul(av, bv);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    const Tensor2& A = tp.value_at(a.id);
    const Tensor2& B = tp.value_at(b.id);
    if (tp.needs_grad_at(a.id)) {
      gemm_bt_acc(g.data.data(), B.data.data(), tp.grad_buffer(a.id).data.data(), A.rows, B.cols, A.cols);
    }
    if (tp.needs_grad_at(b.id)) {
      gemm_at_acc(A.data.data(), g.data.data(), tp.grad_buffer(b.id).data.data(), A.rows, A.cols, B.cols);
    }
  });
}

/// a * b^T
inline Var matmul_bt(Tape& t, Var a, Var b) {
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  if (av.cols != bv.cols) throw DimensionError("matmul_bt: " + av.shape() + " * " + bv.shape() + "^T");
  Tensor2 out(av.rows, bv.rows);
  gemm_bt_acc(av.data.data(), bv.data.data(), out.data.data(), av.rows, av.cols, bv.rows);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);  // n x m
    const Tensor2& A = tp.value_at(a.id);     // n x k
    const Tensor2& B = tp.value_at(b.id);     // m x k
    if (tp.needs_grad_at(a.id)) {
      gemm_acc(g.data.data(), B.data.data(), tp.grad_buffer(a.id).data.data(), A.rows, B.rows, A.cols);
    }
    if (tp.needs_grad_at(b.id)) {
      gemm_at_acc(g.data.data(), A.data.data(), tp.grad_buffer(b.id).data.data(), A.rows, B.rows, A.cols);
    }
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Tensor2 out = av;
  detail::add_into(out, bv);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    if (tp.needs_grad_at(a.id)) detail::add_into(tp.grad_buffer(a.id), g);
    if (tp.needs_grad_at(b.id)) detail::add_into(tp.grad_buffer(b.id), g);
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  require_same_shape(av, bv, "sub");
  Tensor2 out = av;
  detail::add_into(out, bv, -1.0);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    if (tp.needs_grad_at(a.id)) detail::add_into(tp.grad_buffer(a.id), g);
    if (tp.needs_grad_at(b.id)) detail::add_into(tp.grad_buffer(b.id), g, -1.0);
  });
}

/// Elementwise product.
inline Var mul(Tape& t, Var a, Var b) {
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor2 out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    const Tensor2& A = tp.value_at(a.id);
    const Tensor2& B = tp.value_at(b.id);
    if (tp.needs_grad_at(a.id)) {
      Tensor2& ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * B.data[i];
    }
    if (tp.needs_grad_at(b.id)) {
      Tensor2& gb = tp.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * A.data[i];
    }
  });
}

/// a (n x c) + bias (1 x c) broadcast over rows.
inline Var add_row(Tape& t, Var a, Var bias) {
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(bias);
  if (bv.rows != 1 || bv.cols != av.cols) throw DimensionError("add_row: " + av.shape() + " + " + bv.shape());
  Tensor2 out = av;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bv.data[c];
  return t.record(std::move(out), {a, bias}, [a, bias](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    if (tp.needs_grad_at(a.id)) detail::add_into(tp.grad_buffer(a.id), g);
    if (tp.needs_grad_at(bias.id)) {
      Tensor2& gb = tp.grad_buffer(bias.id);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) gb.data[c] += g(r, c);
    }
  });
}

inline Var scale(Tape& t, Var a, double s) {
  Tensor2 out = t.value(a);
  for (double& x : out.data) x *= s;
  return t.record(std::move(out), {a}, [a, s](Tape& tp, std::uint32_t self) {
    detail::add_into(tp.grad_buffer(a.id), tp.grad_buffer(self), s);
  });
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

/// Exact (erf) GELU.
inline Var gelu(Tape& t, Var a) {
  Tensor2 out = t.value(a);
  for (double& x : out.data) x = gelu_value(x);
  return t.record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    const Tensor2& A = tp.value_at(a.id);
    Tensor2& ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * gelu_derivative(A.data[i]);
  });
}

/// Row-wise softmax.
inline Var softmax_rows(Tape& t, Var a) {
  Tensor2 out = t.value(a);
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& x : row) {
      x = std::exp(x - mx);
      s += x;
    }
    for (double& x : row) x /= s;
  }
  return t.record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    const Tensor2& y = tp.value_at(self);
    Tensor2& ga = tp.grad_buffer(a.id);
    for (std::size_t r = 0; r < y.rows; ++r) {
      const double s = dot(g.row(r), y.row(r));
      for (std::size_t c = 0; c < y.cols; ++c) ga(r, c) += y(r, c) * (g(r, c) - s);
    }
  });
}

inline Var square(Tape& t, Var a) {
  Tensor2 out = t.value(a);
  for (double& x : out.data) x *= x;
  return t.record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    const Tensor2& A = tp.value_at(a.id);
    Tensor2& ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += 2.0 * A.data[i] * g.data[i];
  });
}

/// Sum of all entries as 1x1.
inline Var sum(Tape& t, Var a) {
  const Tensor2& av = t.value(a);
  double s = 0.0;
  for (double x : av.data) s += x;
  return t.record(Tensor2(1, 1, s), {a}, [a](Tape& tp, std::uint32_t self) {
    const double g = tp.grad_buffer(self).data[0];
    for (double& x : tp.grad_buffer(a.id).data) x += g;
  });
}

inline Var mean(Tape& t, Var a) {
  const double n = static_cast<double>(t.value(a).size());
  return scale(t, sum(t, a), 1.0 / n);
}

/// Row-major reinterpretation with the same element count.
inline Var reshape(Tape& t, Var a, std::size_t rows, std::size_t cols) {
  const Tensor2& av = t.value(a);
  if (rows * cols != av.size()) {
    throw DimensionError("reshape: " + av.shape() + " -> " + Tensor2::shape_string(rows, cols));
  }
  Tensor2 out(rows, cols, av.data);
  return t.record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    detail::add_into(tp.grad_buffer(a.id), tp.grad_buffer(self));
  });
}

/// Stack row blocks with equal column count.
inline Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = t.value(parts.front()).cols;
  std::size_t rows = 0;
  for (Var p : parts) {
    if (t.value(p).cols != cols) {
      throw DimensionError("concat_rows: " + t.value(parts.front()).shape() + " vs " + t.value(p).shape());
    }
    rows += t.value(p).rows;
  }
  Tensor2 out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor2& pv = t.value(p);
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.size();
  }
  return t.record(std::move(out), std::span<const Var>(parts), [parts](Tape& tp, std::uint32_t self) {
    const Tensor2& g = tp.grad_buffer(self);
    std::size_t at = 0;
    for (Var p : parts) {
      const std::size_t n = tp.value_at(p.id).size();
      if (tp.needs_grad_at(p.id)) {
        Tensor2& gp = tp.grad_buffer(p.id);
        for (std::size_t k = 0; k < n; ++k) gp.data[k] += g.data[at + k];
      }
      at += n;
    }
  });
}

/// Single-input op with user-supplied value and vector-Jacobian product.
inline Var custom_unary(Tape& t, Var a, Tensor2 value, std::function<Tensor2(const Tensor2& out_grad)> vjp) {
  return t.record(std::move(value), {a}, [a, vjp = std::move(vjp)](Tape& tp, std::uint32_t self) {
    Tensor2 gi = vjp(tp.grad_buffer(self));
    detail::add_into(tp.grad_buffer(a.id), gi);
  });
}

}  // namespace cfmplan::diff
