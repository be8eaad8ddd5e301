// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "disgcmae/tensor.hpp"

namespace disgcmae {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
};

/// Gradients keyed by the address of the leaf Tensor they belong to.
using GradientMap = std::unordered_map<const Tensor*, std::vector<double>>;

/// ComputationRecord: an append-only list of primitive operations. Inputs of
/// a node always have smaller ids than the node itself, so reverse iteration
/// is a valid reverse topological order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    const Tensor* source = nullptr;
    bool requires_grad = false;
  };

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf bound to an external tensor; backward() reports its gradient under
  /// &t when t.requires_grad is set.
  Var leaf(const Tensor& t) { return leaf(t, t.requires_grad); }

  Var leaf(const Tensor& t, bool requires_grad) {
    Node n;
    n.value.shape = {t.rows(), t.cols()};
    n.value.values = t.values;
    n.source = &t;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor t) {
    Node n;
    n.value.shape = {t.rows(), t.cols()};
    n.value.values = std::move(t.values);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward bw) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(bw));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, Backward bw) {
    Node n;
    n.value = std::move(value);
    const std::size_t self = nodes_.size();
    for (const Var& v : inputs) {
      if (v.tape != this) throw ContractViolation("Tape::record: input from another tape");
      if (v.id >= self) throw std::logic_error("Tape::record: input does not precede node");
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, self};
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of node id, allocated as zeros on first use.
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& g = nodes_[id].grad;
    if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
    return g;
  }
  const std::vector<double>& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Reverse sweep from a scalar loss. Every leaf that requires a gradient
  /// appears in the result, with zeros when the loss does not depend on it.
  GradientMap backward(Var loss) {
    if (loss.tape != this) throw ContractViolation("backward: loss from another tape");
    require(nodes_[loss.id].value.size() == 1, [&] { return "backward: loss must be a scalar, got shape " +
                                                   shape_str(nodes_[loss.id].value.shape); });
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
    GradientMap out;
    for (const Node& n : nodes_) {
      if (n.source == nullptr || !n.requires_grad) continue;
      auto& slot = out[n.source];
      if (slot.empty()) slot.assign(n.value.size(), 0.0);
      if (!n.grad.empty())
        for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += n.grad[i];
    }
    return out;
  }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace ad {

namespace detail {

inline Tensor like(const Tensor& t) { return Tensor::zeros(t.rows(), t.cols()); }

template <class F>
Var unary(Var a, F&& fwd_and_deriv) {
  // fwd_and_deriv(x) -> pair(value, derivative)
  Tape& tp = *a.tape;
  const Tensor& x = a.value();
  Tensor y = like(x);
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto [v, dv] = fwd_and_deriv(x.values[i]);
    y.values[i] = v;
    d[i] = dv;
  }
  return tp.record(std::move(y), {a}, [a, d = std::move(d)](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d[i];
  });
}

inline void check_same(const Var& a, const Var& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), [&] { return std::string(op) + ": shape mismatch " + shape_str(a.value().shape) + " vs " +
              shape_str(b.value().shape); });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.cols() == y.rows(), [&] { return "matmul: inner dimensions differ " + shape_str(x.shape) + " x " +
                                    shape_str(y.shape); });
  const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
  Tensor c = Tensor::zeros(m, n);
  kernels::gemm_nn(x.values.data(), y.values.data(), c.values.data(), m, k, n);
  return a.tape->record(std::move(c), {a, b}, [a, b, m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a.id))
      kernels::gemm_nt(g.data(), t.value(b.id).values.data(), t.grad_buffer(a.id).data(), m, n, k);
    if (t.requires_grad(b.id))
      kernels::gemm_tn(t.value(a.id).values.data(), g.data(), t.grad_buffer(b.id).data(), k, m, n);
  });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.cols() == y.cols(), [&] { return "matmul_nt: inner dimensions differ " + shape_str(x.shape) +
                                    " x " + shape_str(y.shape) + "^T"; });
  const std::size_t m = x.rows(), k = x.cols(), n = y.rows();
  Tensor c = Tensor::zeros(m, n);
  kernels::gemm_nt(x.values.data(), y.values.data(), c.values.data(), m, k, n);
  return a.tape->record(std::move(c), {a, b}, [a, b, m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a.id))
      kernels::gemm_nn(g.data(), t.value(b.id).values.data(), t.grad_buffer(a.id).data(), m, n, k);
    if (t.requires_grad(b.id))
      kernels::gemm_tn(g.data(), t.value(a.id).values.data(), t.grad_buffer(b.id).data(), n, m, k);
  });
}

inline Var transpose(Var a) {
  Tensor y = transpose_values(a.value());
  const std::size_t r = a.rows(), c = a.cols();
  return a.tape->record(std::move(y), {a}, [a, r, c](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

inline Var add(Var a, Var b) {
  detail::check_same(a, b, "add");
  Tensor y = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] += bv[i];
  y.grad.reset();
  y.requires_grad = false;
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (Var v : {a, b}) {
      if (!t.requires_grad(v.id)) continue;
      auto& gv = t.grad_buffer(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same(a, b, "sub");
  Tensor y = detail::like(a.value());
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = av[i] - bv[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::check_same(a, b, "mul");
  Tensor y = detail::like(a.value());
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = av[i] * bv[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      const auto& bv = t.value(b.id).values;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      const auto& av = t.value(a.id).values;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// Elementwise a / b.
inline Var div(Var a, Var b) {
  detail::check_same(a, b, "div");
  Tensor y = detail::like(a.value());
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = av[i] / bv[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(a.id).values;
    const auto& bv = t.value(b.id).values;
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

/// Elementwise product with a constant (no gradient to the mask).
inline Var mul_const(Var a, const Tensor& mask) {
  require(a.rows() == mask.rows() && a.cols() == mask.cols(), "mul_const: shape mismatch");
  Tensor y = detail::like(a.value());
  const auto& av = a.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = av[i] * mask.values[i];
  return a.tape->record(std::move(y), {a}, [a, m = mask.values](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * m[i];
  });
}

/// a[m,n] + b[1,n] broadcast over rows.
inline Var add_row(Var a, Var b) {
  require(b.rows() == 1 && b.cols() == a.cols(), [&] { return "add_row: bias shape " +
                                                      shape_str(b.value().shape) +
                                                      " incompatible with " +
                                                      shape_str(a.value().shape); });
  Tensor y = detail::like(a.value());
  const std::size_t r = a.rows(), c = a.cols();
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y.values[i * c + j] = av[i * c + j] + bv[j];
  return a.tape->record(std::move(y), {a, b}, [a, b, r, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
  });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return std::pair{s * x, s}; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary(a, [s](double x) { return std::pair{x + s, 1.0}; });
}

inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0 ? std::pair{x, 1.0} : std::pair{0.0, 0.0}; });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, [](double x) {
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::pair{s, s * (1.0 - s)};
  });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) {
    const double e = std::exp(x);
    return std::pair{e, e};
  });
}

inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::pair{std::log(x), 1.0 / x}; });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return std::pair{x * x, 2.0 * x}; });
}

inline Var sqrt(Var a) {
  return detail::unary(a, [](double x) {
    const double r = std::sqrt(x);
    return std::pair{r, 0.5 / r};
  });
}

/// max(a, floor) with zero gradient on clamped entries.
inline Var clamp_min(Var a, double floor) {
  return detail::unary(a, [floor](double x) {
    return x < floor ? std::pair{floor, 0.0} : std::pair{x, 1.0};
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& x : t.grad_buffer(a.id)) x += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Column means: [m,n] -> [1,n].
inline Var mean_rows(Var a) {
  const std::size_t r = a.rows(), c = a.cols();
  require(r > 0, "mean_rows: empty input");
  Tensor y = Tensor::zeros(1, c);
  const auto& av = a.value().values;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y.values[j] += av[i * c + j];
  for (double& v : y.values) v /= static_cast<double>(r);
  return a.tape->record(std::move(y), {a}, [a, r, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(a.id);
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
  });
}

/// Row-wise softmax restricted to allowed entries (others get probability 0).
/// An empty allowed mask means every entry is allowed.
inline Var row_softmax(Var a, const std::vector<char>& allowed = {}) {
  const std::size_t r = a.rows(), c = a.cols();
  require(c > 0, "row_softmax: empty rows");
  require(allowed.empty() || allowed.size() == r * c, "row_softmax: mask size mismatch");
  Tensor y = Tensor::zeros(r, c);
  const auto& av = a.value().values;
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (allowed.empty() || allowed[i * c + j]) mx = std::max(mx, av[i * c + j]);
    if (!std::isfinite(mx)) continue;  // fully masked row stays zero
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!allowed.empty() && !allowed[i * c + j]) continue;
      const double e = std::exp(av[i * c + j] - mx);
      y.values[i * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) y.values[i * c + j] /= z;
  }
  return a.tape->record(std::move(y), {a}, [a, r, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& p = t.value(self).values;
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += p[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

inline Var row_log_softmax(Var a) {
  const std::size_t r = a.rows(), c = a.cols();
  require(c > 0, "row_log_softmax: empty rows");
  Tensor y = Tensor::zeros(r, c);
  const auto& av = a.value().values;
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, av[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(av[i * c + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) y.values[i * c + j] = av[i * c + j] - lse;
  }
  return a.tape->record(std::move(y), {a}, [a, r, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& ls = t.value(self).values;
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga[i * c + j] += g[i * c + j] - std::exp(ls[i * c + j]) * gs;
    }
  });
}

/// Per-row layer normalization with learned gain and shift ([1,n] each).
inline Var layer_norm_rows(Var a, Var gain, Var shift, double eps = 1e-5) {
  const std::size_t r = a.rows(), c = a.cols();
  require(gain.rows() == 1 && gain.cols() == c && shift.rows() == 1 && shift.cols() == c,
          "layer_norm_rows: gain/shift shape mismatch");
  Tensor y = Tensor::zeros(r, c);
  std::vector<double> xhat(r * c), inv_std(r);
  const auto& av = a.value().values;
  const auto& gv = gain.value().values;
  const auto& sv = shift.value().values;
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += av[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (av[i * c + j] - mu) * (av[i * c + j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (av[i * c + j] - mu) * inv_std[i];
      y.values[i * c + j] = xhat[i * c + j] * gv[j] + sv[j];
    }
  }
  return a.tape->record(
      std::move(y), {a, gain, shift},
      [a, gain, shift, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(gain.id).values;
        if (t.requires_grad(gain.id)) {
          auto& gg = t.grad_buffer(gain.id);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
        }
        if (t.requires_grad(shift.id)) {
          auto& gs = t.grad_buffer(shift.id);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gs[j] += g[i * c + j];
        }
        if (t.requires_grad(a.id)) {
          auto& ga = t.grad_buffer(a.id);
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = g[i * c + j] * gv[j];
              s1 += dxh;
              s2 += dxh * xhat[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = g[i * c + j] * gv[j];
              ga[i * c + j] += inv_std[i] * (dxh - inv_c * s1 - xhat[i * c + j] * inv_c * s2);
            }
          }
        }
      });
}

/// Scales each row to unit L2 norm.
inline Var l2_normalize_rows(Var a, double eps = 1e-12) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor y = Tensor::zeros(r, c);
  std::vector<double> norms(r);
  const auto& av = a.value().values;
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += av[i * c + j] * av[i * c + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < c; ++j) y.values[i * c + j] = av[i * c + j] / norms[i];
  }
  return a.tape->record(std::move(y), {a}, [a, r, c, norms = std::move(norms)](Tape& t,
                                                                               std::size_t self) {
    const auto& g = t.grad(self);
    const auto& u = t.value(self).values;
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * u[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga[i * c + j] += (g[i * c + j] - u[i * c + j] * dot) / norms[i];
    }
  });
}

/// Rows of a selected by index (repeats allowed).
inline Var gather_rows(Var a, const std::vector<std::size_t>& idx) {
  const std::size_t c = a.cols();
  Tensor y = Tensor::zeros(idx.size(), c);
  const auto& av = a.value().values;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < a.rows(), "gather_rows: index out of range");
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                y.values.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return a.tape->record(std::move(y), {a}, [a, c, idx](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += g[i * c + j];
  });
}

/// Rows flagged in `indicator` are replaced by the single row `fill` ([1,c]).
inline Var replace_rows(Var x, Var fill, const std::vector<char>& indicator) {
  const std::size_t r = x.rows(), c = x.cols();
  require(indicator.size() == r, "replace_rows: indicator length mismatch");
  require(fill.rows() == 1 && fill.cols() == c, [&] { return "replace_rows: fill must be [1," +
                                                    std::to_string(c) + "]"; });
  Tensor y = x.value();
  y.requires_grad = false;
  y.grad.reset();
  const auto& fv = fill.value().values;
  for (std::size_t i = 0; i < r; ++i)
    if (indicator[i]) std::copy(fv.begin(), fv.end(), y.values.begin() + static_cast<std::ptrdiff_t>(i * c));
  return x.tape->record(std::move(y), {x, fill}, [x, fill, r, c, indicator](Tape& t,
                                                                           std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(x.id)) {
      auto& gx = t.grad_buffer(x.id);
      for (std::size_t i = 0; i < r; ++i)
        if (!indicator[i])
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j];
    }
    if (t.requires_grad(fill.id)) {
      auto& gf = t.grad_buffer(fill.id);
      for (std::size_t i = 0; i < r; ++i)
        if (indicator[i])
          for (std::size_t j = 0; j < c; ++j) gf[j] += g[i * c + j];
    }
  });
}

inline Var slice_cols(Var a, std::size_t start, std::size_t len) {
  const std::size_t r = a.rows(), c = a.cols();
  require(start + len <= c, "slice_cols: range out of bounds");
  Tensor y = Tensor::zeros(r, len);
  const auto& av = a.value().values;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < len; ++j) y.values[i * len + j] = av[i * c + start + j];
  return a.tape->record(std::move(y), {a}, [a, r, c, start, len](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < len; ++j) ga[i * c + start + j] += g[i * len + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const Var& p : parts) {
    require(p.rows() == r, "concat_cols: row count mismatch");
    c += p.cols();
  }
  Tensor y = Tensor::zeros(r, c);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const auto& pv = p.value().values;
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) y.values[i * c + off + j] = pv[i * pc + j];
    off += pc;
  }
  return parts[0].tape->record(std::move(y), parts, [parts, r, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t pc = t.value(p.id).cols();
      if (t.requires_grad(p.id)) {
        auto& gp = t.grad_buffer(p.id);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * c + off + j];
      }
      off += pc;
    }
  });
}

/// Single entry as a scalar.
inline Var pick(Var a, std::size_t r, std::size_t c) {
  require(r < a.rows() && c < a.cols(), "pick: index out of range");
  const std::size_t idx = r * a.cols() + c;
  return a.tape->record(Tensor::scalar(a.value().values[idx]), {a},
                        [a, idx](Tape& t, std::size_t self) {
                          t.grad_buffer(a.id)[idx] += t.grad(self)[0];
                        });
}

inline Var add_all(const std::vector<Var>& terms) {
  require(!terms.empty(), "add_all: no terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace ad

/// Central-difference estimate (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  require(h > 0, "finite_diff_grad: step must be positive");
  Tensor probe = x;
  probe.grad.reset();
  Tensor g = x;
  g.grad.reset();
  g.requires_grad = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.values[i];
    probe.values[i] = orig + h;
    const double fp = f(probe);
    probe.values[i] = orig - h;
    const double fm = f(probe);
    probe.values[i] = orig;
    g.values[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// |a-b| / max(1, |a|, |b|), the comparison used by every gradient check.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace disgcmae
