// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace disgcmae {

/// Raised when a caller breaks an operation's precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

/// Same check with the message built only on failure.
template <class MakeMessage>
  requires std::is_invocable_r_v<std::string, MakeMessage>
inline void require(bool cond, MakeMessage&& what) {
  if (!cond) throw ContractViolation(what());
}

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

/// Dense row-major block of doubles. Rank 0-2 is what the library uses;
/// rank-1 tensors behave as a single row.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;

  Tensor(Shape s, std::vector<double> v, bool needs_grad = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(needs_grad) {
    require(shape_size(shape) == values.size(), [&] { return "Tensor: shape " + shape_str(shape) + " does not match " +
                std::to_string(values.size()) + " values"; });
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor({rows, cols}, std::vector<double>(rows * cols, 0.0));
  }
  static Tensor filled(std::size_t rows, std::size_t cols, double v) {
    return Tensor({rows, cols}, std::vector<double>(rows * cols, v));
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor identity(std::size_t n) {
    Tensor t = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const {
    if (shape.size() < 2) return 1;
    return shape[0];
  }
  std::size_t cols() const {
    if (shape.empty()) return 1;
    return shape.back();
  }
  bool is_scalar() const { return values.size() == 1; }

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  double item() const {
    require(is_scalar(), [&] { return "Tensor::item on non-scalar " + shape_str(shape); });
    return values[0];
  }

  std::vector<double> row_copy(std::size_t r) const {
    return {values.begin() + static_cast<std::ptrdiff_t>(r * cols()),
            values.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols())};
  }

  void zero_grad() { grad = std::vector<double>(values.size(), 0.0); }

  bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }
};

namespace kernels {

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double *b0 = b + j * k, *b1 = b0 + k, *b2 = b1 + k, *b3 = b2 + k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      ci[j] += s0;
      ci[j + 1] += s1;
      ci[j + 2] += s2;
      ci[j + 3] += s3;
    }
    for (; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// c[m,n] += a[k,m]^T * b[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace kernels

/// Plain (non-recorded) matrix product.
inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), [&] { return "matmul: inner dimensions differ " + shape_str(a.shape) + " x " +
                                    shape_str(b.shape); });
  Tensor c = Tensor::zeros(a.rows(), b.cols());
  kernels::gemm_nn(a.values.data(), b.values.data(), c.values.data(), a.rows(), a.cols(),
                   b.cols());
  return c;
}

inline Tensor transpose_values(const Tensor& a) {
  Tensor t = Tensor::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace disgcmae
