// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "disgcmae/autodiff.hpp"

namespace disgcmae {

/// Floor applied to probabilities before any logarithm.
inline constexpr double kProbFloor = 1e-12;

inline std::vector<double> softmax(std::span<const double> v) {
  require(!v.empty(), "softmax: empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> p(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    p[i] = std::exp(v[i] - mx);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

/// KL(p || q) = sum p_i (log p_i - log q_i), logs taken of floored values.
/// Entries with p_i == 0 contribute nothing.
inline double kl_div(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), [&] { return "kl_div: length mismatch " + std::to_string(p.size()) + " vs " +
                                    std::to_string(q.size()); });
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    s += p[i] * (std::log(std::max(p[i], kProbFloor)) - std::log(std::max(q[i], kProbFloor)));
  }
  return std::max(s, 0.0);
}

namespace ad {

/// KL between two probability rows recorded on the tape.
inline Var kl_div(Var p, Var q) {
  require(p.rows() == q.rows() && p.cols() == q.cols(), "kl_div: length mismatch");
  Var lp = log(clamp_min(p, kProbFloor));
  Var lq = log(clamp_min(q, kProbFloor));
  return sum(mul(p, sub(lp, lq)));
}

/// -log softmax(logits)[label] for a [1,C] logit row.
inline Var cross_entropy(Var logits, std::size_t label) {
  require(logits.rows() == 1, "cross_entropy: expects one logit row");
  require(label < logits.cols(), "cross_entropy: label out of range");
  return scale(pick(row_log_softmax(logits), 0, label), -1.0);
}

}  // namespace ad

}  // namespace disgcmae
