// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "disgcmae/autodiff.hpp"
#include "disgcmae/rng.hpp"

namespace disgcmae {

/// Named, ordered collection of trainable tensors. Tensor addresses are
/// stable for the lifetime of the set, which is what GradientMap keys on.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  ParamSet() = default;
  ParamSet(const ParamSet& o) : entries_(o.entries_) { reindex(); }
  ParamSet& operator=(const ParamSet& o) {
    entries_ = o.entries_;
    reindex();
    return *this;
  }
  ParamSet(ParamSet&&) = default;
  ParamSet& operator=(ParamSet&&) = default;

  Tensor& add(const std::string& name, Tensor t) {
    require(!index_.contains(name), [&] { return "ParamSet: duplicate parameter '" + name + "'"; });
    t.requires_grad = true;
    entries_.push_back({name, std::move(t)});
    index_[name] = entries_.size() - 1;
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), [&] { return "ParamSet: no parameter '" + name + "'"; });
    return entries_[it->second].tensor;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), [&] { return "ParamSet: no parameter '" + name + "'"; });
    return entries_[it->second].tensor;
  }

  std::size_t size() const { return entries_.size(); }
  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }

  /// Total number of scalars, optionally restricted to names with a prefix.
  std::size_t count(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.name.starts_with(prefix)) n += e.tensor.size();
    return n;
  }

  bool congruent(const ParamSet& o) const {
    if (o.entries_.size() != entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name != o.entries_[i].name ||
          entries_[i].tensor.shape != o.entries_[i].tensor.shape)
        return false;
    return true;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].name] = i;
  }

  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

using NamedGrads = std::map<std::string, std::vector<double>>;

/// Pulls the gradients of `params` out of a tape result. Parameters whose
/// name does not pass `keep` are left out (and so are not updated).
template <class Pred>
NamedGrads collect_grads(const ParamSet& params, const GradientMap& g, Pred keep) {
  NamedGrads out;
  for (const auto& e : params.entries()) {
    if (!keep(e.name)) continue;
    auto it = g.find(&e.tensor);
    out[e.name] = it != g.end() ? it->second : std::vector<double>(e.tensor.size(), 0.0);
  }
  return out;
}

inline NamedGrads collect_grads(const ParamSet& params, const GradientMap& g) {
  return collect_grads(params, g, [](const std::string&) { return true; });
}

/// acc += scale * g, entry by entry.
inline void accumulate(NamedGrads& acc, const NamedGrads& g, double scale = 1.0) {
  for (const auto& [name, v] : g) {
    auto& slot = acc[name];
    if (slot.empty()) slot.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) slot[i] += scale * v[i];
  }
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update on every parameter named in `grads`.
inline void adam_step(ParamSet& params, const NamedGrads& grads, AdamState& state) {
  for (const auto& [name, g] : grads) {
    require(params.contains(name), [&] { return "adam_step: unknown parameter '" + name + "'"; });
    require(params.at(name).size() == g.size(), [&] { return "adam_step: gradient shape mismatch for '" + name + "'"; });
    for (auto* moments : {&state.m, &state.v}) {
      auto it = moments->find(name);
      if (it != moments->end())
        require(it->second.size() == g.size(), [&] { return "adam_step: state shape mismatch for '" + name + "'"; });
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.values[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

/// Glorot-uniform initialisation of a [fan_in, fan_out] matrix.
inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(fan_in, fan_out);
  for (double& x : t.values) x = rng.uniform(-lim, lim);
  return t;
}

}  // namespace disgcmae
