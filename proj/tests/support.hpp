// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "disgcmae.hpp"

namespace disgcmae::testing {

inline Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Tensor t = Tensor::zeros(r, c);
  for (double& v : t.values) v = sd * rng.normal();
  return t;
}

/// Symmetric, zero-diagonal, entries in [0,1) with roughly `density` of the pairs present.
inline Tensor random_adjacency(std::size_t n, Rng& rng, double density = 0.6) {
  Tensor a = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (rng.uniform() < density) a(i, j) = a(j, i) = 0.05 + 0.95 * rng.uniform();
  return a;
}

inline EegGraph random_graph(std::size_t n, std::size_t d, Rng& rng, double density = 0.6) {
  EegGraph g;
  g.x = random_tensor(n, d, rng);
  g.a = random_adjacency(n, rng, density);
  for (std::size_t i = 0; i < n; ++i) g.node_ids.push_back(i);
  g.subject_id = "s";
  g.label = static_cast<int>(rng.below(2));
  return g;
}

/// Maximum elementwise relative error between tape gradients and central
/// differences, over every input of `f`.
inline double grad_check(const std::vector<Tensor>& inputs, const std::function<Var(std::vector<Var>&)>& f,
                         double h = 1e-5) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
  const auto g = tape.backward(f(leaves));
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto eval = [&](const Tensor& probe) {
      Tape t2;
      std::vector<Var> ls;
      for (std::size_t j = 0; j < inputs.size(); ++j) ls.push_back(t2.constant(j == k ? probe : inputs[j]));
      return f(ls).item();
    };
    const Tensor fd = finite_diff_grad(eval, inputs[k], h);
    const auto& analytic = g.at(&inputs[k]);
    for (std::size_t i = 0; i < fd.size(); ++i) worst = std::max(worst, relative_error(analytic[i], fd.values[i]));
  }
  return worst;
}

/// Same check for a loss over named parameters: `loss(params, grads*)`
/// returns the scalar and, when grads is non-null, fills the analytic gradient.
inline double param_grad_check(ParamSet& params,
                               const std::function<double(const ParamSet&, NamedGrads*)>& loss,
                               double h = 1e-5) {
  NamedGrads analytic;
  loss(params, &analytic);
  double worst = 0;
  for (auto& [name, g] : analytic) {
    Tensor& p = params.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.values[i];
      p.values[i] = orig + h;
      const double fp = loss(params, nullptr);
      p.values[i] = orig - h;
      const double fm = loss(params, nullptr);
      p.values[i] = orig;
      worst = std::max(worst, relative_error(g[i], (fp - fm) / (2 * h)));
    }
  }
  return worst;
}

inline EncoderConfig small_encoder(EncoderFamily family, std::size_t in_dim = 3) {
  EncoderConfig c;
  c.family = family;
  c.tier = "test";
  c.layers = 2;
  c.hidden = 4;
  c.heads = 2;
  c.position_embedding = family == EncoderFamily::GFormer;
  c.contrastive_dim = 3;
  c.in_dim = in_dim;
  c.n_positions = 16;
  return c;
}

/// Applies permutation p (new row i = old row p[i]) to a graph.
inline EegGraph permute(const EegGraph& g, const std::vector<std::size_t>& p) {
  EegGraph out = g;
  for (std::size_t i = 0; i < g.n(); ++i) {
    for (std::size_t c = 0; c < g.d(); ++c) out.x(i, c) = g.x(p[i], c);
    for (std::size_t j = 0; j < g.n(); ++j) out.a(i, j) = g.a(p[i], p[j]);
    out.node_ids[i] = g.node_ids[p[i]];
  }
  return out;
}

/// Worst relative error between `analytic` (one map per parameter set) and
/// central differences of `loss()` over every scalar of every set. Names
/// missing from a map count as a zero analytic gradient.
inline double fd_check_sets(const std::vector<ParamSet*>& sets, const std::vector<const NamedGrads*>& analytic,
                            const std::function<double()>& loss, double h = 1e-5) {
  double worst = 0;
  for (std::size_t s = 0; s < sets.size(); ++s)
    for (auto& e : sets[s]->entries()) {
      auto it = analytic[s]->find(e.name);
      for (std::size_t i = 0; i < e.tensor.size(); ++i) {
        const double orig = e.tensor.values[i];
        e.tensor.values[i] = orig + h;
        const double fp = loss();
        e.tensor.values[i] = orig - h;
        const double fm = loss();
        e.tensor.values[i] = orig;
        const double g = it == analytic[s]->end() ? 0.0 : it->second[i];
        worst = std::max(worst, relative_error(g, (fp - fm) / (2 * h)));
      }
    }
  return worst;
}

inline std::vector<double> random_unit(std::size_t c, Rng& rng) {
  std::vector<double> v(c);
  double n = 0;
  for (double& x : v) n += (x = rng.normal()) * x;
  for (double& x : v) x /= std::sqrt(n);
  return v;
}

/// Brute-force pair selection: independent min-max thresholding, then every
/// retained pair against every deleted mediator. With no deleted nodes the
/// support-comparison rule is applied directly.
inline PairSets brute_force_pairs(const Tensor& a_h, const Tensor& a_l, const NodePartition& part, double theta) {
  auto binarize = [theta](const Tensor& a) {
    const std::size_t n = a.rows();
    std::vector<double> off;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off.push_back(a(i, j));
    std::vector<std::vector<bool>> b(n, std::vector<bool>(n, false));
    if (off.empty()) return b;
    const double lo = *std::min_element(off.begin(), off.end()), hi = *std::max_element(off.begin(), off.end());
    if (hi == lo) return b;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) b[i][j] = i != j && (a(i, j) - lo) / (hi - lo) > theta;
    return b;
  };
  const auto bh = binarize(a_h), bl = binarize(a_l);
  const std::size_t n = part.v_l.size();
  PairSets ps;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::size_t hi = part.v_l[i], hj = part.v_l[j];
      bool pos = bh[hi][hj];
      if (part.v_d.empty()) {
        if (pos)
          ps.positives.emplace_back(i, j);
        else if (bl[i][j])
          ps.negatives.emplace_back(i, j);
        continue;
      }
      for (std::size_t k : part.v_d) pos = pos || (bh[k][hi] && bh[k][hj]);
      if (pos)
        ps.positives.emplace_back(i, j);
      else if (bl[i][j])
        ps.negatives.emplace_back(i, j);
    }
  return ps;
}

/// KL(p || q) summed directly over softmax(zp), softmax(zq).
inline double kl_of_logits_oracle(const std::vector<double>& zp, const std::vector<double>& zq) {
  auto probs = [](const std::vector<double>& z) {
    std::vector<double> e;
    double s = 0;
    for (double v : z) s += e.emplace_back(std::exp(v));
    for (double& v : e) v /= s;
    return e;
  };
  const auto p = probs(zp), q = probs(zq);
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

/// Direct summation without log-sum-exp tricks.
inline double info_nce_oracle(const std::vector<double>& q, const Tensor& pos, const Tensor& neg, double tau) {
  auto sim = [&](const Tensor& m, std::size_t r) {
    double s = 0;
    for (std::size_t k = 0; k < q.size(); ++k) s += q[k] * m(r, k);
    return std::exp(s / tau);
  };
  double negsum = 0;
  for (std::size_t r = 0; r < neg.rows(); ++r) negsum += sim(neg, r);
  double total = 0;
  for (std::size_t p = 0; p < pos.rows(); ++p) total += -std::log(sim(pos, p) / (sim(pos, p) + negsum));
  return total / static_cast<double>(pos.rows());
}

/// Linear-kernel GTD by direct summation. Student rows are LD-local, teacher
/// rows HD-local and matched through part.v_l.
inline double gtd_oracle(const Tensor& student, const Tensor& teacher, const PairSets& ps, const NodePartition& part,
                         double eps) {
  auto dot = [](const Tensor& m, std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t c = 0; c < m.cols(); ++c) s += m(a, c) * m(b, c);
    return s;
  };
  auto avg_kl = [&](const std::vector<Edge>& pairs) {
    if (pairs.empty()) return 0.0;
    std::vector<double> zs, zt;
    for (auto [i, j] : pairs) {
      zs.push_back(dot(student, i, j));
      zt.push_back(dot(teacher, part.v_l[i], part.v_l[j]));
    }
    return kl_of_logits_oracle(zs, zt) / static_cast<double>(pairs.size());
  };
  if (ps.positives.empty()) return 0.0;
  return avg_kl(ps.positives) / (avg_kl(ps.negatives) + eps);
}

/// Random pair-selection instance: m <= max_m HD nodes, a random keep set in
/// random order (or the identity for H2H), and a learned LD adjacency that
/// is all-zero when `no_negatives`.
struct GtdInstance {
  Tensor a_h, a_l;
  NodePartition part;
  Tensor student, teacher;
};

inline GtdInstance random_gtd_instance(Rng& rng, std::size_t max_m, bool h2h, bool no_negatives) {
  GtdInstance g;
  const std::size_t m = 3 + rng.below(max_m - 2);
  g.a_h = random_adjacency(m, rng, 0.2 + 0.6 * rng.uniform());
  const std::size_t n = h2h ? m : 2 + rng.below(m - 2);
  std::vector<std::size_t> keep = h2h ? spread_keep_set(m, m) : rng.permutation(m);
  keep.resize(n);
  EegGraph hd;
  hd.x = Tensor::zeros(m, 1);
  hd.a = g.a_h;
  for (std::size_t i = 0; i < m; ++i) hd.node_ids.push_back(i);
  g.part = reduce_density(hd, keep).second;
  g.a_l = no_negatives ? Tensor::zeros(n, n) : random_adjacency(n, rng, 0.2 + 0.6 * rng.uniform());
  g.student = random_tensor(n, 4, rng, 0.5);
  g.teacher = random_tensor(m, 4, rng, 0.5);
  return g;
}

/// 4-node HD graph with node ids inside the small encoders' position table,
/// and its 3-node LD reduction.
struct GradFixture {
  EegGraph hd, ld;
  NodePartition part;
};

inline GradFixture grad_fixture(Rng& rng) {
  GradFixture f;
  f.hd = random_graph(4, 3, rng, 0.8);
  f.hd.node_ids = rng.sample_without_replacement(16, 4);
  auto keep = rng.sample_without_replacement(4, 3);
  std::sort(keep.begin(), keep.end());
  std::tie(f.ld, f.part) = reduce_density(f.hd, keep);
  return f;
}

/// Full forward + pre-training loss (both encoders, all four terms, shared
/// queue prefilled with foreign keys) against central differences.
inline double pretrain_grad_error(EncoderFamily teacher, EncoderFamily student, std::uint64_t seed) {
  Rng rng(seed);
  PretrainConfig cfg;
  cfg.batch_size = 1;
  cfg.queue_capacity = 16;
  PretrainState st = init_pretrain(small_encoder(teacher), small_encoder(student), cfg, seed);
  // Fresh zero biases can collapse the projection to the zero vector, where
  // L2 normalisation has no derivative; move off that point.
  for (ParamSet* p : {&st.teacher, &st.student}) {
    for (auto& e : p->entries())
      for (double& v : e.tensor.values) v += 0.1 * rng.normal();
    for (double& v : p->at("mask").values) v = rng.normal();
  }
  for (ParamSet* p : {&st.teacher_key, &st.student_key})
    for (auto& e : p->entries())
      for (double& v : e.tensor.values) v += 0.1 * rng.normal();
  for (std::uint64_t k = 0; k < 8; ++k)
    st.queue.push({random_unit(3, rng), 100 + k, k % 2 ? Origin::Student : Origin::Teacher, ViewKind::Key});
  const auto fx = grad_fixture(rng);
  const PairedSample sample{&fx.hd, &fx.ld, 1};
  const Rng view_rng = rng.derive(5);
  const auto res = detail::pretrain_sample(st, sample, cfg, true, 1.0, view_rng);
  if (!(res.loss.l_cl_t > 0 && res.loss.l_cl_s > 0)) throw std::logic_error("contrastive terms inactive");
  return fd_check_sets({&st.teacher, &st.student}, {&res.teacher_grads, &res.student_grads},
                       [&] { return detail::pretrain_sample(st, sample, cfg, true, 1.0, view_rng).loss.total; });
}

/// Full forward + fine-tuning loss (CE + logit KD + GTD) of a tuned LD
/// student against central differences.
inline double finetune_grad_error(EncoderFamily family, std::uint64_t seed, double eps = 1e-3) {
  Rng rng(seed);
  const auto ec = small_encoder(family);
  const ParamSet teacher = init_model(ec, rng);
  ParamSet student = init_model(ec, rng);
  // Zero-initialised biases put ReLU inputs exactly on the kink.
  for (auto& e : student.entries())
    for (double& v : e.tensor.values) v += 0.1 * rng.normal();
  const auto fx = grad_fixture(rng);
  const TeacherView tv = teacher_view(teacher, ec, fx.hd);
  DistillConfig cfg;
  cfg.set_loss("union");
  // With no negative pairs the GTD term is L_pos / eps; at the default eps the
  // loss reaches 1e7 and central differences lose their last digits.
  cfg.eps = eps;
  const FinetuneSample sample{&fx.ld, &fx.part, &tv};
  const auto res = detail::finetune_sample(student, ec, sample, cfg, true, 1.0);
  ParamSet trainable;
  for (const auto& e : student.entries())
    if (e.name.starts_with("enc.") || e.name.starts_with("cls.")) trainable.add(e.name, e.tensor);
  auto loss = [&] {
    for (auto& e : trainable.entries()) student.at(e.name) = e.tensor;
    return detail::finetune_sample(student, ec, sample, cfg, false, 1.0).loss.total;
  };
  return fd_check_sets({&trainable}, {&res.grads}, loss);
}

}  // namespace disgcmae::testing
