// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "disgcmae/checkpoint.hpp"
#include "disgcmae/encoders.hpp"
#include "disgcmae/graph.hpp"
#include "disgcmae/optim.hpp"

namespace disgcmae {

struct QueueEntry {
  std::vector<double> embedding;
  std::uint64_t source_id = 0;
  Origin origin = Origin::Teacher;
  ViewKind kind = ViewKind::Key;
};

/// Fixed-capacity FIFO of key embeddings shared by teacher and student.
class KeyQueue {
 public:
  explicit KeyQueue(std::size_t capacity = 1024) : capacity_(capacity) {
    require(capacity >= 1, "KeyQueue: capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::deque<QueueEntry>& entries() const { return items_; }

  void push(QueueEntry e) {
    double nrm = 0;
    for (double v : e.embedding) nrm += v * v;
    require(std::abs(std::sqrt(nrm) - 1.0) <= 1e-9, "KeyQueue: key is not unit norm");
    if (!items_.empty())
      require(e.embedding.size() == items_.front().embedding.size(), "KeyQueue: key dim mismatch");
    items_.push_back(std::move(e));
    while (items_.size() > capacity_) items_.pop_front();
  }

  /// Embeddings of every entry with a different source, one per row.
  Tensor negatives_for(std::uint64_t source_id) const {
    std::size_t cnt = 0;
    for (const auto& e : items_) cnt += e.source_id != source_id;
    if (cnt == 0) return Tensor::zeros(0, 0);
    const std::size_t c = items_.front().embedding.size();
    Tensor t = Tensor::zeros(cnt, c);
    std::size_t r = 0;
    for (const auto& e : items_) {
      if (e.source_id == source_id) continue;
      std::copy(e.embedding.begin(), e.embedding.end(), t.values.begin() + static_cast<long>(r * c));
      ++r;
    }
    return t;
  }

 private:
  std::size_t capacity_;
  std::deque<QueueEntry> items_;
};

inline void enqueue(KeyQueue& q, std::vector<QueueEntry> keys) {
  for (auto& k : keys) q.push(std::move(k));
}

/// mean((x - x~)^2) + mean((a - x~ x~^T)^2)
inline double reconstruction_loss(const Tensor& x, const Tensor& a, const Tensor& x_tilde) {
  require(x.shape == x_tilde.shape, [&] { return "reconstruction_loss: x is " + shape_str(x.shape) + ", x_tilde is " +
                                        shape_str(x_tilde.shape); });
  const std::size_t n = x.rows(), d = x.cols();
  require(a.rows() == n && a.cols() == n, "reconstruction_loss: adjacency shape mismatch");
  double fx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) fx += (x.values[i] - x_tilde.values[i]) * (x.values[i] - x_tilde.values[i]);
  double fa = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += x_tilde(i, k) * x_tilde(j, k);
      fa += (a(i, j) - s) * (a(i, j) - s);
    }
  return fx / static_cast<double>(x.size()) + fa / static_cast<double>(a.size());
}

/// Per positive p: -log(e^{q.p/t} / (e^{q.p/t} + sum_neg e^{q.k/t})), averaged over positives.
/// `positives` and `negatives` hold one embedding per row.
inline double info_nce(std::span<const double> q, const Tensor& positives, const Tensor& negatives,
                       double temperature) {
  require(temperature > 0, "info_nce: temperature must be positive");
  require(positives.rows() >= 1 && positives.size() > 0, "info_nce: need at least one positive");
  require(negatives.size() > 0, "info_nce: no negatives");
  const std::size_t c = q.size();
  require(positives.cols() == c && negatives.cols() == c, "info_nce: embedding dim mismatch");
  auto dot = [&](const Tensor& m, std::size_t r) {
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) s += q[k] * m(r, k);
    return s / temperature;
  };
  std::vector<double> neg(negatives.rows());
  double mx = -INFINITY;
  for (std::size_t r = 0; r < neg.size(); ++r) mx = std::max(mx, neg[r] = dot(negatives, r));
  double total = 0;
  for (std::size_t p = 0; p < positives.rows(); ++p) {
    const double sp = dot(positives, p);
    const double m = std::max(mx, sp);
    double z = std::exp(sp - m);
    for (double sn : neg) z += std::exp(sn - m);
    total += -(sp - m) + std::log(z);
  }
  return total / static_cast<double>(positives.rows());
}

/// Same as above with the query taken from the queue's point of view.
inline double info_nce(std::span<const double> q, const Tensor& positives, const KeyQueue& queue,
                       std::uint64_t source_id, double temperature) {
  return info_nce(q, positives, queue.negatives_for(source_id), temperature);
}

namespace ad {

inline Var reconstruction_loss(Var x_tilde, const Tensor& x, const Tensor& a) {
  require(x_tilde.value().shape == x.shape, "reconstruction_loss: shape mismatch");
  require(a.rows() == x.rows() && a.cols() == x.rows(), "reconstruction_loss: adjacency shape mismatch");
  const Tensor& xt = x_tilde.value();
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> dx(x.size());
  double fx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dx[i] = xt.values[i] - x.values[i];
    fx += dx[i] * dx[i];
  }
  // r = a - x~ x~^T, kept for the backward pass.
  std::vector<double> r(n * n, 0.0);
  kernels::gemm_nt(xt.values.data(), xt.values.data(), r.data(), n, d, n);
  double fa = 0;
  for (std::size_t i = 0; i < n * n; ++i) {
    r[i] = a.values[i] - r[i];
    fa += r[i] * r[i];
  }
  const double nx = static_cast<double>(x.size()), na = static_cast<double>(n * n);
  Tensor out = Tensor::scalar(fx / nx + fa / na);
  return x_tilde.tape->record(std::move(out), {x_tilde},
                              [x_tilde, dx = std::move(dx), r = std::move(r), n, d, nx, na](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const auto& xv = t.value(x_tilde.id).values;
    auto& gx = t.grad_buffer(x_tilde.id);
    for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += g * 2.0 / nx * dx[i];
    // d/dx~ of mean(r^2) = -(2/n^2) (r + r^T) x~
    const double c = -2.0 * g / na;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double w = c * (r[i * n + j] + r[j * n + i]);
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) gx[i * d + k] += w * xv[j * d + k];
      }
  });
}

/// Differentiable in q only; keys are constants.
inline Var info_nce(Var q, const Tensor& positives, const Tensor& negatives, double temperature) {
  require(temperature > 0, "info_nce: temperature must be positive");
  require(positives.size() > 0, "info_nce: need at least one positive");
  require(negatives.size() > 0, "info_nce: no negatives");
  const std::size_t P = positives.rows(), N = negatives.rows(), c = q.cols();
  require(q.rows() == 1 && positives.cols() == c && negatives.cols() == c, "info_nce: embedding dim mismatch");
  Tensor keys = Tensor::zeros(P + N, c);
  std::copy(positives.values.begin(), positives.values.end(), keys.values.begin());
  std::copy(negatives.values.begin(), negatives.values.end(), keys.values.begin() + static_cast<long>(P * c));
  Var s = scale(matmul_nt(q, q.tape->constant(std::move(keys))), 1.0 / temperature);
  // |s| <= 1/temperature for unit vectors, so exp cannot overflow for sane temperatures.
  Var e = exp(s);
  Var negsum = sum(slice_cols(e, P, N));
  std::vector<Var> terms;
  for (std::size_t p = 0; p < P; ++p) terms.push_back(sub(log(add(pick(e, 0, p), negsum)), pick(s, 0, p)));
  return scale(add_all(terms), 1.0 / static_cast<double>(P));
}

}  // namespace ad

struct PretrainConfig {
  double temperature = 0.07;
  std::size_t queue_capacity = 1024;
  double momentum = 0.999;
  double node_drop = 0.5;
  double edge_drop = 0.5;
  std::size_t batch_size = 128;
  std::size_t epochs = 200;
  AdamConfig adam;
  double w_cl_t = 1.0, w_cl_s = 1.0, w_rec_t = 1.0, w_rec_s = 1.0;
  std::size_t threads = 1;

  void validate() const {
    require(temperature > 0, "PretrainConfig: temperature must be positive");
    require(batch_size >= 1, "PretrainConfig: batch size must be positive");
    require(queue_capacity >= batch_size, "PretrainConfig: queue capacity below batch size");
    require(momentum >= 0 && momentum <= 1, "PretrainConfig: momentum outside [0,1]");
    require(node_drop >= 0 && node_drop < 1 && edge_drop >= 0 && edge_drop < 1,
            "PretrainConfig: drop ratios outside [0,1)");
    require(threads >= 1, "PretrainConfig: threads must be positive");
  }

  bool contrastive_enabled() const { return w_cl_t != 0.0 || w_cl_s != 0.0; }
};

/// Weighted loss contributions; `total` is their sum.
struct LossComponents {
  double l_cl_t = 0, l_cl_s = 0, l_rec_t = 0, l_rec_s = 0, total = 0;
  /// Value of the differentiated scalar as evaluated on the tape (per step only).
  double objective = 0;
};

struct StepReport {
  std::uint64_t step = 0;
  LossComponents loss;
  bool contrastive_active = false;
};

struct EpochLoss {
  std::size_t epoch = 0;
  LossComponents loss;
};

using LossReport = std::vector<EpochLoss>;

struct PretrainState {
  EncoderConfig teacher_cfg, student_cfg;
  ParamSet teacher, student, teacher_key, student_key;
  AdamState teacher_opt, student_opt;
  KeyQueue queue;
  std::uint64_t step = 0;
};

inline PretrainState init_pretrain(const EncoderConfig& teacher_cfg, const EncoderConfig& student_cfg,
                                   const PretrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(teacher_cfg.contrastive_dim == student_cfg.contrastive_dim,
          "init_pretrain: teacher and student contrastive dims differ");
  require(teacher_cfg.in_dim == student_cfg.in_dim, "init_pretrain: feature dims differ");
  Rng rng(seed);
  Rng tr = rng.derive(101), sr = rng.derive(102);
  PretrainState s{teacher_cfg, student_cfg, init_model(teacher_cfg, tr), init_model(student_cfg, sr),
                  {}, {}, {cfg.adam, {}, {}, 0}, {cfg.adam, {}, {}, 0}, KeyQueue(cfg.queue_capacity), 0};
  s.teacher_key = s.teacher;
  s.student_key = s.student;
  return s;
}

struct PairedSample {
  const EegGraph* hd = nullptr;
  const EegGraph* ld = nullptr;
  std::uint64_t source_id = 0;
};

namespace detail {

inline std::vector<double> mask_values(const ParamSet& p, std::size_t d) {
  return p.contains("mask") ? p.at("mask").values : std::vector<double>(d, 0.0);
}

struct SideResult {
  Var cl, rec;
  bool has_cl = false;
  std::vector<QueueEntry> keys;
};

/// Key-side embeddings (no gradient) of the key view and its reconstruction.
inline std::pair<std::vector<double>, std::vector<double>> key_embeddings(const ParamSet& key_params,
                                                                          const EncoderConfig& ec,
                                                                          const GraphView& k_view,
                                                                          const EegGraph& original) {
  Tape tape;
  ParamBinder bind(tape, key_params, false);
  auto out = encode(bind, ec, mask_graph(k_view, mask_values(key_params, ec.in_dim)));
  Var z = readout_project(bind, ec, out.node_emb);
  Var xr = decode(bind, out.node_emb);
  Var zr = readout_project(bind, ec, encode(bind, ec, xr, original).node_emb);
  return {z.value().values, zr.value().values};
}

struct SampleResult {
  LossComponents loss;
  NamedGrads teacher_grads, student_grads;
  std::vector<QueueEntry> keys;
};

inline bool not_classifier(const std::string& name) { return !name.starts_with("cls."); }

inline SampleResult pretrain_sample(const PretrainState& st, const PairedSample& s, const PretrainConfig& cfg,
                                    bool contrastive, double weight, Rng rng) {
  const bool need_keys = cfg.contrastive_enabled();
  auto [tq, tk] = augment(*s.hd, cfg.node_drop, cfg.edge_drop, rng.derive(1), s.source_id, Origin::Teacher);
  auto [sq, sk] = augment(*s.ld, cfg.node_drop, cfg.edge_drop, rng.derive(2), s.source_id, Origin::Student);

  SampleResult res;
  Tensor positives;
  if (need_keys) {
    auto [zt, ztr] = key_embeddings(st.teacher_key, st.teacher_cfg, tk, *s.hd);
    auto [zs, zsr] = key_embeddings(st.student_key, st.student_cfg, sk, *s.ld);
    std::vector<QueueEntry> keys{{zt, s.source_id, Origin::Teacher, ViewKind::Key},
                                 {ztr, s.source_id, Origin::Teacher, ViewKind::ReconstructedKey},
                                 {zs, s.source_id, Origin::Student, ViewKind::Key},
                                 {zsr, s.source_id, Origin::Student, ViewKind::ReconstructedKey}};
    // A projection that collapses to zero has no direction; such keys are dropped.
    for (auto& k : keys) {
      double nrm = 0;
      for (double v : k.embedding) nrm += v * v;
      if (std::abs(std::sqrt(nrm) - 1.0) <= 1e-9) res.keys.push_back(std::move(k));
    }
    const std::size_t c = zt.size();
    positives = Tensor::zeros(res.keys.size(), c);
    for (std::size_t r = 0; r < res.keys.size(); ++r)
      std::copy(res.keys[r].embedding.begin(), res.keys[r].embedding.end(),
                positives.values.begin() + static_cast<long>(r * c));
  }
  const Tensor negatives = contrastive ? st.queue.negatives_for(s.source_id) : Tensor::zeros(0, 0);
  const bool use_cl = contrastive && negatives.size() > 0 && positives.size() > 0;

  Tape tape;
  auto side = [&](const ParamSet& params, const EncoderConfig& ec, const GraphView& qv, const GraphView& kv,
                  const EegGraph& g) {
    ParamBinder bind(tape, params, true);
    const auto mvals = mask_values(params, ec.in_dim);
    auto oq = encode(bind, ec, mask_graph(qv, mvals));
    Var xq = decode(bind, oq.node_emb);
    auto ok = encode(bind, ec, mask_graph(kv, mvals));
    Var xk = decode(bind, ok.node_emb);
    SideResult r;
    r.rec = ad::scale(ad::add(ad::reconstruction_loss(xq, g.x, g.a), ad::reconstruction_loss(xk, g.x, g.a)), 0.5);
    if (use_cl) {
      Var zq = readout_project(bind, ec, oq.node_emb);
      Var zqr = readout_project(bind, ec, encode(bind, ec, xq, g).node_emb);
      r.cl = ad::scale(ad::add(ad::info_nce(zq, positives, negatives, cfg.temperature),
                               ad::info_nce(zqr, positives, negatives, cfg.temperature)),
                       0.5);
      r.has_cl = true;
    }
    return r;
  };
  SideResult t = side(st.teacher, st.teacher_cfg, tq, tk, *s.hd);
  SideResult u = side(st.student, st.student_cfg, sq, sk, *s.ld);

  std::vector<Var> terms{ad::scale(t.rec, cfg.w_rec_t), ad::scale(u.rec, cfg.w_rec_s)};
  res.loss.l_rec_t = cfg.w_rec_t * t.rec.item();
  res.loss.l_rec_s = cfg.w_rec_s * u.rec.item();
  if (use_cl) {
    terms.push_back(ad::scale(t.cl, cfg.w_cl_t));
    terms.push_back(ad::scale(u.cl, cfg.w_cl_s));
    res.loss.l_cl_t = cfg.w_cl_t * t.cl.item();
    res.loss.l_cl_s = cfg.w_cl_s * u.cl.item();
  }
  res.loss.total = res.loss.l_cl_t + res.loss.l_cl_s + res.loss.l_rec_t + res.loss.l_rec_s;
  Var objective = ad::add_all(terms);
  res.loss.objective = objective.item();
  auto grads = tape.backward(ad::scale(objective, weight));
  res.teacher_grads = collect_grads(st.teacher, grads, not_classifier);
  res.student_grads = collect_grads(st.student, grads, not_classifier);
  return res;
}

/// Runs f(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// One optimisation step over a batch of paired HD/LD samples. Returns the
/// batch-averaged weighted loss components.
inline StepReport pretrain_step(PretrainState& st, const std::vector<PairedSample>& batch,
                                const PretrainConfig& cfg, Rng rng) {
  require(!batch.empty(), "pretrain_step: empty batch");
  for (const auto& s : batch) {
    require(s.hd && s.ld, "pretrain_step: missing graph in pair");
    require(s.ld->subject_id == s.hd->subject_id, "pretrain_step: unpaired batch (subject ids differ)");
    for (auto id : s.ld->node_ids)
      require(std::find(s.hd->node_ids.begin(), s.hd->node_ids.end(), id) != s.hd->node_ids.end(), [&] { return "pretrain_step: unpaired batch (LD electrode " + std::to_string(id) + " not in HD graph)"; });
  }
  const bool contrastive = cfg.contrastive_enabled() && st.queue.size() >= cfg.batch_size;
  const double weight = 1.0 / static_cast<double>(batch.size());
  std::vector<detail::SampleResult> results(batch.size());
  detail::parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
    results[i] = detail::pretrain_sample(st, batch[i], cfg, contrastive, weight, rng.derive(i));
  });

  StepReport rep;
  rep.step = st.step;
  rep.contrastive_active = contrastive;
  NamedGrads tg, sg;
  for (const auto& r : results) {
    accumulate(tg, r.teacher_grads);
    accumulate(sg, r.student_grads);
    rep.loss.l_cl_t += weight * r.loss.l_cl_t;
    rep.loss.l_cl_s += weight * r.loss.l_cl_s;
    rep.loss.l_rec_t += weight * r.loss.l_rec_t;
    rep.loss.l_rec_s += weight * r.loss.l_rec_s;
    rep.loss.objective += weight * r.loss.objective;
  }
  rep.loss.total = rep.loss.l_cl_t + rep.loss.l_cl_s + rep.loss.l_rec_t + rep.loss.l_rec_s;
  adam_step(st.teacher, tg, st.teacher_opt);
  adam_step(st.student, sg, st.student_opt);
  momentum_update(st.teacher, st.teacher_key, cfg.momentum);
  momentum_update(st.student, st.student_key, cfg.momentum);
  for (auto& r : results) enqueue(st.queue, std::move(r.keys));
  ++st.step;
  return rep;
}

struct PretrainResult {
  PretrainState state;
  LossReport report;
  std::vector<StepReport> steps;
};

/// Joint teacher/student pre-training on HD graphs; LD partners are the
/// induced subgraphs on `keep` (global electrode ids).
inline PretrainResult run_pretraining(const std::vector<EegGraph>& hd_graphs, const std::vector<std::size_t>& keep,
                                      const EncoderConfig& teacher_cfg, const EncoderConfig& student_cfg,
                                      const PretrainConfig& cfg, std::uint64_t seed,
                                      const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  require(!hd_graphs.empty(), "run_pretraining: empty dataset");
  std::vector<EegGraph> ld;
  ld.reserve(hd_graphs.size());
  for (const auto& g : hd_graphs) ld.push_back(reduce_density(g, local_indices(g, keep)).first);

  PretrainResult res{init_pretrain(teacher_cfg, student_cfg, cfg, seed), {}, {}};
  Rng root(seed);
  const std::size_t N = hd_graphs.size();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = root.derive(1000 + epoch).permutation(N);
    EpochLoss el{epoch, {}};
    for (std::size_t b = 0; b < N; b += cfg.batch_size) {
      std::vector<PairedSample> batch;
      for (std::size_t i = b; i < std::min(N, b + cfg.batch_size); ++i)
        batch.push_back({&hd_graphs[order[i]], &ld[order[i]], order[i]});
      const double frac = static_cast<double>(batch.size()) / static_cast<double>(N);
      auto rep = pretrain_step(res.state, batch, cfg, root.derive(2).derive(res.state.step));
      el.loss.l_cl_t += frac * rep.loss.l_cl_t;
      el.loss.l_cl_s += frac * rep.loss.l_cl_s;
      el.loss.l_rec_t += frac * rep.loss.l_rec_t;
      el.loss.l_rec_s += frac * rep.loss.l_rec_s;
      res.steps.push_back(rep);
    }
    el.loss.total = el.loss.l_cl_t + el.loss.l_cl_s + el.loss.l_rec_t + el.loss.l_rec_s;
    res.report.push_back(el);
    if (on_epoch) on_epoch(el);
  }
  return res;
}

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_loss_csv(const std::string& path, const LossReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write loss report " + path);
  out << "epoch,l_cl_t,l_cl_s,l_rec_t,l_rec_s,l_pretrain\n";
  for (const auto& e : report)
    out << e.epoch << ',' << format_number(e.loss.l_cl_t) << ',' << format_number(e.loss.l_cl_s) << ','
        << format_number(e.loss.l_rec_t) << ',' << format_number(e.loss.l_rec_s) << ','
        << format_number(e.loss.total) << '\n';
  if (!out) throw IoError("failed writing loss report " + path);
}

}  // namespace disgcmae
