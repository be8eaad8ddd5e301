// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "disgcmae/checkpoint.hpp"
#include "disgcmae/encoders.hpp"
#include "disgcmae/graph.hpp"
#include "disgcmae/numerics.hpp"
#include "disgcmae/optim.hpp"
#include "disgcmae/pretrain.hpp"

namespace disgcmae {

enum class KernelKind { Linear, Euclidean, Polynomial, Rbf };

struct KernelSpec {
  KernelKind kind = KernelKind::Linear;
  double c = 1.0;
  int deg = 2;
  double gamma = 1.0;

  void validate() const {
    require(gamma > 0, "KernelSpec: gamma must be positive");
    require(deg >= 1, "KernelSpec: degree must be at least 1");
  }
};

inline std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::Linear: return "linear";
    case KernelKind::Euclidean: return "euclidean";
    case KernelKind::Polynomial: return "polynomial";
    case KernelKind::Rbf: return "rbf";
  }
  throw ContractViolation("unknown kernel kind");
}

inline KernelKind kernel_from_string(const std::string& s) {
  if (s == "linear") return KernelKind::Linear;
  if (s == "euclidean") return KernelKind::Euclidean;
  if (s == "polynomial") return KernelKind::Polynomial;
  if (s == "rbf") return KernelKind::Rbf;
  throw ContractViolation("unknown kernel '" + s + "'");
}

inline double kernel_similarity(std::span<const double> xi, std::span<const double> xj, const KernelSpec& k) {
  require(xi.size() == xj.size(), [&] { return "kernel_similarity: length mismatch " + std::to_string(xi.size()) + " vs " +
                                      std::to_string(xj.size()); });
  double dot = 0, sq = 0;
  for (std::size_t t = 0; t < xi.size(); ++t) {
    dot += xi[t] * xj[t];
    sq += (xi[t] - xj[t]) * (xi[t] - xj[t]);
  }
  switch (k.kind) {
    case KernelKind::Linear: return dot;
    case KernelKind::Euclidean: return std::sqrt(sq);
    case KernelKind::Polynomial: return std::pow(dot + k.c, k.deg);
    case KernelKind::Rbf: return std::exp(-k.gamma * sq);
  }
  throw ContractViolation("unknown kernel kind");
}

/// Node pairs (i < j, local to the LD graph) selected for topology distillation.
struct PairSets {
  std::vector<Edge> positives;
  std::vector<Edge> negatives;
  std::size_t c_pos() const { return positives.size(); }
  std::size_t c_neg() const { return negatives.size(); }
};

/// Min-max normalisation over off-diagonal entries, then a strict threshold.
/// Returns a 0/1 matrix.
inline std::vector<char> binarize_adjacency(const Tensor& a, double theta) {
  const std::size_t n = a.rows();
  require(a.cols() == n, "binarize_adjacency: matrix not square");
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) {
        require(a(i, j) >= 0.0, "binarize_adjacency: negative entry");
        lo = std::min(lo, a(i, j));
        hi = std::max(hi, a(i, j));
      }
  std::vector<char> out(n * n, 0);
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out[i * n + j] = (a(i, j) - lo) / (hi - lo) > theta ? 1 : 0;
  return out;
}

/// Positive pairs: retained nodes linked in the HD graph directly or through
/// one deleted node. Negative pairs: linked in the learned LD graph but not
/// positive. With no deleted nodes this is the HD-to-HD rule.
inline PairSets select_pairs(const Tensor& a_h, const Tensor& a_l_learned, const NodePartition& part, double theta) {
  const std::size_t m = a_h.rows(), n = a_l_learned.rows();
  require(a_h.cols() == m && a_l_learned.cols() == n, "select_pairs: adjacency not square");
  require(part.v_h.size() == m, [&] { return "select_pairs: partition covers " + std::to_string(part.v_h.size()) +
                                    " HD nodes, adjacency has " + std::to_string(m); });
  require(part.v_l.size() == n, [&] { return "select_pairs: partition retains " + std::to_string(part.v_l.size()) +
                                    " nodes, learned adjacency has " + std::to_string(n); });
  require(theta >= 0 && theta < 1, "select_pairs: theta outside [0,1)");
  for (auto i : part.v_l) require(i < m, "select_pairs: retained index out of range");
  for (auto k : part.v_d) require(k < m, "select_pairs: deleted index out of range");
  const auto bh = binarize_adjacency(a_h, theta);
  const auto bl = binarize_adjacency(a_l_learned, theta);
  PairSets ps;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::size_t hi = part.v_l[i], hj = part.v_l[j];
      bool pos = bh[hi * m + hj] != 0;
      for (std::size_t t = 0; !pos && t < part.v_d.size(); ++t) {
        const std::size_t k = part.v_d[t];
        pos = bh[k * m + hi] && bh[k * m + hj];
      }
      if (pos)
        ps.positives.emplace_back(i, j);
      else if (bl[i * n + j])
        ps.negatives.emplace_back(i, j);
    }
  return ps;
}

/// Z values of `pairs` on the rows of a constant embedding matrix.
inline std::vector<double> pair_kernel_values(const Tensor& emb, const std::vector<Edge>& pairs,
                                              const KernelSpec& k,
                                              const std::vector<std::size_t>* row_map = nullptr) {
  const std::size_t D = emb.cols();
  std::vector<double> z;
  z.reserve(pairs.size());
  for (auto [i, j] : pairs) {
    const std::size_t ri = row_map ? (*row_map)[i] : i, rj = row_map ? (*row_map)[j] : j;
    require(ri < emb.rows() && rj < emb.rows(), "pair_kernel: index out of range");
    z.push_back(kernel_similarity({&emb.values[ri * D], D}, {&emb.values[rj * D], D}, k));
  }
  return z;
}

namespace ad {

/// [1, |pairs|] row of kernel values between embedding rows.
inline Var pair_kernel(Var emb, const std::vector<Edge>& pairs, const KernelSpec& k) {
  k.validate();
  const Tensor& e = emb.value();
  const std::size_t D = e.cols();
  for (auto [i, j] : pairs) require(i < e.rows() && j < e.rows(), "pair_kernel: index out of range");
  Tensor z = Tensor::zeros(1, pairs.size());
  z.values = pair_kernel_values(e, pairs, k);
  const std::vector<double> zv = z.values;
  return emb.tape->record(std::move(z), {emb}, [emb, pairs, k, D, zv](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& ev = t.value(emb.id).values;
    auto& ge = t.grad_buffer(emb.id);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto [i, j] = pairs[p];
      const double* xi = &ev[i * D];
      const double* xj = &ev[j * D];
      double* gi = &ge[i * D];
      double* gj = &ge[j * D];
      switch (k.kind) {
        case KernelKind::Linear:
          for (std::size_t c = 0; c < D; ++c) {
            gi[c] += g[p] * xj[c];
            gj[c] += g[p] * xi[c];
          }
          break;
        case KernelKind::Euclidean:
          if (zv[p] > 0)
            for (std::size_t c = 0; c < D; ++c) {
              const double d = g[p] * (xi[c] - xj[c]) / zv[p];
              gi[c] += d;
              gj[c] -= d;
            }
          break;
        case KernelKind::Polynomial: {
          double dot = 0;
          for (std::size_t c = 0; c < D; ++c) dot += xi[c] * xj[c];
          const double f = g[p] * k.deg * std::pow(dot + k.c, k.deg - 1);
          for (std::size_t c = 0; c < D; ++c) {
            gi[c] += f * xj[c];
            gj[c] += f * xi[c];
          }
          break;
        }
        case KernelKind::Rbf:
          for (std::size_t c = 0; c < D; ++c) {
            const double d = -2.0 * k.gamma * zv[p] * g[p] * (xi[c] - xj[c]);
            gi[c] += d;
            gj[c] -= d;
          }
          break;
      }
    }
  });
}

}  // namespace ad

/// (KL(s_pos || t_pos) / c_pos) / (KL(s_neg || t_neg) / c_neg + eps), where each
/// distribution is a softmax over the Z values of a whole pair set.
inline double gtd_from_z(std::span<const double> zs_pos, std::span<const double> zt_pos,
                         std::span<const double> zs_neg, std::span<const double> zt_neg, double eps) {
  require(eps > 0, "gtd: epsilon must be positive");
  require(zs_pos.size() == zt_pos.size() && zs_neg.size() == zt_neg.size(), "gtd: Z length mismatch");
  if (zs_pos.empty()) return 0.0;
  const double lpos = kl_div(softmax(zs_pos), softmax(zt_pos)) / static_cast<double>(zs_pos.size());
  const double lneg =
      zs_neg.empty() ? 0.0 : kl_div(softmax(zs_neg), softmax(zt_neg)) / static_cast<double>(zs_neg.size());
  return lpos / (lneg + eps);
}

namespace ad {

/// Differentiable GTD from student Z rows ([1,P], [1,N]) and constant teacher Z values.
inline Var gtd_from_z(Var zs_pos, const std::vector<double>& zt_pos, std::optional<Var> zs_neg,
                      const std::vector<double>& zt_neg, double eps) {
  require(eps > 0, "gtd: epsilon must be positive");
  Tape& t = *zs_pos.tape;
  const std::size_t P = zt_pos.size(), N = zt_neg.size();
  require(zs_pos.cols() == P || P == 0, "gtd: Z length mismatch");
  if (P == 0) return t.constant(Tensor::scalar(0.0));
  Var lpos = scale(kl_div(row_softmax(zs_pos), t.constant(Tensor::row(softmax(zt_pos)))), 1.0 / static_cast<double>(P));
  if (N == 0) return scale(lpos, 1.0 / eps);
  require(zs_neg && zs_neg->cols() == N, "gtd: Z length mismatch");
  Var lneg = scale(kl_div(row_softmax(*zs_neg), t.constant(Tensor::row(softmax(zt_neg)))), 1.0 / static_cast<double>(N));
  return div(lpos, add_scalar(lneg, eps));
}

}  // namespace ad

struct DistillConfig {
  KernelSpec kernel;
  double eps = 1e-8;
  double theta = 0.3;
  double temperature = 2.0;
  double w_ce = 1.0, w_kd = 1.0, w_gtd = 1.0;
  bool frozen = false;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 400;
  std::size_t patience = 20;
  AdamConfig adam;
  std::size_t threads = 1;

  void validate() const {
    kernel.validate();
    require(eps > 0, "DistillConfig: epsilon must be positive");
    require(theta >= 0 && theta < 1, "DistillConfig: theta outside [0,1)");
    require(temperature > 0, "DistillConfig: temperature must be positive");
    require(batch_size >= 1 && max_epochs >= 1, "DistillConfig: batch size and epochs must be positive");
    require(threads >= 1, "DistillConfig: threads must be positive");
  }

  /// ce | ce+kd | ce+gtd | union
  void set_loss(const std::string& variant) {
    w_ce = 1.0;
    if (variant == "ce") {
      w_kd = w_gtd = 0.0;
    } else if (variant == "ce+kd") {
      w_kd = 1.0;
      w_gtd = 0.0;
    } else if (variant == "ce+gtd") {
      w_kd = 0.0;
      w_gtd = 1.0;
    } else if (variant == "union") {
      w_kd = w_gtd = 1.0;
    } else {
      throw ContractViolation("unknown loss variant '" + variant + "'");
    }
  }
};

/// GTD between student node embeddings (LD-local rows) and constant teacher
/// embeddings (HD-local rows, matched through part.v_l).
inline Var gtd_loss(Var student_emb, const Tensor& teacher_emb, const PairSets& pairs, const NodePartition& part,
                    const DistillConfig& cfg) {
  for (auto [i, j] : pairs.positives) require(i < part.v_l.size() && j < part.v_l.size(), "gtd_loss: pair out of range");
  for (auto [i, j] : pairs.negatives) require(i < part.v_l.size() && j < part.v_l.size(), "gtd_loss: pair out of range");
  const auto zt_pos = pair_kernel_values(teacher_emb, pairs.positives, cfg.kernel, &part.v_l);
  const auto zt_neg = pair_kernel_values(teacher_emb, pairs.negatives, cfg.kernel, &part.v_l);
  if (pairs.positives.empty()) return student_emb.tape->constant(Tensor::scalar(0.0));
  Var zs_pos = ad::pair_kernel(student_emb, pairs.positives, cfg.kernel);
  std::optional<Var> zs_neg;
  if (!pairs.negatives.empty()) zs_neg = ad::pair_kernel(student_emb, pairs.negatives, cfg.kernel);
  return ad::gtd_from_z(zs_pos, zt_pos, zs_neg, zt_neg, cfg.eps);
}

/// T^2 * KL(softmax(student/T) || softmax(teacher/T)) for one sample.
inline double logits_distill(std::span<const double> student, std::span<const double> teacher, double T) {
  require(student.size() == teacher.size(), "logits_distill: class count mismatch");
  require(T > 0, "logits_distill: temperature must be positive");
  std::vector<double> s(student.begin(), student.end()), t(teacher.begin(), teacher.end());
  for (double& v : s) v /= T;
  for (double& v : t) v /= T;
  return T * T * kl_div(softmax(s), softmax(t));
}

namespace ad {

inline Var logits_distill(Var student_logits, const std::vector<double>& teacher_logits, double T) {
  require(student_logits.rows() == 1 && student_logits.cols() == teacher_logits.size(),
          "logits_distill: class count mismatch");
  require(T > 0, "logits_distill: temperature must be positive");
  std::vector<double> t(teacher_logits);
  for (double& v : t) v /= T;
  Var p = row_softmax(scale(student_logits, 1.0 / T));
  return scale(kl_div(p, student_logits.tape->constant(Tensor::row(softmax(t)))), T * T);
}

}  // namespace ad

inline double finetune_loss(double ce, double kd, double gtd, const DistillConfig& w) {
  return w.w_ce * ce + w.w_kd * kd + w.w_gtd * gtd;
}

/// Mann-Whitney AUROC with midranks for ties.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), "auroc: length mismatch");
  std::size_t npos = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, "auroc: labels must be binary");
    npos += l == 1;
  }
  const std::size_t nneg = labels.size() - npos;
  require(npos > 0 && nneg > 0, "auroc: both classes must be present");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t)
      if (labels[idx[t]] == 1) rank_sum += mid;
    i = j + 1;
  }
  const double np = static_cast<double>(npos), nn = static_cast<double>(nneg);
  return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

// ---------------------------------------------------------------------------
// Fine-tuning loop

struct SubjectSplit {
  std::vector<std::size_t> train, val, test;
};

/// Sample indices split by subject, stratified by label, in proportions
/// train/val/test = 0.6/0.2/0.2 (at least one subject per split per class when possible).
inline SubjectSplit split_by_subject(const std::vector<EegGraph>& graphs, std::uint64_t seed) {
  std::map<int, std::vector<std::string>> by_label;
  std::map<std::string, std::vector<std::size_t>> samples;
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    require(graphs[i].label.has_value(), [&] { return "split_by_subject: unlabeled sample " + std::to_string(i); });
    auto& list = samples[graphs[i].subject_id];
    if (list.empty()) by_label[*graphs[i].label].push_back(graphs[i].subject_id);
    list.push_back(i);
  }
  SubjectSplit sp;
  Rng rng(seed);
  for (auto& [label, subjects] : by_label) {
    const auto perm = rng.derive(static_cast<std::uint64_t>(label) + 7).permutation(subjects.size());
    const std::size_t n = subjects.size();
    std::size_t n_test = n >= 3 ? std::max<std::size_t>(1, n / 5) : 0;
    std::size_t n_val = n >= 3 ? std::max<std::size_t>(1, n / 5) : 0;
    for (std::size_t r = 0; r < n; ++r) {
      const auto& subj = subjects[perm[r]];
      auto& dst = r < n_test ? sp.test : r < n_test + n_val ? sp.val : sp.train;
      dst.insert(dst.end(), samples[subj].begin(), samples[subj].end());
    }
  }
  for (auto* v : {&sp.train, &sp.val, &sp.test}) std::sort(v->begin(), v->end());
  return sp;
}

/// Frozen teacher outputs on one HD graph.
struct TeacherView {
  std::vector<double> logits;
  Tensor node_emb;
  Tensor learned_adjacency;
};

inline TeacherView teacher_view(const ParamSet& params, const EncoderConfig& ec, const EegGraph& g) {
  Tape tape;
  ParamBinder bind(tape, params, false);
  auto out = encode(bind, ec, unmasked(g));
  Var logits = classify(bind, out.node_emb);
  return {logits.value().values, out.node_emb.value(), std::move(out.learned_adjacency)};
}

struct FinetuneComponents {
  double ce = 0, kd = 0, gtd = 0, total = 0;
  /// Value of the differentiated scalar as evaluated on the tape (training steps only).
  double objective = 0;
};

struct EvalMetrics {
  FinetuneComponents loss;
  double acc = 0, auroc = 0.5;
};

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  EvalMetrics m;
};

/// Samples seen by a classifier: the graph it consumes plus, when distilling,
/// the partition linking it to its HD parent and the teacher's view of that parent.
struct FinetuneSample {
  const EegGraph* graph = nullptr;
  const NodePartition* partition = nullptr;
  const TeacherView* teacher = nullptr;
};

namespace detail {

struct FtSampleResult {
  FinetuneComponents loss;
  double score = 0;
  std::size_t pred = 0;
  NamedGrads grads;
};

inline bool trainable_name(const std::string& name, bool frozen) {
  return name.starts_with("cls.") || (!frozen && name.starts_with("enc."));
}

inline FtSampleResult finetune_sample(const ParamSet& params, const EncoderConfig& ec, const FinetuneSample& s,
                                      const DistillConfig& cfg, bool with_grad, double weight) {
  require(s.graph->label.has_value(), "finetune: unlabeled sample");
  const bool frozen = cfg.frozen;
  Tape tape;
  ParamBinder bind(tape, params, [&](const std::string& n) { return with_grad && trainable_name(n, frozen); });
  auto out = encode(bind, ec, unmasked(*s.graph));
  Var logits = classify(bind, out.node_emb);
  const auto label = static_cast<std::size_t>(*s.graph->label);
  Var ce = ad::cross_entropy(logits, label);
  std::vector<Var> terms{ad::scale(ce, cfg.w_ce)};
  FtSampleResult r;
  r.loss.ce = cfg.w_ce * ce.item();
  if (cfg.w_kd != 0.0) {
    require(s.teacher != nullptr, "finetune: missing HD parent for distillation");
    Var kd = ad::logits_distill(logits, s.teacher->logits, cfg.temperature);
    terms.push_back(ad::scale(kd, cfg.w_kd));
    r.loss.kd = cfg.w_kd * kd.item();
  }
  if (cfg.w_gtd != 0.0) {
    require(s.teacher != nullptr && s.partition != nullptr, "finetune: missing HD parent for distillation");
    const auto pairs = select_pairs(s.teacher->learned_adjacency, out.learned_adjacency, *s.partition, cfg.theta);
    Var gtd = gtd_loss(out.node_emb, s.teacher->node_emb, pairs, *s.partition, cfg);
    terms.push_back(ad::scale(gtd, cfg.w_gtd));
    r.loss.gtd = cfg.w_gtd * gtd.item();
  }
  r.loss.total = r.loss.ce + r.loss.kd + r.loss.gtd;
  const auto& lv = logits.value().values;
  const auto p = softmax(lv);
  r.score = p.size() > 1 ? p[1] : p[0];
  r.pred = static_cast<std::size_t>(std::max_element(lv.begin(), lv.end()) - lv.begin());
  if (with_grad) {
    Var objective = ad::add_all(terms);
    r.loss.objective = objective.item();
    auto g = tape.backward(ad::scale(objective, weight));
    r.grads = collect_grads(params, g, [frozen](const std::string& n) { return trainable_name(n, frozen); });
  }
  return r;
}

inline EvalMetrics summarize(const std::vector<FtSampleResult>& rs, const std::vector<FinetuneSample>& samples,
                             const std::vector<std::size_t>& idx) {
  EvalMetrics m;
  if (idx.empty()) return m;
  std::vector<double> scores;
  std::vector<int> labels;
  double correct = 0;
  for (std::size_t t = 0; t < idx.size(); ++t) {
    const auto& r = rs[t];
    const int label = *samples[idx[t]].graph->label;
    m.loss.ce += r.loss.ce;
    m.loss.kd += r.loss.kd;
    m.loss.gtd += r.loss.gtd;
    correct += static_cast<int>(r.pred) == label;
    scores.push_back(r.score);
    labels.push_back(label);
  }
  const double n = static_cast<double>(idx.size());
  m.loss.ce /= n;
  m.loss.kd /= n;
  m.loss.gtd /= n;
  m.loss.total = m.loss.ce + m.loss.kd + m.loss.gtd;
  m.acc = correct / n;
  const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
  m.auroc = both ? auroc(scores, labels) : 0.5;
  return m;
}

}  // namespace detail

/// Loss, accuracy and AUROC of `params` on the listed samples; no updates.
inline EvalMetrics evaluate(const ParamSet& params, const EncoderConfig& ec, const std::vector<FinetuneSample>& samples,
                            const std::vector<std::size_t>& idx, const DistillConfig& cfg) {
  std::vector<detail::FtSampleResult> rs(idx.size());
  detail::parallel_for(idx.size(), cfg.threads, [&](std::size_t t) {
    rs[t] = detail::finetune_sample(params, ec, samples[idx[t]], cfg, false, 1.0);
  });
  return detail::summarize(rs, samples, idx);
}

struct TrainOutcome {
  ParamSet params;
  std::vector<MetricsRow> rows;
  std::vector<FinetuneComponents> step_losses;
  EvalMetrics test;
  std::size_t best_epoch = 0;
  std::size_t trainable_parameters = 0;
};

/// Mini-batch Adam on the weighted CE/KD/GTD objective with early stopping on
/// validation CE; the returned parameters are those of the best epoch.
inline TrainOutcome train_classifier(ParamSet params, const EncoderConfig& ec, const std::vector<FinetuneSample>& samples,
                                     const SubjectSplit& split, const DistillConfig& cfg, Rng rng) {
  cfg.validate();
  require(!split.train.empty(), "train_classifier: empty training split");
  TrainOutcome out;
  for (const auto& e : params.entries())
    if (detail::trainable_name(e.name, cfg.frozen)) out.trainable_parameters += e.tensor.size();
  AdamState opt{cfg.adam, {}, {}, 0};
  const auto& val_idx = split.val.empty() ? split.train : split.val;
  double best = INFINITY;
  std::size_t since_best = 0;
  ParamSet best_params = params;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto perm = rng.derive(epoch).permutation(split.train.size());
    std::vector<detail::FtSampleResult> train_rs(split.train.size());
    std::vector<std::size_t> order(split.train.size());
    for (std::size_t b = 0; b < perm.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(perm.size(), b + cfg.batch_size);
      const double w = 1.0 / static_cast<double>(e - b);
      detail::parallel_for(e - b, cfg.threads, [&](std::size_t t) {
        train_rs[b + t] = detail::finetune_sample(params, ec, samples[split.train[perm[b + t]]], cfg, true, w);
      });
      NamedGrads g;
      FinetuneComponents step;
      for (std::size_t t = b; t < e; ++t) {
        order[t] = split.train[perm[t]];
        accumulate(g, train_rs[t].grads);
        train_rs[t].grads.clear();
        step.ce += w * train_rs[t].loss.ce;
        step.kd += w * train_rs[t].loss.kd;
        step.gtd += w * train_rs[t].loss.gtd;
        step.total += w * train_rs[t].loss.total;
        step.objective += w * train_rs[t].loss.objective;
      }
      out.step_losses.push_back(step);
      adam_step(params, g, opt);
    }
    out.rows.push_back({epoch, "train", detail::summarize(train_rs, samples, order)});
    const auto val = evaluate(params, ec, samples, val_idx, cfg);
    out.rows.push_back({epoch, "val", val});
    if (val.loss.ce < best) {
      best = val.loss.ce;
      best_params = params;
      out.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  out.params = std::move(best_params);
  if (!split.test.empty()) {
    out.test = evaluate(out.params, ec, samples, split.test, cfg);
    out.rows.push_back({out.best_epoch, "test", out.test});
  }
  return out;
}

/// HD graphs with their LD reductions on a fixed keep-set.
struct FinetuneData {
  std::vector<EegGraph> hd, ld;
  std::vector<NodePartition> partitions;
};

inline FinetuneData make_finetune_data(std::vector<EegGraph> hd, const std::vector<std::size_t>& keep) {
  FinetuneData d;
  d.hd = std::move(hd);
  for (const auto& g : d.hd) {
    auto [l, p] = reduce_density(g, local_indices(g, keep));
    d.ld.push_back(std::move(l));
    d.partitions.push_back(std::move(p));
  }
  return d;
}

struct FinetuneResult {
  ParamSet student, teacher;
  TrainOutcome student_run, teacher_run;
};

/// Fine-tunes the teacher on HD graphs with CE only, freezes it, then trains
/// the student on the LD graphs with the configured distillation losses.
inline FinetuneResult run_finetune(const Checkpoint& teacher, const Checkpoint& student, const FinetuneData& data,
                                   const DistillConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(teacher.config.in_dim == student.config.in_dim, "run_finetune: teacher/student feature dims differ");
  require(!data.hd.empty(), "run_finetune: empty dataset");
  const auto split = split_by_subject(data.hd, seed);
  Rng rng(seed);
  FinetuneResult res;
  const bool distill = cfg.w_kd != 0.0 || cfg.w_gtd != 0.0;
  std::vector<TeacherView> views;
  if (distill) {
    DistillConfig tcfg = cfg;
    tcfg.set_loss("ce");
    tcfg.frozen = false;
    std::vector<FinetuneSample> hd_samples;
    for (const auto& g : data.hd) hd_samples.push_back({&g, nullptr, nullptr});
    res.teacher_run = train_classifier(teacher.params, teacher.config, hd_samples, split, tcfg, rng.derive(1));
    res.teacher = res.teacher_run.params;
    views.resize(data.hd.size());
    detail::parallel_for(data.hd.size(), cfg.threads,
                         [&](std::size_t i) { views[i] = teacher_view(res.teacher, teacher.config, data.hd[i]); });
  }
  std::vector<FinetuneSample> ld_samples;
  for (std::size_t i = 0; i < data.ld.size(); ++i)
    ld_samples.push_back({&data.ld[i], &data.partitions[i], distill ? &views[i] : nullptr});
  res.student_run = train_classifier(student.params, student.config, ld_samples, split, cfg, rng.derive(2));
  res.student = res.student_run.params;
  return res;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics file " + path);
  out << "epoch,split,ce,kd,gtd,total,acc,auroc\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << r.split << ',' << format_number(r.m.loss.ce) << ',' << format_number(r.m.loss.kd) << ','
        << format_number(r.m.loss.gtd) << ',' << format_number(r.m.loss.total) << ',' << format_number(r.m.acc) << ','
        << format_number(r.m.auroc) << '\n';
  if (!out) throw IoError("failed writing metrics file " + path);
}

inline nlohmann::json mean_std(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(std::max<std::size_t>(1, v.size()));
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  s = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
  return {{"mean", m}, {"std", s}, {"values", v}};
}

}  // namespace disgcmae
