// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "disgcmae/autodiff.hpp"
#include "disgcmae/graph.hpp"
#include "disgcmae/optim.hpp"

namespace disgcmae {

enum class EncoderFamily { DGCNN, GFormer };

inline std::string to_string(EncoderFamily f) { return f == EncoderFamily::DGCNN ? "dgcnn" : "gformer"; }

inline EncoderFamily family_from_string(const std::string& s) {
  if (s == "dgcnn") return EncoderFamily::DGCNN;
  if (s == "gformer") return EncoderFamily::GFormer;
  throw ContractViolation("unknown encoder family '" + s + "'");
}

struct EncoderConfig {
  EncoderFamily family = EncoderFamily::DGCNN;
  std::string tier = "tiny";
  std::size_t layers = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  bool position_embedding = false;
  double dyn_threshold = 0.5;
  std::size_t contrastive_dim = 64;
  std::size_t in_dim = 8;
  std::size_t n_positions = 128;
  std::size_t n_classes = 2;
  // Projection head without activation or bias; only used by tests.
  bool linear_head = false;

  /// Table tiers: large = 8 layers / 128 dims / 8 heads, tiny = 4 / 64 / 4.
  /// Position embeddings go with the graph transformer.
  static EncoderConfig preset(EncoderFamily family, const std::string& tier) {
    EncoderConfig c;
    c.family = family;
    c.tier = tier;
    if (tier == "large") {
      c.layers = 8;
      c.hidden = 128;
      c.heads = 8;
    } else if (tier == "tiny") {
      c.layers = 4;
      c.hidden = 64;
      c.heads = 4;
    } else {
      throw ContractViolation("unknown encoder tier '" + tier + "'");
    }
    c.position_embedding = family == EncoderFamily::GFormer;
    return c;
  }

  void validate() const {
    require(layers >= 1 && hidden >= 1 && in_dim >= 1 && contrastive_dim >= 1,
            "EncoderConfig: dimensions must be positive");
    if (family == EncoderFamily::GFormer)
      require(heads >= 1 && hidden % heads == 0, [&] { return "EncoderConfig: heads (" + std::to_string(heads) + ") must divide hidden dim (" +
                  std::to_string(hidden) + ")"; });
    require(n_classes >= 2, "EncoderConfig: need at least two classes");
  }
};

/// Binds parameters of one ParamSet onto a tape, once each.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamSet& params, bool trainable)
      : tape_(tape), params_(params), trainable_([trainable](const std::string&) { return trainable; }) {}

  /// Only parameters accepted by `trainable` take part in backward().
  ParamBinder(Tape& tape, const ParamSet& params, std::function<bool(const std::string&)> trainable)
      : tape_(tape), params_(params), trainable_(std::move(trainable)) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = tape_.leaf(params_.at(name), trainable_(name));
    bound_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }
  const ParamSet& params() const { return params_; }

 private:
  Tape& tape_;
  const ParamSet& params_;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, Var> bound_;
};

namespace layer_names {
inline std::string gcn(std::size_t l, const char* p) { return "enc.gcn" + std::to_string(l) + "." + p; }
inline std::string blk(std::size_t l, const char* p) { return "enc.blk" + std::to_string(l) + "." + p; }
}  // namespace layer_names

/// Fresh parameters for encoder, mask embedding, projection head, decoder
/// and classifier.
inline ParamSet init_model(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet p;
  const std::size_t D = cfg.hidden, d = cfg.in_dim;
  p.add("mask", Tensor::zeros(1, d));
  if (cfg.family == EncoderFamily::DGCNN) {
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::size_t in = l == 0 ? d : D;
      p.add(layer_names::gcn(l, "w"), glorot(in, D, rng));
      p.add(layer_names::gcn(l, "b"), Tensor::zeros(1, D));
      p.add(layer_names::gcn(l, "p"), glorot(in, D, rng));
    }
  } else {
    p.add("enc.in.w", glorot(d, D, rng));
    p.add("enc.in.b", Tensor::zeros(1, D));
    if (cfg.position_embedding) {
      Tensor pos = Tensor::zeros(cfg.n_positions, D);
      for (double& v : pos.values) v = 0.02 * rng.normal();
      p.add("enc.pos", std::move(pos));
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (const char* w : {"wq", "wk", "wv", "wo"}) p.add(layer_names::blk(l, w), glorot(D, D, rng));
      p.add(layer_names::blk(l, "ln1.g"), Tensor::filled(1, D, 1.0));
      p.add(layer_names::blk(l, "ln1.b"), Tensor::zeros(1, D));
      p.add(layer_names::blk(l, "ffn.w1"), glorot(D, 2 * D, rng));
      p.add(layer_names::blk(l, "ffn.b1"), Tensor::zeros(1, 2 * D));
      p.add(layer_names::blk(l, "ffn.w2"), glorot(2 * D, D, rng));
      p.add(layer_names::blk(l, "ffn.b2"), Tensor::zeros(1, D));
      p.add(layer_names::blk(l, "ln2.g"), Tensor::filled(1, D, 1.0));
      p.add(layer_names::blk(l, "ln2.b"), Tensor::zeros(1, D));
    }
  }
  p.add("proj.w1", glorot(D, D, rng));
  p.add("proj.b1", Tensor::zeros(1, D));
  p.add("proj.w2", glorot(D, cfg.contrastive_dim, rng));
  p.add("proj.b2", Tensor::zeros(1, cfg.contrastive_dim));
  p.add("dec.w1", glorot(D, D, rng));
  p.add("dec.b1", Tensor::zeros(1, D));
  p.add("dec.w2", glorot(D, d, rng));
  p.add("dec.b2", Tensor::zeros(1, d));
  p.add("cls.w", glorot(D, cfg.n_classes, rng));
  p.add("cls.b", Tensor::zeros(1, cfg.n_classes));
  return p;
}

struct EdgeWeights {
  Var alpha;  // sigmoid scores, n x n
  Var a_dyn;  // alpha where alpha > threshold, else 0
};

/// alpha_ij = sigmoid((P x_i).(P x_j) / sqrt(D)); a_dyn keeps alpha above the
/// threshold. Gradients reach alpha only through retained entries.
inline EdgeWeights dynamic_edge_weights(Var x_emb, Var projection, double threshold) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(projection.cols()));
  Var u = ad::matmul(x_emb, projection);
  Var alpha = ad::sigmoid(ad::scale(ad::matmul_nt(u, u), inv));
  const Tensor& av = alpha.value();
  Tensor gate = Tensor::zeros(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) gate.values[i] = av.values[i] > threshold ? 1.0 : 0.0;
  return {alpha, ad::mul_const(alpha, gate)};
}

struct EncoderOutput {
  Var node_emb;
  /// Final-layer learned adjacency (values only): gated message weights for
  /// the GCN, head-averaged symmetrised attention for the transformer.
  Tensor learned_adjacency;
};

namespace detail {

inline Var input_features(ParamBinder& bind, const MaskedGraph& mg) {
  Var x = bind.tape().constant(mg.graph.x);
  if (mg.masked_count() == 0 || !bind.params().contains("mask")) return x;
  return ad::replace_rows(x, bind("mask"), mg.indicator);
}

}  // namespace detail

namespace ad {

/// Messages over directed edges (i <- j): m_i = norm_i * sum_j a_ij u_j with
/// a_ij = sigmoid(s_i . s_j * scale) kept only when above `threshold`.
/// Equivalent to the dense dynamic_edge_weights product restricted to the
/// edge list, without forming n x n matrices. `kept` receives a_ij per edge
/// (0 where gated out).
inline Var gated_edge_messages(Var s, Var u, const std::vector<Edge>& edges, const std::vector<double>& norm,
                               double scale, double threshold, std::vector<double>* kept = nullptr) {
  const std::size_t n = u.rows(), D = u.cols(), Ds = s.cols();
  require(s.rows() == n && norm.size() == n, "gated_edge_messages: shape mismatch");
  const auto& sv = s.value().values;
  const auto& uv = u.value().values;
  std::vector<double> a(edges.size(), 0.0);
  Tensor m = Tensor::zeros(n, D);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto [i, j] = edges[e];
    double dot = 0;
    for (std::size_t c = 0; c < Ds; ++c) dot += sv[i * Ds + c] * sv[j * Ds + c];
    const double alpha = 1.0 / (1.0 + std::exp(-dot * scale));
    if (!(alpha > threshold)) continue;
    a[e] = alpha;
    const double w = norm[i] * alpha;
    for (std::size_t c = 0; c < D; ++c) m.values[i * D + c] += w * uv[j * D + c];
  }
  if (kept) *kept = a;
  return s.tape->record(std::move(m), {s, u}, [s, u, edges, norm, scale, a, D, Ds](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& sv = t.value(s.id).values;
    const auto& uv = t.value(u.id).values;
    const bool need_s = t.requires_grad(s.id), need_u = t.requires_grad(u.id);
    std::vector<double>* gs = need_s ? &t.grad_buffer(s.id) : nullptr;
    std::vector<double>* gu = need_u ? &t.grad_buffer(u.id) : nullptr;
    for (std::size_t e = 0; e < edges.size(); ++e) {
      if (a[e] == 0.0) continue;
      const auto [i, j] = edges[e];
      const double* gi = &g[i * D];
      if (gu) {
        const double w = norm[i] * a[e];
        for (std::size_t c = 0; c < D; ++c) (*gu)[j * D + c] += w * gi[c];
      }
      if (gs) {
        double ga = 0;
        for (std::size_t c = 0; c < D; ++c) ga += gi[c] * uv[j * D + c];
        const double dz = norm[i] * ga * a[e] * (1.0 - a[e]) * scale;
        for (std::size_t c = 0; c < Ds; ++c) {
          (*gs)[i * Ds + c] += dz * sv[j * Ds + c];
          (*gs)[j * Ds + c] += dz * sv[i * Ds + c];
        }
      }
    }
  });
}

}  // namespace ad

/// Dynamic-adjacency GCN: per layer u = hW, m_i = sum_{j in N(i)} a_dyn_ij u_j / deg_i,
/// h' = relu(u + b + m). N(i) is the input-graph neighbourhood.
/// `x` supplies the node features, `g` the adjacency.
inline EncoderOutput gcn_forward(ParamBinder& bind, const EncoderConfig& cfg, Var x, const EegGraph& g) {
  require(cfg.family == EncoderFamily::DGCNN, "gcn_forward: config family is not dgcnn");
  require(x.cols() == cfg.in_dim, [&] { return "gcn_forward: feature dim " + std::to_string(x.cols()) +
                                      " != config in_dim " + std::to_string(cfg.in_dim); });
  const std::size_t n = x.rows();
  require(g.a.rows() == n && g.a.cols() == n, "gcn_forward: adjacency shape mismatch");
  std::vector<Edge> edges;
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t deg = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && g.a(i, j) > 0) {
        edges.emplace_back(i, j);
        ++deg;
      }
    norm[i] = 1.0 / static_cast<double>(std::max<std::size_t>(1, deg));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  Var h = x;
  std::vector<double> kept;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Var u = ad::matmul(h, bind(layer_names::gcn(l, "w")));
    Var sp = ad::matmul(h, bind(layer_names::gcn(l, "p")));
    Var msg = ad::gated_edge_messages(sp, u, edges, norm, scale, cfg.dyn_threshold, &kept);
    h = ad::relu(ad::add(ad::add_row(u, bind(layer_names::gcn(l, "b"))), msg));
  }
  Tensor learned = Tensor::zeros(n, n);
  for (std::size_t e = 0; e < edges.size(); ++e) learned(edges[e].first, edges[e].second) = kept[e];
  return {h, std::move(learned)};
}

inline EncoderOutput gcn_forward(ParamBinder& bind, const EncoderConfig& cfg, const MaskedGraph& mg) {
  return gcn_forward(bind, cfg, detail::input_features(bind, mg), mg.graph);
}

/// Graph transformer: projected input plus per-electrode position embedding,
/// then post-norm blocks of edge-restricted multi-head attention and a ReLU
/// feed-forward layer. `restrict_to_edges = false` lets every node attend to
/// every other node.
inline EncoderOutput gformer_forward(ParamBinder& bind, const EncoderConfig& cfg, Var x,
                                     const EegGraph& g, bool restrict_to_edges = true) {
  require(cfg.family == EncoderFamily::GFormer, "gformer_forward: config family is not gformer");
  cfg.validate();
  require(x.cols() == cfg.in_dim, "gformer_forward: feature dim mismatch");
  const std::size_t n = x.rows(), D = cfg.hidden, H = cfg.heads, dh = D / H;
  require(g.a.rows() == n && g.a.cols() == n && g.node_ids.size() == n,
          "gformer_forward: graph shape mismatch");
  std::vector<char> allowed;
  if (restrict_to_edges) {
    allowed.assign(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) allowed[i * n + j] = (i == j || g.a(i, j) > 0) ? 1 : 0;
  }
  Var h = ad::add_row(ad::matmul(x, bind("enc.in.w")), bind("enc.in.b"));
  if (cfg.position_embedding) {
    for (auto id : g.node_ids)
      require(id < cfg.n_positions, "gformer_forward: node id beyond position table");
    h = ad::add(h, ad::gather_rows(bind("enc.pos"), g.node_ids));
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor learned = Tensor::zeros(n, n);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Var q = ad::matmul(h, bind(layer_names::blk(l, "wq")));
    Var k = ad::matmul(h, bind(layer_names::blk(l, "wk")));
    Var v = ad::matmul(h, bind(layer_names::blk(l, "wv")));
    std::vector<Var> heads;
    const bool last = l + 1 == cfg.layers;
    for (std::size_t hd = 0; hd < H; ++hd) {
      Var qh = ad::slice_cols(q, hd * dh, dh);
      Var kh = ad::slice_cols(k, hd * dh, dh);
      Var vh = ad::slice_cols(v, hd * dh, dh);
      Var att = ad::row_softmax(ad::scale(ad::matmul_nt(qh, kh), inv), allowed);
      if (last)
        for (std::size_t i = 0; i < n * n; ++i) learned.values[i] += att.value().values[i] / static_cast<double>(H);
      heads.push_back(ad::matmul(att, vh));
    }
    Var attn = ad::matmul(H == 1 ? heads[0] : ad::concat_cols(heads), bind(layer_names::blk(l, "wo")));
    h = ad::layer_norm_rows(ad::add(h, attn), bind(layer_names::blk(l, "ln1.g")), bind(layer_names::blk(l, "ln1.b")));
    Var f = ad::relu(ad::add_row(ad::matmul(h, bind(layer_names::blk(l, "ffn.w1"))), bind(layer_names::blk(l, "ffn.b1"))));
    f = ad::add_row(ad::matmul(f, bind(layer_names::blk(l, "ffn.w2"))), bind(layer_names::blk(l, "ffn.b2")));
    h = ad::layer_norm_rows(ad::add(h, f), bind(layer_names::blk(l, "ln2.g")), bind(layer_names::blk(l, "ln2.b")));
  }
  Tensor sym = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym(i, j) = i == j ? 0.0 : 0.5 * (learned(i, j) + learned(j, i));
  return {h, std::move(sym)};
}

inline EncoderOutput gformer_forward(ParamBinder& bind, const EncoderConfig& cfg, const MaskedGraph& mg,
                                     bool restrict_to_edges = true) {
  return gformer_forward(bind, cfg, detail::input_features(bind, mg), mg.graph, restrict_to_edges);
}

inline EncoderOutput encode(ParamBinder& bind, const EncoderConfig& cfg, Var x, const EegGraph& g) {
  return cfg.family == EncoderFamily::DGCNN ? gcn_forward(bind, cfg, x, g) : gformer_forward(bind, cfg, x, g);
}

inline EncoderOutput encode(ParamBinder& bind, const EncoderConfig& cfg, const MaskedGraph& mg) {
  return encode(bind, cfg, detail::input_features(bind, mg), mg.graph);
}

/// Mean-pool, two-layer projection, unit L2 norm.
inline Var readout_project(ParamBinder& bind, const EncoderConfig& cfg, Var node_emb) {
  require(node_emb.rows() >= 1, "readout_project: empty graph");
  Var pooled = ad::mean_rows(node_emb);
  Var z;
  if (cfg.linear_head) {
    z = ad::matmul(ad::matmul(pooled, bind("proj.w1")), bind("proj.w2"));
  } else {
    z = ad::relu(ad::add_row(ad::matmul(pooled, bind("proj.w1")), bind("proj.b1")));
    z = ad::add_row(ad::matmul(z, bind("proj.w2")), bind("proj.b2"));
  }
  return ad::l2_normalize_rows(z);
}

/// Per-node two-layer map back to input features.
inline Var decode(ParamBinder& bind, Var node_emb) {
  Var z = ad::relu(ad::add_row(ad::matmul(node_emb, bind("dec.w1")), bind("dec.b1")));
  return ad::add_row(ad::matmul(z, bind("dec.w2")), bind("dec.b2"));
}

/// Mean-pool followed by a linear classifier; [1, n_classes] logits.
inline Var classify(ParamBinder& bind, Var node_emb) {
  return ad::add_row(ad::matmul(ad::mean_rows(node_emb), bind("cls.w")), bind("cls.b"));
}

/// key <- m * key + (1 - m) * query over every parameter.
inline void momentum_update(const ParamSet& query, ParamSet& key, double m) {
  require(m >= 0.0 && m <= 1.0, "momentum_update: momentum outside [0,1]");
  require(query.congruent(key), "momentum_update: parameter trees differ");
  auto qi = query.entries().begin();
  for (auto& e : key.entries()) {
    auto& kv = e.tensor.values;
    const auto& qv = (qi++)->tensor.values;
    if (m == 1.0) continue;
    if (m == 0.0) {
      kv = qv;
      continue;
    }
    for (std::size_t i = 0; i < kv.size(); ++i) kv[i] = m * kv[i] + (1.0 - m) * qv[i];
  }
}

/// Scalars in parameters whose name starts with "enc." or "cls." (what a
/// tuned fine-tune updates) or only "cls." (frozen).
inline std::size_t finetune_parameter_count(const ParamSet& p, bool frozen) {
  return frozen ? p.count("cls.") : p.count("enc.") + p.count("cls.");
}

}  // namespace disgcmae
