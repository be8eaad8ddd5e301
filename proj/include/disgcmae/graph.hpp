// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "disgcmae/rng.hpp"
#include "disgcmae/tensor.hpp"

namespace disgcmae {

enum class DensityTier { HD, MD, LD };

inline std::string to_string(DensityTier t) {
  switch (t) {
    case DensityTier::HD: return "HD";
    case DensityTier::MD: return "MD";
    case DensityTier::LD: return "LD";
  }
  throw ContractViolation("unknown density tier");
}

inline DensityTier tier_from_string(const std::string& s) {
  if (s == "HD") return DensityTier::HD;
  if (s == "MD") return DensityTier::MD;
  if (s == "LD") return DensityTier::LD;
  throw ContractViolation("unknown density tier '" + s + "'");
}

/// G = (V, A, X): node features x (n x d), adjacency a (n x n), and the
/// global electrode index of every node.
struct EegGraph {
  Tensor x;
  Tensor a;
  std::vector<std::size_t> node_ids;
  DensityTier tier = DensityTier::HD;
  std::optional<int> label;
  std::string subject_id;

  std::size_t n() const { return x.rows(); }
  std::size_t d() const { return x.cols(); }

  void validate() const {
    const std::size_t nn = n();
    require(a.rows() == nn && a.cols() == nn, [&] { return "EegGraph: adjacency is " + shape_str(a.shape) +
                                                  " for " + std::to_string(nn) + " nodes"; });
    require(node_ids.size() == nn, "EegGraph: node_ids length mismatch");
    std::set<std::size_t> seen(node_ids.begin(), node_ids.end());
    require(seen.size() == nn, "EegGraph: node_ids not distinct");
    for (std::size_t i = 0; i < nn; ++i) {
      require(a(i, i) == 0.0, "EegGraph: nonzero adjacency diagonal");
      for (std::size_t j = 0; j < nn; ++j) {
        require(a(i, j) >= 0.0, "EegGraph: negative adjacency entry");
        require(a(i, j) == a(j, i), "EegGraph: adjacency not symmetric");
      }
    }
  }
};

/// V^h split into retained (v_l, in LD node order) and deleted (v_d) sets.
/// Indices are local to the HD graph.
struct NodePartition {
  std::vector<std::size_t> v_h;
  std::vector<std::size_t> v_l;
  std::vector<std::size_t> v_d;

  bool is_identity() const { return v_d.empty(); }

  void validate() const {
    require(v_l.size() <= v_h.size(), "NodePartition: more retained than total nodes");
    std::set<std::size_t> h(v_h.begin(), v_h.end()), l(v_l.begin(), v_l.end()),
        d(v_d.begin(), v_d.end());
    require(l.size() == v_l.size() && d.size() == v_d.size(), "NodePartition: duplicates");
    for (auto i : v_d) require(!l.contains(i), "NodePartition: v_d and v_l intersect");
    std::set<std::size_t> u = l;
    u.insert(d.begin(), d.end());
    require(u == h, "NodePartition: v_d and v_l do not cover v_h");
  }
};

/// Vertex-induced subgraph on `keep` plus the node bookkeeping.
inline std::pair<EegGraph, NodePartition> reduce_density(const EegGraph& g_h,
                                                         const std::vector<std::size_t>& keep,
                                                         DensityTier tier = DensityTier::LD) {
  const std::size_t m = g_h.n();
  require(!keep.empty(), "reduce_density: empty keep set");
  std::vector<char> kept(m, 0);
  for (auto k : keep) {
    require(k < m, [&] { return "reduce_density: keep index " + std::to_string(k) + " out of range"; });
    require(!kept[k], [&] { return "reduce_density: duplicated keep index " + std::to_string(k); });
    kept[k] = 1;
  }
  const std::size_t n = keep.size(), d = g_h.d();
  EegGraph g;
  g.x = Tensor::zeros(n, d);
  g.a = Tensor::zeros(n, n);
  g.tier = keep.size() == m ? g_h.tier : tier;
  g.label = g_h.label;
  g.subject_id = g_h.subject_id;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) g.x(i, c) = g_h.x(keep[i], c);
    for (std::size_t j = 0; j < n; ++j) g.a(i, j) = g_h.a(keep[i], keep[j]);
    g.node_ids.push_back(g_h.node_ids[keep[i]]);
  }
  NodePartition p;
  for (std::size_t i = 0; i < m; ++i) {
    p.v_h.push_back(i);
    if (!kept[i]) p.v_d.push_back(i);
  }
  p.v_l = keep;
  return {std::move(g), std::move(p)};
}

enum class ViewKind { Query, Key, ReconstructedQuery, ReconstructedKey };
enum class Origin { Teacher, Student };

inline std::string to_string(ViewKind k) {
  switch (k) {
    case ViewKind::Query: return "query";
    case ViewKind::Key: return "key";
    case ViewKind::ReconstructedQuery: return "reconstructed-query";
    case ViewKind::ReconstructedKey: return "reconstructed-key";
  }
  throw ContractViolation("unknown view kind");
}

using Edge = std::pair<std::size_t, std::size_t>;

/// One augmented or reconstructed variant of a sample.
struct GraphView {
  EegGraph graph;
  ViewKind kind = ViewKind::Query;
  std::uint64_t source_id = 0;
  Origin origin = Origin::Teacher;
  std::vector<std::size_t> dropped_nodes;
  std::vector<Edge> dropped_edges;

  /// Indicator over nodes: 1 where the node was dropped.
  std::vector<char> drop_indicator() const {
    std::vector<char> ind(graph.n(), 0);
    for (auto i : dropped_nodes) ind[i] = 1;
    return ind;
  }
};

namespace detail {

inline GraphView draw_view(const EegGraph& g, double node_ratio, double edge_ratio, Rng rng,
                           ViewKind kind, std::uint64_t source_id, Origin origin) {
  GraphView v;
  v.graph = g;
  v.kind = kind;
  v.source_id = source_id;
  v.origin = origin;
  const std::size_t n = g.n();
  Rng node_rng = rng.derive(1);
  Rng edge_rng = rng.derive(2);
  const auto n_drop = static_cast<std::size_t>(std::floor(node_ratio * static_cast<double>(n)));
  v.dropped_nodes = node_rng.sample_without_replacement(n, n_drop);
  for (auto i : v.dropped_nodes)
    for (std::size_t c = 0; c < g.d(); ++c) v.graph.x(i, c) = 0.0;
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (g.a(i, j) > 0.0) edges.emplace_back(i, j);
  const auto e_drop =
      static_cast<std::size_t>(std::floor(edge_ratio * static_cast<double>(edges.size())));
  for (auto e : edge_rng.sample_without_replacement(edges.size(), e_drop)) {
    const auto [i, j] = edges[e];
    v.graph.a(i, j) = 0.0;
    v.graph.a(j, i) = 0.0;
    v.dropped_edges.push_back(edges[e]);
  }
  return v;
}

}  // namespace detail

/// Two independent drop-based views (query, key) of one sample.
inline std::pair<GraphView, GraphView> augment(const EegGraph& g, double node_drop_ratio,
                                               double edge_drop_ratio, Rng rng,
                                               std::uint64_t source_id = 0,
                                               Origin origin = Origin::Teacher) {
  require(node_drop_ratio >= 0.0 && node_drop_ratio < 1.0, "augment: node ratio outside [0,1)");
  require(edge_drop_ratio >= 0.0 && edge_drop_ratio < 1.0, "augment: edge ratio outside [0,1)");
  return {detail::draw_view(g, node_drop_ratio, edge_drop_ratio, rng.derive(11), ViewKind::Query,
                            source_id, origin),
          detail::draw_view(g, node_drop_ratio, edge_drop_ratio, rng.derive(12), ViewKind::Key,
                            source_id, origin)};
}

/// A view whose dropped nodes carry the shared mask embedding.
struct MaskedGraph {
  EegGraph graph;
  std::vector<char> indicator;
  ViewKind kind = ViewKind::Query;
  std::uint64_t source_id = 0;
  Origin origin = Origin::Teacher;

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(indicator.begin(), indicator.end(), 1));
  }
};

inline MaskedGraph mask_graph(const GraphView& view, const std::vector<double>& mask_embedding) {
  require(mask_embedding.size() == view.graph.d(), [&] { return "mask_graph: mask embedding has length " + std::to_string(mask_embedding.size()) +
              ", features have " + std::to_string(view.graph.d()); });
  MaskedGraph mg{view.graph, view.drop_indicator(), view.kind, view.source_id, view.origin};
  for (auto i : view.dropped_nodes)
    for (std::size_t c = 0; c < mask_embedding.size(); ++c) mg.graph.x(i, c) = mask_embedding[c];
  return mg;
}

/// Unmasked wrapper: every node visible, provenance from the view.
inline MaskedGraph unmasked(const GraphView& view) {
  return {view.graph, std::vector<char>(view.graph.n(), 0), view.kind, view.source_id,
          view.origin};
}

inline MaskedGraph unmasked(const EegGraph& g, std::uint64_t source_id = 0) {
  return {g, std::vector<char>(g.n(), 0), ViewKind::Query, source_id, Origin::Teacher};
}

/// Partitions reconstructed graphs by the kind of view they came from.
inline std::pair<std::vector<GraphView>, std::vector<GraphView>> split_reconstructed(
    const std::vector<GraphView>& batch) {
  std::vector<GraphView> queries, keys;
  for (const auto& v : batch) {
    switch (v.kind) {
      case ViewKind::Query:
      case ViewKind::ReconstructedQuery:
        queries.push_back(v);
        queries.back().kind = ViewKind::ReconstructedQuery;
        break;
      case ViewKind::Key:
      case ViewKind::ReconstructedKey:
        keys.push_back(v);
        keys.back().kind = ViewKind::ReconstructedKey;
        break;
      default:
        throw ContractViolation("split_reconstructed: unknown view kind");
    }
  }
  return {std::move(queries), std::move(keys)};
}

/// n indices spread evenly over 0..m-1 (i * m / n).
inline std::vector<std::size_t> spread_keep_set(std::size_t m, std::size_t n) {
  require(n >= 1 && n <= m, "spread_keep_set: need 1 <= n <= m");
  std::vector<std::size_t> keep(n);
  for (std::size_t i = 0; i < n; ++i) keep[i] = i * m / n;
  return keep;
}

/// Montage keep-set file: a JSON array of global electrode indices.
inline std::vector<std::size_t> load_keep_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open keep-set file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed keep-set file " + path + ": " + e.what());
  }
  if (!j.is_array()) throw std::runtime_error("keep-set file " + path + " is not a JSON array");
  return j.get<std::vector<std::size_t>>();
}

/// Maps global electrode ids to positions in g (for keep-sets expressed
/// against the full montage).
inline std::vector<std::size_t> local_indices(const EegGraph& g,
                                              const std::vector<std::size_t>& global_ids) {
  std::vector<std::size_t> out;
  for (auto gid : global_ids) {
    auto it = std::find(g.node_ids.begin(), g.node_ids.end(), gid);
    require(it != g.node_ids.end(), [&] { return "keep-set electrode " + std::to_string(gid) +
                                        " not present in graph"; });
    out.push_back(static_cast<std::size_t>(it - g.node_ids.begin()));
  }
  return out;
}

}  // namespace disgcmae
