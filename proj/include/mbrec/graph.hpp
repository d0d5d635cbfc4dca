#pragma once

// Per-behavior user-item bipartite graphs and normalized linear propagation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mbrec/binary_io.hpp"
#include "mbrec/data.hpp"
#include "mbrec/errors.hpp"
#include "mbrec/matrix.hpp"

namespace mbrec {

/// Binary interaction matrix of one behavior: a sorted set of (user, item).
struct BehaviorMatrix {
  std::uint32_t behavior = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> entries;
};

inline BehaviorMatrix build_interaction_matrix(const EventLog& train, std::uint32_t behavior) {
  if (behavior >= train.behavior_count())
    throw ContractViolation("build_interaction_matrix: behavior id out of range");
  BehaviorMatrix m{behavior, train.user_count, train.item_count, {}};
  for (const auto& e : train.events)
    if (e.behavior == behavior) m.entries.emplace_back(e.user, e.item);
  std::sort(m.entries.begin(), m.entries.end());
  m.entries.erase(std::unique(m.entries.begin(), m.entries.end()), m.entries.end());
  return m;
}

/// Compressed sparse rows with one coefficient per stored entry.
struct Csr {
  std::vector<std::uint64_t> offsets{0};
  std::vector<std::uint32_t> index;
  std::vector<double> coeff;

  std::size_t row_count() const { return offsets.size() - 1; }
  std::size_t degree(std::size_t r) const { return offsets[r + 1] - offsets[r]; }
  std::span<const std::uint32_t> neighbors(std::size_t r) const {
    return {index.data() + offsets[r], degree(r)};
  }
  std::span<const double> weights(std::size_t r) const { return {coeff.data() + offsets[r], degree(r)}; }

  friend bool operator==(const Csr&, const Csr&) = default;
};

/// Normalized bipartite adjacency. Edge (u,i) carries
/// 1 / (sqrt(deg u) * sqrt(deg i)) in both directions.
struct BehaviorGraph {
  std::uint32_t behavior = 0;
  std::uint32_t user_count = 0;
  std::uint32_t item_count = 0;
  Csr user_adj;  // user -> items
  Csr item_adj;  // item -> users, same coefficients
  std::vector<std::uint32_t> user_degree;
  std::vector<std::uint32_t> item_degree;

  std::size_t edge_count() const { return user_adj.index.size(); }

  friend bool operator==(const BehaviorGraph&, const BehaviorGraph&) = default;
};

namespace detail {

// Builds both CSR directions from a row-sorted edge list and coefficients.
inline void fill_adjacency(BehaviorGraph& g, const std::vector<std::pair<std::uint32_t, std::uint32_t>>& edges,
                           const std::vector<double>& coeff) {
  g.user_adj = Csr{};
  g.item_adj = Csr{};
  g.user_adj.offsets.assign(g.user_count + 1, 0);
  g.item_adj.offsets.assign(g.item_count + 1, 0);
  for (const auto& [u, i] : edges) {
    ++g.user_adj.offsets[u + 1];
    ++g.item_adj.offsets[i + 1];
  }
  for (std::size_t r = 0; r < g.user_count; ++r) g.user_adj.offsets[r + 1] += g.user_adj.offsets[r];
  for (std::size_t r = 0; r < g.item_count; ++r) g.item_adj.offsets[r + 1] += g.item_adj.offsets[r];
  g.user_adj.index.resize(edges.size());
  g.user_adj.coeff.resize(edges.size());
  g.item_adj.index.resize(edges.size());
  g.item_adj.coeff.resize(edges.size());
  std::vector<std::uint64_t> ucur(g.user_adj.offsets.begin(), g.user_adj.offsets.end() - 1);
  std::vector<std::uint64_t> icur(g.item_adj.offsets.begin(), g.item_adj.offsets.end() - 1);
  // edges sorted by (user, item) so both directions end up index-sorted.
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto [u, i] = edges[e];
    g.user_adj.index[ucur[u]] = i;
    g.user_adj.coeff[ucur[u]++] = coeff[e];
    g.item_adj.index[icur[i]] = u;
    g.item_adj.coeff[icur[i]++] = coeff[e];
  }
}

}  // namespace detail

inline BehaviorGraph build_behavior_graph(const BehaviorMatrix& m) {
  BehaviorGraph g;
  g.behavior = m.behavior;
  g.user_count = m.rows;
  g.item_count = m.cols;
  g.user_degree.assign(m.rows, 0);
  g.item_degree.assign(m.cols, 0);
  for (const auto& [u, i] : m.entries) {
    if (u >= m.rows || i >= m.cols) throw ContractViolation("build_behavior_graph: entry out of range");
    ++g.user_degree[u];
    ++g.item_degree[i];
  }
  std::vector<double> coeff(m.entries.size());
  for (std::size_t e = 0; e < m.entries.size(); ++e) {
    const auto [u, i] = m.entries[e];
    coeff[e] = 1.0 / (std::sqrt(double(g.user_degree[u])) * std::sqrt(double(g.item_degree[i])));
  }
  auto edges = m.entries;
  if (!std::is_sorted(edges.begin(), edges.end())) {
    // keep coefficients attached while sorting
    std::vector<std::size_t> order(edges.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return edges[a] < edges[b]; });
    std::vector<std::pair<std::uint32_t, std::uint32_t>> se(edges.size());
    std::vector<double> sc(edges.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
      se[k] = edges[order[k]];
      sc[k] = coeff[order[k]];
    }
    edges = std::move(se);
    coeff = std::move(sc);
  }
  detail::fill_adjacency(g, edges, coeff);
  return g;
}

/// Convenience: one graph per behavior of the training log, in behavior order.
inline std::vector<BehaviorGraph> build_graphs(const EventLog& train) {
  std::vector<BehaviorGraph> graphs;
  graphs.reserve(train.behavior_count());
  for (std::uint32_t b = 0; b < train.behavior_count(); ++b)
    graphs.push_back(build_behavior_graph(build_interaction_matrix(train, b)));
  return graphs;
}

namespace detail {

// dst.row(r) = sum_k coeff[k] * src.row(index[k]), accumulated in CSR order.
template <typename Real>
void spmm(const Csr& adj, const Matrix<Real>& src, Matrix<Real>& dst) {
  const std::size_t d = src.cols();
  dst.fill(Real{0});
  for (std::size_t r = 0; r < adj.row_count(); ++r) {
    auto out = dst.row(r);
    const auto nb = adj.neighbors(r);
    const auto w = adj.weights(r);
    for (std::size_t k = 0; k < nb.size(); ++k) {
      const auto in = src.row(nb[k]);
      const Real c = static_cast<Real>(w[k]);
      for (std::size_t j = 0; j < d; ++j) out[j] += c * in[j];
    }
  }
}

template <typename Real>
NodeEmbeddings<Real> alternate_layers(const BehaviorGraph& g, const Matrix<Real>& users,
                                      const Matrix<Real>& items, unsigned layers, const char* who) {
  if (layers == 0) throw ContractViolation(std::string(who) + ": layers must be >= 1");
  if (users.rows() != g.user_count || items.rows() != g.item_count || users.cols() != items.cols())
    throw ContractViolation(std::string(who) + ": embedding shapes do not match graph");
  const std::size_t d = users.cols();
  NodeEmbeddings<Real> cur{users, items};
  NodeEmbeddings<Real> next{Matrix<Real>(g.user_count, d), Matrix<Real>(g.item_count, d)};
  for (unsigned l = 0; l < layers; ++l) {
    spmm(g.user_adj, cur.items, next.users);
    spmm(g.item_adj, cur.users, next.items);
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace detail

/// Applies `layers` rounds of normalized neighbor aggregation. Both sides of
/// a round read the previous round's state; only the last round is returned.
template <typename Real>
NodeEmbeddings<Real> propagate(const BehaviorGraph& g, const Matrix<Real>& users, const Matrix<Real>& items,
                               unsigned layers) {
  return detail::alternate_layers(g, users, items, layers, "propagate");
}

/// Vector-Jacobian product of propagate. One round maps (x_u, x_i) to
/// (A x_i, A^T x_u), a symmetric block operator, so the adjoint of L rounds
/// is L rounds of the same operator.
template <typename Real>
NodeEmbeddings<Real> propagate_adjoint(const BehaviorGraph& g, const Matrix<Real>& grad_users,
                                       const Matrix<Real>& grad_items, unsigned layers) {
  return detail::alternate_layers(g, grad_users, grad_items, layers, "propagate_adjoint");
}

/// Graph with some nodes removed. Surviving coefficients are rescaled by
/// 1/(1-p) and degrees are those of the base graph.
struct DroppedGraph {
  BehaviorGraph graph;
  std::vector<char> user_kept;
  std::vector<char> item_kept;
  double rescale = 1.0;
};

inline void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p < 1.0))
    throw ConfigError(std::string(what) + ": probability must be in [0, 1), got " + std::to_string(p));
}

template <typename Urbg>
DroppedGraph node_dropout(const BehaviorGraph& g, double p, Urbg& rng) {
  check_probability(p, "node_dropout");
  DroppedGraph out;
  out.rescale = 1.0 / (1.0 - p);
  out.user_kept.assign(g.user_count, 1);
  out.item_kept.assign(g.item_count, 1);
  if (p > 0.0) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (auto& k : out.user_kept) k = unif(rng) >= p;
    for (auto& k : out.item_kept) k = unif(rng) >= p;
  }
  out.graph.behavior = g.behavior;
  out.graph.user_count = g.user_count;
  out.graph.item_count = g.item_count;
  out.graph.user_degree = g.user_degree;
  out.graph.item_degree = g.item_degree;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  std::vector<double> coeff;
  for (std::uint32_t u = 0; u < g.user_count; ++u) {
    if (!out.user_kept[u]) continue;
    const auto nb = g.user_adj.neighbors(u);
    const auto w = g.user_adj.weights(u);
    for (std::size_t k = 0; k < nb.size(); ++k) {
      if (!out.item_kept[nb[k]]) continue;
      edges.emplace_back(u, nb[k]);
      coeff.push_back(w[k] * out.rescale);
    }
  }
  detail::fill_adjacency(out.graph, edges, coeff);
  return out;
}

// ---------------------------------------------------------------------------
// Binary cache: u64 M, u64 N, u64 E, u32 behavior, then user-side CSR
// (M+1 u64 offsets, E u32 item ids, E f64 coefficients). Little-endian.

inline void write_graph_cache(std::ostream& out, const BehaviorGraph& g) {
  binary::put_u64(out, g.user_count);
  binary::put_u64(out, g.item_count);
  binary::put_u64(out, g.edge_count());
  binary::put_u32(out, g.behavior);
  for (auto o : g.user_adj.offsets) binary::put_u64(out, o);
  for (auto i : g.user_adj.index) binary::put_u32(out, i);
  for (auto c : g.user_adj.coeff) binary::put_f64(out, c);
  if (!out) throw Error("graph cache: write failed");
}

inline BehaviorGraph read_graph_cache(std::istream& in) {
  BehaviorGraph g;
  const auto m = binary::get_u64(in);
  const auto n = binary::get_u64(in);
  const auto e = binary::get_u64(in);
  g.behavior = binary::get_u32(in);
  if (m > UINT32_MAX || n > UINT32_MAX || e > m * n) throw DataError("graph cache: bad header");
  g.user_count = static_cast<std::uint32_t>(m);
  g.item_count = static_cast<std::uint32_t>(n);
  std::vector<std::uint64_t> offsets(m + 1);
  for (auto& o : offsets) o = binary::get_u64(in);
  if (offsets.front() != 0 || offsets.back() != e || !std::is_sorted(offsets.begin(), offsets.end()))
    throw DataError("graph cache: inconsistent offsets");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges(e);
  std::vector<double> coeff(e);
  for (std::uint32_t u = 0; u < m; ++u)
    for (auto k = offsets[u]; k < offsets[u + 1]; ++k) edges[k].first = u;
  for (auto& ed : edges) {
    ed.second = binary::get_u32(in);
    if (ed.second >= n) throw DataError("graph cache: item id out of range");
  }
  for (auto& c : coeff) c = binary::get_f64(in);
  g.user_degree.assign(m, 0);
  g.item_degree.assign(n, 0);
  for (const auto& [u, i] : edges) {
    ++g.user_degree[u];
    ++g.item_degree[i];
  }
  detail::fill_adjacency(g, edges, coeff);
  return g;
}

}  // namespace mbrec
