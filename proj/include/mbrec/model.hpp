#pragma once

// Learnable embeddings and the cascading residual forward pass.
//
// Block b takes the previous block's output e^{b-1}, propagates it over the
// behavior-b graph to get behavioral features e'^b, row-normalizes them and
// adds them back onto e^{b-1}. e^0 is the raw embedding table.

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mbrec/binary_io.hpp"
#include "mbrec/errors.hpp"
#include "mbrec/graph.hpp"
#include "mbrec/matrix.hpp"

namespace mbrec {

using Rng = std::mt19937_64;

/// P (users x d) and Q (items x d): the only trainable parameters.
struct EmbeddingTable {
  Matrix<double> users;
  Matrix<double> items;

  std::size_t dim() const noexcept { return users.cols(); }
  std::size_t parameter_count() const noexcept { return users.size() + items.size(); }

  template <typename Real = double>
  NodeEmbeddings<Real> as_nodes() const {
    if constexpr (std::is_same_v<Real, double>) {
      return {users, items};
    } else {
      return {matrix_cast<Real>(users), matrix_cast<Real>(items)};
    }
  }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

inline EmbeddingTable init_embeddings(std::size_t users, std::size_t items, std::size_t dim, std::uint64_t seed,
                                      double stddev = 0.01) {
  if (users == 0 || items == 0 || dim == 0)
    throw ConfigError("init_embeddings: users, items and dim must all be positive");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  EmbeddingTable t{Matrix<double>(users, dim), Matrix<double>(items, dim)};
  for (auto& v : t.users.values()) v = normal(rng);
  for (auto& v : t.items.values()) v = normal(rng);
  return t;
}

/// Divides each row by its Euclidean norm in place and returns the norms.
/// Zero rows stay zero with a recorded norm of 0.
template <typename Real>
std::vector<Real> l2_row_normalize_inplace(Matrix<Real>& m) {
  std::vector<Real> norms(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    Real sq{0};
    for (Real v : row) sq += v * v;
    const Real n = std::sqrt(sq);
    norms[r] = n;
    if (n > Real{0})
      for (auto& v : row) v /= n;
  }
  return norms;
}

template <typename Real>
std::pair<Matrix<Real>, std::vector<Real>> l2_row_normalize(const Matrix<Real>& m) {
  Matrix<Real> out = m;
  auto norms = l2_row_normalize_inplace(out);
  return {std::move(out), std::move(norms)};
}

/// Entries are 0 with probability p and 1/(1-p) otherwise.
template <typename Real, typename Urbg>
Matrix<Real> dropout_mask(std::size_t rows, std::size_t cols, double p, Urbg& rng) {
  check_probability(p, "message_dropout");
  Matrix<Real> mask(rows, cols, Real{1});
  if (p == 0.0) return mask;
  const Real keep = static_cast<Real>(1.0 / (1.0 - p));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (auto& v : mask.values()) v = unif(rng) >= p ? keep : Real{0};
  return mask;
}

template <typename Real>
void hadamard_inplace(Matrix<Real>& m, const Matrix<Real>& mask) {
  if (!m.same_shape(mask)) throw ContractViolation("hadamard: shape mismatch");
  auto a = m.values();
  auto b = mask.values();
  for (std::size_t k = 0; k < a.size(); ++k) a[k] *= b[k];
}

template <typename Real, typename Urbg>
Matrix<Real> message_dropout(const Matrix<Real>& emb, double p, Urbg& rng) {
  Matrix<Real> out = emb;
  hadamard_inplace(out, dropout_mask<Real>(emb.rows(), emb.cols(), p, rng));
  return out;
}

/// Per-block switches. A block with 0 layers is skipped (e^b = e^{b-1}).
struct CascadeConfig {
  std::vector<unsigned> layers_per_behavior;
  bool use_shortcut = true;
  bool use_l2_norm = true;
  double message_dropout = 0.0;
  double node_dropout = 0.0;

  static CascadeConfig uniform(std::size_t behaviors, unsigned layers = 1) {
    CascadeConfig c;
    c.layers_per_behavior.assign(behaviors, layers);
    return c;
  }

  std::size_t behavior_count() const { return layers_per_behavior.size(); }

  void validate() const {
    if (layers_per_behavior.empty()) throw ConfigError("layers: need one entry per behavior");
    check_probability(message_dropout, "message_dropout");
    check_probability(node_dropout, "node_dropout");
  }
};

template <typename Real>
struct CascadeBlock {
  bool skipped = false;
  NodeEmbeddings<Real> behavioral;  // e'^b, after message dropout
  NodeEmbeddings<Real> normalized;  // tilde e^b (equals behavioral when L2 is off)
  std::vector<Real> user_norms;     // empty when L2 is off
  std::vector<Real> item_norms;
  std::optional<NodeEmbeddings<Real>> message_mask;
  std::optional<BehaviorGraph> dropped_graph;
};

/// Everything one forward pass produced; kept for the backward pass.
template <typename Real>
struct CascadeState {
  std::vector<NodeEmbeddings<Real>> fused;  // e^0 .. e^B
  std::vector<CascadeBlock<Real>> blocks;   // blocks[b-1] produced e^b

  std::size_t behavior_count() const { return blocks.size(); }
  const NodeEmbeddings<Real>& final_embeddings() const { return fused.back(); }
};

/// Runs all B blocks. With `rng == nullptr` dropout is disabled and the
/// result is a pure function of the inputs.
template <typename Real>
CascadeState<Real> forward_cascade(const NodeEmbeddings<Real>& base, std::span<const BehaviorGraph> graphs,
                                   const CascadeConfig& cfg, Rng* rng = nullptr) {
  cfg.validate();
  if (graphs.size() != cfg.behavior_count())
    throw ConfigError("forward_cascade: " + std::to_string(graphs.size()) + " graphs for " +
                      std::to_string(cfg.behavior_count()) + " configured behaviors");
  if (base.users.cols() != base.items.cols()) throw ContractViolation("forward_cascade: dim mismatch");
  CascadeState<Real> state;
  state.fused.reserve(graphs.size() + 1);
  state.fused.push_back(base);
  for (std::size_t b = 0; b < graphs.size(); ++b) {
    const auto& prev = state.fused.back();
    CascadeBlock<Real> block;
    const unsigned layers = cfg.layers_per_behavior[b];
    if (layers == 0) {
      block.skipped = true;
      state.blocks.push_back(std::move(block));
      state.fused.push_back(prev);
      continue;
    }
    const BehaviorGraph* g = &graphs[b];
    if (rng && cfg.node_dropout > 0.0) {
      block.dropped_graph = node_dropout(graphs[b], cfg.node_dropout, *rng).graph;
      g = &*block.dropped_graph;
    }
    block.behavioral = propagate(*g, prev.users, prev.items, layers);
    if (rng && cfg.message_dropout > 0.0) {
      NodeEmbeddings<Real> mask{
          dropout_mask<Real>(prev.users.rows(), prev.users.cols(), cfg.message_dropout, *rng),
          dropout_mask<Real>(prev.items.rows(), prev.items.cols(), cfg.message_dropout, *rng)};
      hadamard_inplace(block.behavioral.users, mask.users);
      hadamard_inplace(block.behavioral.items, mask.items);
      block.message_mask = std::move(mask);
    }
    block.normalized = block.behavioral;
    if (cfg.use_l2_norm) {
      block.user_norms = l2_row_normalize_inplace(block.normalized.users);
      block.item_norms = l2_row_normalize_inplace(block.normalized.items);
    }
    NodeEmbeddings<Real> next = block.normalized;
    if (cfg.use_shortcut) add_into(next, prev);
    state.blocks.push_back(std::move(block));
    state.fused.push_back(std::move(next));
  }
  return state;
}

inline CascadeState<double> forward_cascade(const EmbeddingTable& emb, std::span<const BehaviorGraph> graphs,
                                            const CascadeConfig& cfg, Rng* rng = nullptr) {
  return forward_cascade(emb.as_nodes<double>(), graphs, cfg, rng);
}

/// Inner product of user u and item i at block b (1-based; b = B is the target).
template <typename Real>
Real score(const CascadeState<Real>& state, std::size_t block, std::uint32_t user, std::uint32_t item) {
  if (block < 1 || block >= state.fused.size())
    throw ContractViolation("score: block index " + std::to_string(block) + " out of range");
  const auto& e = state.fused[block];
  if (user >= e.users.rows() || item >= e.items.rows()) throw ContractViolation("score: node index out of range");
  return dot(e.users.row(user), e.items.row(item));
}

// ---------------------------------------------------------------------------
// Embedding dump: "MBRE" magic, u32 version, u64 M, u64 N, u64 d, u32 B,
// B length-prefixed behavior names, then row-major f64 matrices in the order
// final users, final items, P, Q. Little-endian.

inline constexpr char kEmbeddingMagic[4] = {'M', 'B', 'R', 'E'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

struct EmbeddingDump {
  std::vector<std::string> behavior_order;
  NodeEmbeddings<double> final_embeddings;
  EmbeddingTable table;

  friend bool operator==(const EmbeddingDump&, const EmbeddingDump&) = default;
};

inline void write_embeddings(std::ostream& out, const EmbeddingDump& dump) {
  const auto& t = dump.table;
  const auto& f = dump.final_embeddings;
  if (!f.users.same_shape(t.users) || !f.items.same_shape(t.items))
    throw ContractViolation("write_embeddings: final and raw embeddings differ in shape");
  out.write(kEmbeddingMagic, 4);
  binary::put_u32(out, kEmbeddingVersion);
  binary::put_u64(out, t.users.rows());
  binary::put_u64(out, t.items.rows());
  binary::put_u64(out, t.dim());
  binary::put_u32(out, static_cast<std::uint32_t>(dump.behavior_order.size()));
  for (const auto& name : dump.behavior_order) binary::put_string(out, name);
  for (const auto* m : {&f.users, &f.items, &t.users, &t.items})
    for (double v : m->values()) binary::put_f64(out, v);
  if (!out) throw Error("embedding dump: write failed");
}

inline EmbeddingDump read_embeddings(std::istream& in) {
  char magic[4];
  binary::read_exact(in, magic, 4);
  if (!std::equal(magic, magic + 4, kEmbeddingMagic)) throw DataError("embedding dump: bad magic");
  if (auto v = binary::get_u32(in); v != kEmbeddingVersion)
    throw DataError("embedding dump: unsupported version " + std::to_string(v));
  const auto m = binary::get_u64(in);
  const auto n = binary::get_u64(in);
  const auto d = binary::get_u64(in);
  const auto b = binary::get_u32(in);
  if (d == 0 || m > (1ull << 32) || n > (1ull << 32) || d > (1ull << 20) || b > 1024)
    throw DataError("embedding dump: header out of range");
  EmbeddingDump dump;
  for (std::uint32_t k = 0; k < b; ++k) dump.behavior_order.push_back(binary::get_string(in));
  dump.final_embeddings = {Matrix<double>(m, d), Matrix<double>(n, d)};
  dump.table = {Matrix<double>(m, d), Matrix<double>(n, d)};
  for (auto* mat : {&dump.final_embeddings.users, &dump.final_embeddings.items, &dump.table.users,
                    &dump.table.items})
    for (auto& v : mat->values()) v = binary::get_f64(in);
  return dump;
}

}  // namespace mbrec
