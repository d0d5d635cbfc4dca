#pragma once

// Multi-task BPR training of the cascade: triple sampling, the loss, its
// exact gradient with respect to the embedding table, Adam and the epoch
// loop with early stopping on validation HR@20.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mbrec/data.hpp"
#include "mbrec/errors.hpp"
#include "mbrec/eval.hpp"
#include "mbrec/graph.hpp"
#include "mbrec/model.hpp"

namespace mbrec {

struct Triple {
  std::uint32_t user = 0;
  std::uint32_t pos = 0;
  std::uint32_t neg = 0;
  bool masked = false;  // placeholder for a user without interactions

  friend bool operator==(const Triple&, const Triple&) = default;
};

struct TripleBatch {
  std::vector<std::vector<Triple>> per_behavior;

  std::size_t unmasked(std::size_t b) const {
    return static_cast<std::size_t>(std::count_if(per_behavior[b].begin(), per_behavior[b].end(),
                                                  [](const Triple& t) { return !t.masked; }));
  }
};

struct TrainConfig {
  std::size_t batch_size = 1024;
  std::size_t negatives = 4;
  double learning_rate = 1e-2;
  double reg_weight = 1e-4;
  std::vector<double> task_weights;  // empty means all 1
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t max_epochs = 400;
  std::size_t patience = 20;
  std::size_t early_stop_k = 20;
  std::size_t embedding_dim = 64;
  double init_stddev = 0.01;
  bool node_dropout_per_batch = true;
  std::uint64_t seed = 2023;

  std::vector<double> resolved_weights(std::size_t behaviors) const {
    if (task_weights.empty()) return std::vector<double>(behaviors, 1.0);
    if (task_weights.size() != behaviors)
      throw ConfigError("task_weights: expected " + std::to_string(behaviors) + " values, got " +
                        std::to_string(task_weights.size()));
    return task_weights;
  }

  void validate(std::size_t behaviors) const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (negatives == 0) throw ConfigError("negatives must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (!(reg_weight >= 0.0)) throw ConfigError("reg_weight must be >= 0");
    if (patience == 0) throw ConfigError("patience must be >= 1");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be >= 1");
    if (early_stop_k == 0) throw ConfigError("early_stop_k must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("adam betas must be in [0, 1)");
    for (double w : resolved_weights(behaviors))
      if (!(w >= 0.0)) throw ConfigError("task_weights must be non-negative");
  }
};

/// For each active behavior and each user: `n_neg` triples that share one
/// uniformly drawn positive, with negatives drawn uniformly from the items
/// the user has not interacted with in that behavior. Users without
/// interactions get masked placeholders. Behaviors whose weight is 0 are not
/// sampled.
template <typename Urbg>
TripleBatch sample_batch(std::span<const BehaviorGraph> graphs, std::span<const std::uint32_t> users,
                         std::size_t n_neg, std::span<const double> task_weights, Urbg& rng) {
  TripleBatch batch;
  batch.per_behavior.resize(graphs.size());
  std::vector<std::uint32_t> complement;
  for (std::size_t b = 0; b < graphs.size(); ++b) {
    if (!task_weights.empty() && task_weights[b] == 0.0) continue;
    const auto& g = graphs[b];
    auto& out = batch.per_behavior[b];
    out.reserve(users.size() * n_neg);
    for (auto u : users) {
      if (u >= g.user_count) throw ContractViolation("sample_batch: user out of range");
      const auto observed = g.user_adj.neighbors(u);
      if (observed.empty()) {
        out.insert(out.end(), n_neg, Triple{0, 0, 0, true});
        continue;
      }
      const std::size_t n_items = g.item_count;
      if (observed.size() >= n_items)
        throw SamplingError("behavior " + std::to_string(b) + ": user " + std::to_string(u) +
                            " has interacted with all " + std::to_string(n_items) +
                            " items, no negative can be drawn");
      const auto pos = observed[std::uniform_int_distribution<std::size_t>(0, observed.size() - 1)(rng)];
      const bool dense = observed.size() * 2 > n_items;
      if (dense) {
        complement.clear();
        auto it = observed.begin();
        for (std::uint32_t i = 0; i < n_items; ++i) {
          while (it != observed.end() && *it < i) ++it;
          if (it == observed.end() || *it != i) complement.push_back(i);
        }
      }
      for (std::size_t k = 0; k < n_neg; ++k) {
        std::uint32_t neg;
        if (dense) {
          neg = complement[std::uniform_int_distribution<std::size_t>(0, complement.size() - 1)(rng)];
        } else {
          std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n_items - 1));
          do neg = pick(rng);
          while (std::binary_search(observed.begin(), observed.end(), neg));
        }
        out.push_back({u, pos, neg, false});
      }
    }
  }
  return batch;
}

/// -ln sigmoid(pos - neg), evaluated as a stable softplus.
inline double bpr_pair_loss(double y_pos, double y_neg) {
  const double x = y_neg - y_pos;
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// Derivative of bpr_pair_loss with respect to (y_pos - y_neg): -sigmoid(y_neg - y_pos).
inline double bpr_pair_slope(double y_pos, double y_neg) {
  const double x = y_neg - y_pos;
  if (x >= 0.0) return -1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return -e / (1.0 + e);
}

inline double total_loss(std::span<const double> behavior_losses, std::span<const double> weights,
                         double regularization) {
  if (behavior_losses.size() != weights.size()) throw ContractViolation("total_loss: length mismatch");
  double sum = 0.0;
  for (std::size_t b = 0; b < weights.size(); ++b) sum += weights[b] * behavior_losses[b];
  return sum + regularization;
}

/// Weighted task losses plus beta times the squared norm of the whole table.
inline double total_loss(std::span<const double> behavior_losses, std::span<const double> weights,
                         const EmbeddingTable& emb, double beta) {
  double sq = 0.0;
  for (const auto* m : {&emb.users, &emb.items})
    for (double v : m->values()) sq += v * v;
  return total_loss(behavior_losses, weights, beta * sq);
}

struct Gradients {
  Matrix<double> users;
  Matrix<double> items;
};

struct BatchResult {
  Gradients grads;
  std::vector<double> behavior_losses;  // unweighted sum over triples
  double regularization = 0.0;
  double total = 0.0;
};

namespace detail {

// Gradient of the weighted BPR terms of one behavior with respect to the
// fused embeddings the behavior is scored on. Returns the unweighted loss.
inline double accumulate_bpr(const NodeEmbeddings<double>& e, std::span<const Triple> triples, double weight,
                             NodeEmbeddings<double>& grad) {
  double loss = 0.0;
  const std::size_t d = e.dim();
  for (const auto& t : triples) {
    if (t.masked) continue;
    const auto eu = e.users.row(t.user);
    const auto ei = e.items.row(t.pos);
    const auto ej = e.items.row(t.neg);
    const double yp = dot(eu, ei);
    const double yn = dot(eu, ej);
    loss += bpr_pair_loss(yp, yn);
    const double g = weight * bpr_pair_slope(yp, yn);
    if (g == 0.0) continue;
    auto gu = grad.users.row(t.user);
    auto gi = grad.items.row(t.pos);
    auto gj = grad.items.row(t.neg);
    for (std::size_t k = 0; k < d; ++k) {
      gu[k] += g * (ei[k] - ej[k]);
      gi[k] += g * eu[k];
      gj[k] -= g * eu[k];
    }
  }
  return loss;
}

// Adjoint of per-row L2 normalization: (I - x^ x^T) g / |x|; zero rows pass
// nothing.
inline void normalize_adjoint_inplace(Matrix<double>& grad, const Matrix<double>& unit,
                                      std::span<const double> norms) {
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    auto g = grad.row(r);
    if (norms[r] == 0.0) {
      std::fill(g.begin(), g.end(), 0.0);
      continue;
    }
    const auto xh = unit.row(r);
    const double proj = dot<double>(xh, g);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = (g[k] - proj * xh[k]) / norms[r];
  }
}

}  // namespace detail

/// Exact gradient of the multi-task objective
///   sum_b w_b * sum_{(u,i,j)} -ln sigmoid(y^b_ui - y^b_uj)
///     + beta * (squared norms of the P and Q rows touched by the batch)
/// with respect to P and Q, back through every cascade block.
inline BatchResult compute_gradients(const EmbeddingTable& emb, std::span<const BehaviorGraph> graphs,
                                     const CascadeConfig& cfg, const TripleBatch& batch, const TrainConfig& tcfg,
                                     Rng* rng = nullptr) {
  const std::size_t B = graphs.size();
  if (batch.per_behavior.size() != B) throw ContractViolation("compute_gradients: batch/graph count mismatch");
  const auto weights = tcfg.resolved_weights(B);
  const auto state = forward_cascade(emb, graphs, cfg, rng);
  const std::size_t M = emb.users.rows(), N = emb.items.rows(), d = emb.dim();

  BatchResult res;
  res.behavior_losses.assign(B, 0.0);
  auto zero = [&] { return NodeEmbeddings<double>{Matrix<double>(M, d), Matrix<double>(N, d)}; };

  // acc holds dLoss/d e^b while walking the blocks backwards.
  NodeEmbeddings<double> acc = zero();
  for (std::size_t b = B; b >= 1; --b) {
    if (weights[b - 1] != 0.0)
      res.behavior_losses[b - 1] =
          detail::accumulate_bpr(state.fused[b], batch.per_behavior[b - 1], weights[b - 1], acc);
    const auto& block = state.blocks[b - 1];
    if (block.skipped) continue;  // e^b = e^{b-1}: gradient passes unchanged
    NodeEmbeddings<double> g = acc;
    if (cfg.use_l2_norm) {
      detail::normalize_adjoint_inplace(g.users, block.normalized.users, block.user_norms);
      detail::normalize_adjoint_inplace(g.items, block.normalized.items, block.item_norms);
    }
    if (block.message_mask) {
      hadamard_inplace(g.users, block.message_mask->users);
      hadamard_inplace(g.items, block.message_mask->items);
    }
    const BehaviorGraph& used = block.dropped_graph ? *block.dropped_graph : graphs[b - 1];
    auto back = propagate_adjoint(used, g.users, g.items, cfg.layers_per_behavior[b - 1]);
    if (cfg.use_shortcut) add_into(back, acc);
    acc = std::move(back);
  }

  // Regularize each touched row once.
  std::vector<char> user_touched(M, 0), item_touched(N, 0);
  for (std::size_t b = 0; b < B; ++b) {
    if (weights[b] == 0.0) continue;
    for (const auto& t : batch.per_behavior[b]) {
      if (t.masked) continue;
      user_touched[t.user] = 1;
      item_touched[t.pos] = 1;
      item_touched[t.neg] = 1;
    }
  }
  const double beta = tcfg.reg_weight;
  auto regularize = [&](const Matrix<double>& param, Matrix<double>& grad, const std::vector<char>& touched) {
    for (std::size_t r = 0; r < param.rows(); ++r) {
      if (!touched[r]) continue;
      const auto p = param.row(r);
      auto g = grad.row(r);
      for (std::size_t k = 0; k < d; ++k) {
        res.regularization += beta * p[k] * p[k];
        g[k] += 2.0 * beta * p[k];
      }
    }
  };
  regularize(emb.users, acc.users, user_touched);
  regularize(emb.items, acc.items, item_touched);

  res.total = total_loss(res.behavior_losses, weights, res.regularization);
  res.grads = {std::move(acc.users), std::move(acc.items)};
  if (!all_finite(res.grads.users) || !all_finite(res.grads.items))
    throw DivergenceError("compute_gradients: non-finite gradient (loss " + std::to_string(res.total) + ")");
  return res;
}

struct AdamState {
  Matrix<double> m_users, m_items;
  Matrix<double> v_users, v_items;
  std::uint64_t step = 0;

  static AdamState zeros_like(const EmbeddingTable& t) {
    return {Matrix<double>(t.users.rows(), t.dim()), Matrix<double>(t.items.rows(), t.dim()),
            Matrix<double>(t.users.rows(), t.dim()), Matrix<double>(t.items.rows(), t.dim()), 0};
  }
};

/// One bias-corrected Adam update of the whole table.
inline void adam_step(EmbeddingTable& emb, const Gradients& grads, AdamState& state, double lr, double beta1,
                      double beta2, double eps) {
  if (!grads.users.same_shape(emb.users) || !grads.items.same_shape(emb.items) ||
      !state.m_users.same_shape(emb.users) || !state.m_items.same_shape(emb.items))
    throw ContractViolation("adam_step: shape mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, double(state.step));
  const double c2 = 1.0 - std::pow(beta2, double(state.step));
  auto update = [&](Matrix<double>& param, const Matrix<double>& grad, Matrix<double>& m, Matrix<double>& v) {
    auto p = param.values();
    auto g = grad.values();
    auto mm = m.values();
    auto vv = v.values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      mm[k] = beta1 * mm[k] + (1.0 - beta1) * g[k];
      vv[k] = beta2 * vv[k] + (1.0 - beta2) * g[k] * g[k];
      const double mhat = mm[k] / c1;
      const double vhat = vv[k] / c2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  };
  update(emb.users, grads.users, state.m_users, state.v_users);
  update(emb.items, grads.items, state.m_items, state.v_items);
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::vector<double> behavior_losses;
  double total_loss = 0.0;
  double validation_hr = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

/// Owns the embedding table and optimizer state across epochs.
class Trainer {
 public:
  Trainer(const Split& split, std::span<const BehaviorGraph> graphs, CascadeConfig cfg, TrainConfig tcfg)
      : split_(split), graphs_(graphs), cfg_(std::move(cfg)), tcfg_(std::move(tcfg)), rng_(tcfg_.seed) {
    cfg_.validate();
    tcfg_.validate(graphs.size());
    if (graphs.size() != cfg_.behavior_count())
      throw ConfigError("trainer: " + std::to_string(graphs.size()) + " graphs for " +
                        std::to_string(cfg_.behavior_count()) + " configured behaviors");
    if (graphs.size() != split.train.behavior_count())
      throw ConfigError("trainer: graph count differs from the split's behavior count");
    weights_ = tcfg_.resolved_weights(graphs.size());
    emb_ = init_embeddings(split.train.user_count, split.train.item_count, tcfg_.embedding_dim, tcfg_.seed,
                           tcfg_.init_stddev);
    adam_ = AdamState::zeros_like(emb_);
    // Keep sampling independent of the initialization stream.
    rng_.seed(tcfg_.seed ^ 0x5bd1e995ull);
    users_.resize(split.train.user_count);
    std::iota(users_.begin(), users_.end(), 0u);
  }

  const EmbeddingTable& embeddings() const { return emb_; }
  EmbeddingTable& embeddings() { return emb_; }
  const CascadeConfig& cascade_config() const { return cfg_; }
  const TrainConfig& train_config() const { return tcfg_; }
  std::size_t epochs_run() const { return epoch_; }

  /// One pass over all users in shuffled mini-batches.
  EpochRecord run_epoch() {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = ++epoch_;
    rec.behavior_losses.assign(graphs_.size(), 0.0);

    for (std::size_t k = users_.size(); k > 1; --k)
      std::swap(users_[k - 1], users_[static_cast<std::size_t>(rng_() % k)]);

    std::vector<BehaviorGraph> epoch_graphs;
    std::span<const BehaviorGraph> fwd_graphs = graphs_;
    CascadeConfig fwd_cfg = cfg_;
    if (cfg_.node_dropout > 0.0 && !tcfg_.node_dropout_per_batch) {
      for (const auto& g : graphs_) epoch_graphs.push_back(node_dropout(g, cfg_.node_dropout, rng_).graph);
      fwd_graphs = epoch_graphs;
      fwd_cfg.node_dropout = 0.0;
    }
    const bool stochastic = cfg_.node_dropout > 0.0 || cfg_.message_dropout > 0.0;

    for (std::size_t first = 0; first < users_.size(); first += tcfg_.batch_size) {
      const auto count = std::min(tcfg_.batch_size, users_.size() - first);
      std::span<const std::uint32_t> batch_users(users_.data() + first, count);
      const auto batch = sample_batch(graphs_, batch_users, tcfg_.negatives, weights_, rng_);
      auto res = compute_gradients(emb_, fwd_graphs, fwd_cfg, batch, tcfg_, stochastic ? &rng_ : nullptr);
      if (!std::isfinite(res.total))
        throw DivergenceError("epoch " + std::to_string(rec.epoch) + ": loss became non-finite");
      for (std::size_t b = 0; b < res.behavior_losses.size(); ++b) rec.behavior_losses[b] += res.behavior_losses[b];
      rec.total_loss += res.total;
      adam_step(emb_, res.grads, adam_, tcfg_.learning_rate, tcfg_.adam_beta1, tcfg_.adam_beta2,
                tcfg_.adam_epsilon);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

  double validation_hr() const {
    const auto rep = evaluate_targets(emb_, graphs_, cfg_, split_.validation, {tcfg_.early_stop_k});
    return rep.hr.front();
  }

 private:
  const Split& split_;
  std::span<const BehaviorGraph> graphs_;
  CascadeConfig cfg_;
  TrainConfig tcfg_;
  std::vector<double> weights_;
  EmbeddingTable emb_;
  AdamState adam_;
  Rng rng_;
  std::vector<std::uint32_t> users_;
  std::size_t epoch_ = 0;
};

struct FitResult {
  EmbeddingTable embeddings;  // snapshot from the best validation epoch
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_validation_hr = -1.0;
};

/// Called after every epoch with the record and the current (not best) table.
using EpochCallback = std::function<void(const EpochRecord&, const EmbeddingTable&)>;

/// Trains until `max_epochs` or until validation HR@K has not improved for
/// `patience` consecutive epochs, and returns the best-validation snapshot.
inline FitResult fit(const Split& split, std::span<const BehaviorGraph> graphs, const CascadeConfig& cfg,
                     const TrainConfig& tcfg, const EpochCallback& on_epoch = {}) {
  if (split.validation.empty()) throw DataError("fit: validation set is empty");
  Trainer trainer(split, graphs, cfg, tcfg);
  FitResult result;
  result.embeddings = trainer.embeddings();
  std::size_t stale = 0;
  for (std::size_t e = 0; e < tcfg.max_epochs; ++e) {
    auto rec = trainer.run_epoch();
    const auto eval_start = std::chrono::steady_clock::now();
    rec.validation_hr = trainer.validation_hr();
    rec.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - eval_start).count();
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec, trainer.embeddings());
    if (rec.validation_hr > result.best_validation_hr) {
      result.best_validation_hr = rec.validation_hr;
      result.best_epoch = rec.epoch;
      result.embeddings = trainer.embeddings();
      stale = 0;
    } else if (++stale >= tcfg.patience) {
      break;
    }
  }
  return result;
}

}  // namespace mbrec
