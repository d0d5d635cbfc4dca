#pragma once

// Full-ranking leave-one-out evaluation: HR@K and NDCG@K.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "mbrec/data.hpp"
#include "mbrec/errors.hpp"
#include "mbrec/graph.hpp"
#include "mbrec/model.hpp"

namespace mbrec {

/// How candidates with exactly the held-out item's score are counted.
/// `average` adds half of them to the rank; `pessimistic` adds all of them.
enum class TieRule { average, pessimistic };

struct RankingResult {
  std::uint32_t user = 0;
  double rank = 1.0;  // 1-based, may be fractional under average ties
  std::size_t candidates = 0;
};

/// Ranks `test_item` among all items except `excluded` (sorted ascending).
template <typename Real>
RankingResult rank_item(std::span<const Real> scores, std::uint32_t user, std::uint32_t test_item,
                        std::span<const std::uint32_t> excluded, TieRule ties = TieRule::average) {
  if (test_item >= scores.size()) throw ContractViolation("rank_item: test item out of range");
  if (std::binary_search(excluded.begin(), excluded.end(), test_item))
    throw ContractViolation("rank_item: test item is excluded from candidates");
  const Real target = scores[test_item];
  std::size_t higher = 0, tied = 0, skipped = 0;
  auto ex = excluded.begin();
  for (std::uint32_t i = 0; i < scores.size(); ++i) {
    while (ex != excluded.end() && *ex < i) ++ex;
    if (ex != excluded.end() && *ex == i) {
      ++skipped;
      continue;
    }
    if (i == test_item) continue;
    if (scores[i] > target) ++higher;
    else if (scores[i] == target) ++tied;
  }
  RankingResult r;
  r.user = user;
  r.candidates = scores.size() - skipped;
  r.rank = 1.0 + double(higher) + (ties == TieRule::average ? 0.5 * double(tied) : double(tied));
  return r;
}

/// Scores every item against `user` using the final block e^B.
template <typename Real>
std::vector<Real> score_all_items(const NodeEmbeddings<Real>& final_emb, std::uint32_t user) {
  if (user >= final_emb.users.rows()) throw ContractViolation("score_all_items: user out of range");
  std::vector<Real> scores(final_emb.items.rows());
  const auto u = final_emb.users.row(user);
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = dot(u, final_emb.items.row(i));
  return scores;
}

template <typename Real>
RankingResult rank_test_item(const CascadeState<Real>& state, std::uint32_t user, std::uint32_t test_item,
                             std::span<const std::uint32_t> excluded, TieRule ties = TieRule::average) {
  const auto scores = score_all_items(state.final_embeddings(), user);
  return rank_item<Real>(scores, user, test_item, excluded, ties);
}

inline void check_k(std::size_t k) {
  if (k < 1) throw ConfigError("K must be >= 1");
}

inline double hr_at_k(const RankingResult& r, std::size_t k) {
  check_k(k);
  return r.rank <= double(k) ? 1.0 : 0.0;
}

inline double ndcg_at_k(const RankingResult& r, std::size_t k) {
  check_k(k);
  return r.rank <= double(k) ? 1.0 / std::log2(r.rank + 1.0) : 0.0;
}

inline const std::vector<std::size_t>& default_ks() {
  static const std::vector<std::size_t> ks{10, 20, 50, 80};
  return ks;
}

struct MetricsReport {
  std::vector<std::size_t> ks;
  std::vector<double> hr;
  std::vector<double> ndcg;
  std::size_t user_count = 0;

  double hr_at(std::size_t k) const { return hr.at(index_of(k)); }
  double ndcg_at(std::size_t k) const { return ndcg.at(index_of(k)); }

 private:
  std::size_t index_of(std::size_t k) const {
    auto it = std::find(ks.begin(), ks.end(), k);
    if (it == ks.end()) throw ContractViolation("MetricsReport: K=" + std::to_string(k) + " not evaluated");
    return static_cast<std::size_t>(it - ks.begin());
  }
};

/// Averages HR/NDCG over a list of rankings, in the given order.
inline MetricsReport summarize(std::span<const RankingResult> ranks, const std::vector<std::size_t>& ks) {
  MetricsReport rep;
  rep.ks = ks;
  rep.hr.assign(ks.size(), 0.0);
  rep.ndcg.assign(ks.size(), 0.0);
  rep.user_count = ranks.size();
  for (auto k : ks) check_k(k);
  for (const auto& r : ranks)
    for (std::size_t j = 0; j < ks.size(); ++j) {
      rep.hr[j] += hr_at_k(r, ks[j]);
      rep.ndcg[j] += ndcg_at_k(r, ks[j]);
    }
  if (!ranks.empty())
    for (std::size_t j = 0; j < ks.size(); ++j) {
      rep.hr[j] /= double(ranks.size());
      rep.ndcg[j] /= double(ranks.size());
    }
  return rep;
}

struct EvalOptions {
  TieRule ties = TieRule::average;
  bool exclude_validation_item = false;
  bool single_precision = false;  // score with 32-bit floats (inference only)
};

/// Ranks each target user's held-out item against e^B. Candidates exclude
/// the user's target-behavior training items, plus `also_exclude[u]` when
/// given. `only_users` (sorted) restricts the evaluated users.
template <typename Real>
std::vector<RankingResult> rank_held_out(const NodeEmbeddings<Real>& final_emb, const BehaviorGraph& target_train,
                                         const std::map<std::uint32_t, HeldOut>& targets, TieRule ties,
                                         const std::map<std::uint32_t, HeldOut>* also_exclude = nullptr,
                                         const std::vector<std::uint32_t>* only_users = nullptr) {
  std::vector<RankingResult> ranks;
  ranks.reserve(targets.size());
  std::vector<std::uint32_t> excluded;
  for (const auto& [user, held] : targets) {
    if (only_users && !std::binary_search(only_users->begin(), only_users->end(), user)) continue;
    const auto nb = target_train.user_adj.neighbors(user);
    excluded.assign(nb.begin(), nb.end());
    if (also_exclude) {
      auto it = also_exclude->find(user);
      if (it != also_exclude->end() && it->second.item != held.item) {
        excluded.insert(std::lower_bound(excluded.begin(), excluded.end(), it->second.item), it->second.item);
        excluded.erase(std::unique(excluded.begin(), excluded.end()), excluded.end());
      }
    }
    const auto scores = score_all_items(final_emb, user);
    ranks.push_back(rank_item<Real>(scores, user, held.item, excluded, ties));
  }
  return ranks;
}

/// Inference forward pass followed by full-ranking evaluation of `targets`.
inline MetricsReport evaluate_targets(const EmbeddingTable& emb, std::span<const BehaviorGraph> graphs,
                                      const CascadeConfig& cfg, const std::map<std::uint32_t, HeldOut>& targets,
                                      const std::vector<std::size_t>& ks, const EvalOptions& opts = {},
                                      const std::map<std::uint32_t, HeldOut>* also_exclude = nullptr,
                                      const std::vector<std::uint32_t>* only_users = nullptr) {
  if (graphs.empty()) throw ConfigError("evaluate: no behavior graphs");
  const auto& target_graph = graphs.back();
  std::vector<RankingResult> ranks;
  if (opts.single_precision) {
    auto state = forward_cascade(emb.as_nodes<float>(), graphs, cfg);
    ranks = rank_held_out(state.final_embeddings(), target_graph, targets, opts.ties, also_exclude, only_users);
  } else {
    auto state = forward_cascade(emb.as_nodes<double>(), graphs, cfg);
    ranks = rank_held_out(state.final_embeddings(), target_graph, targets, opts.ties, also_exclude, only_users);
  }
  return summarize(ranks, ks);
}

/// Test-set evaluation of a split. `graphs` must be built from split.train.
inline MetricsReport evaluate(const EmbeddingTable& emb, std::span<const BehaviorGraph> graphs,
                              const CascadeConfig& cfg, const Split& split,
                              const std::vector<std::size_t>& ks = default_ks(), const EvalOptions& opts = {},
                              const std::vector<std::uint32_t>* only_users = nullptr) {
  if (split.test.empty()) throw DataError("evaluate: empty test set");
  return evaluate_targets(emb, graphs, cfg, split.test, ks, opts,
                          opts.exclude_validation_item ? &split.validation : nullptr, only_users);
}

// ---------------------------------------------------------------------------
// Report formatting.

inline std::string format_table(const MetricsReport& rep) {
  std::ostringstream out;
  out << std::left << std::setw(8) << "metric";
  for (auto k : rep.ks) out << std::right << std::setw(10) << ("@" + std::to_string(k));
  out << '\n' << std::fixed << std::setprecision(4);
  out << std::left << std::setw(8) << "HR";
  for (double v : rep.hr) out << std::right << std::setw(10) << v;
  out << '\n' << std::left << std::setw(8) << "NDCG";
  for (double v : rep.ndcg) out << std::right << std::setw(10) << v;
  out << "\nusers: " << rep.user_count << '\n';
  return out.str();
}

/// One "metric<TAB>K<TAB>value<TAB>n_users" line per metric and K.
inline std::string format_kv(const MetricsReport& rep) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (std::size_t j = 0; j < rep.ks.size(); ++j)
    out << "HR\t" << rep.ks[j] << '\t' << rep.hr[j] << '\t' << rep.user_count << '\n';
  for (std::size_t j = 0; j < rep.ks.size(); ++j)
    out << "NDCG\t" << rep.ks[j] << '\t' << rep.ndcg[j] << '\t' << rep.user_count << '\n';
  return out.str();
}

}  // namespace mbrec
