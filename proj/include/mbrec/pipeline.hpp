#pragma once

// End-to-end compositions: train and evaluate a split, the cold-start
// protocol and timing.

#include <chrono>
#include <cstdint>
#include <vector>

#include "mbrec/data.hpp"
#include "mbrec/eval.hpp"
#include "mbrec/graph.hpp"
#include "mbrec/model.hpp"
#include "mbrec/training.hpp"

namespace mbrec {

struct PipelineConfig {
  CascadeConfig cascade;
  TrainConfig train;
  std::vector<std::size_t> ks = default_ks();
  EvalOptions eval;
};

struct RunResult {
  FitResult fit;
  MetricsReport test;
  std::vector<BehaviorGraph> graphs;
};

inline RunResult train_and_evaluate(const Split& split, const PipelineConfig& cfg,
                                    const EpochCallback& on_epoch = {}) {
  RunResult out;
  out.graphs = build_graphs(split.train);
  out.fit = fit(split, out.graphs, cfg.cascade, cfg.train, on_epoch);
  const std::vector<std::uint32_t>* only = split.cold_users.empty() ? nullptr : &split.cold_users;
  out.test = evaluate(out.fit.embeddings, out.graphs, cfg.cascade, split, cfg.ks, cfg.eval, only);
  return out;
}

struct ColdStartResult {
  MetricsReport report;  // restricted to the cold users
  std::vector<std::uint32_t> cold_users;
  FitResult fit;
};

/// Removes target training data of `n_cold` random test users, trains on the
/// rest and evaluates only those users.
inline ColdStartResult run_cold_start_eval(const EventLog& log, std::size_t n_cold, const PipelineConfig& cfg,
                                           std::uint64_t seed) {
  if (n_cold == 0) throw ConfigError("cold-start: n_cold must be >= 1");
  const Split split = make_cold_start_split(log, n_cold, seed);
  const auto graphs = build_graphs(split.train);
  const auto& target = graphs.back();
  for (auto u : split.cold_users)
    if (target.user_adj.degree(u) != 0)
      throw ContractViolation("cold-start: cold user " + std::to_string(u) + " kept target training edges");
  ColdStartResult out;
  out.cold_users = split.cold_users;
  out.fit = fit(split, graphs, cfg.cascade, cfg.train);
  out.report = evaluate(out.fit.embeddings, graphs, cfg.cascade, split, cfg.ks, cfg.eval, &split.cold_users);
  return out;
}

struct BenchReport {
  std::size_t behaviors = 0;
  std::vector<unsigned> layers;
  std::size_t dim = 0;
  std::size_t batch_size = 0;
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t edges = 0;
  std::size_t timed_epochs = 0;
  double mean_epoch_seconds = 0.0;
  double eval_seconds_per_1000_users = 0.0;
};

/// Mean training seconds per epoch over `timed_epochs` epochs that follow
/// one untimed warm-up epoch, and test evaluation seconds per 1000 users.
inline BenchReport benchmark(const Split& split, const PipelineConfig& cfg, std::size_t timed_epochs = 3) {
  if (timed_epochs < 1) throw ConfigError("bench: need at least one timed epoch");
  const auto graphs = build_graphs(split.train);
  Trainer trainer(split, graphs, cfg.cascade, cfg.train);
  trainer.run_epoch();
  BenchReport rep;
  rep.behaviors = graphs.size();
  rep.layers = cfg.cascade.layers_per_behavior;
  rep.dim = cfg.train.embedding_dim;
  rep.batch_size = cfg.train.batch_size;
  rep.users = split.train.user_count;
  rep.items = split.train.item_count;
  for (const auto& g : graphs) rep.edges += g.edge_count();
  rep.timed_epochs = timed_epochs;
  double total = 0.0;
  for (std::size_t e = 0; e < timed_epochs; ++e) total += trainer.run_epoch().seconds;
  rep.mean_epoch_seconds = total / double(timed_epochs);
  const auto start = std::chrono::steady_clock::now();
  const auto metrics = evaluate(trainer.embeddings(), graphs, cfg.cascade, split, cfg.ks, cfg.eval);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rep.eval_seconds_per_1000_users = metrics.user_count ? secs * 1000.0 / double(metrics.user_count) : 0.0;
  return rep;
}

}  // namespace mbrec
