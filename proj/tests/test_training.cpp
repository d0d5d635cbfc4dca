#include <gtest/gtest.h>

#include <set>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "mbrec/training.hpp"

using namespace mbrec;

namespace {

std::vector<std::uint32_t> all_users(std::size_t M) {
  std::vector<std::uint32_t> u(M);
  for (std::uint32_t k = 0; k < M; ++k) u[k] = k;
  return u;
}

bool observed(const BehaviorGraph& g, std::uint32_t u, std::uint32_t i) {
  auto nb = g.user_adj.neighbors(u);
  return std::binary_search(nb.begin(), nb.end(), i);
}

}  // namespace

TEST(Sampling, TriplesRespectObservedSets) {
  std::mt19937_64 rng(1);
  std::vector<BehaviorGraph> gs{oracle::graph_from_edges(6, 8, oracle::random_edges(6, 8, 0.3, rng), 0),
                                oracle::graph_from_edges(6, 8, {{0, 1}, {0, 2}, {0, 3}, {0, 4}, {0, 5}, {2, 0}}, 1)};
  const auto users = all_users(6);
  auto batch = sample_batch(gs, users, 3, std::vector<double>{}, rng);
  ASSERT_EQ(batch.per_behavior.size(), 2u);
  for (std::size_t b = 0; b < 2; ++b) {
    EXPECT_EQ(batch.per_behavior[b].size(), 6u * 3u);
    for (const auto& t : batch.per_behavior[b]) {
      if (t.masked) {
        EXPECT_EQ(t, (Triple{0, 0, 0, true}));
        continue;
      }
      EXPECT_TRUE(observed(gs[b], t.user, t.pos));
      EXPECT_FALSE(observed(gs[b], t.user, t.neg));
    }
  }
  // user 1 has no behavior-1 interactions: all masked; user 0 is dense (5 of 8).
  EXPECT_EQ(batch.unmasked(1), 2u * 3u);
}

TEST(Sampling, ZeroWeightTasksAreSkippedAndSeedsReproduce) {
  std::mt19937_64 g_rng(2);
  std::vector<BehaviorGraph> gs;
  for (std::uint32_t b = 0; b < 3; ++b) gs.push_back(oracle::graph_from_edges(5, 9, oracle::random_edges(5, 9, 0.4, g_rng), b));
  const auto users = all_users(5);
  std::vector<double> w{0.0, 1.0, 0.0};
  std::mt19937_64 a(9), b(9);
  auto x = sample_batch(gs, users, 2, w, a);
  auto y = sample_batch(gs, users, 2, w, b);
  EXPECT_TRUE(x.per_behavior[0].empty());
  EXPECT_TRUE(x.per_behavior[2].empty());
  EXPECT_EQ(x.per_behavior[1], y.per_behavior[1]);
}

TEST(Sampling, SaturatedUserIsAnError) {
  std::mt19937_64 rng(1);
  std::vector<BehaviorGraph> gs{oracle::graph_from_edges(2, 2, {{0, 0}, {0, 1}})};
  const auto users = all_users(2);
  EXPECT_THROW(sample_batch(gs, users, 1, std::vector<double>{}, rng), SamplingError);
}

TEST(BprLoss, FrozenValues) {
  // ln(1 + e^20) = 20.000000002061153620314380703238982798880 (50-digit reference)
  EXPECT_DOUBLE_EQ(bpr_pair_loss(0.0, 20.0), 20.00000000206115362031438070323898279888);
  // ln 2 at equal scores
  EXPECT_DOUBLE_EQ(bpr_pair_loss(1.5, 1.5), 0.6931471805599453);
  // ln(1 + e^-20) = 2.0611536203143807032389827988779e-09 (50-digit reference)
  EXPECT_NEAR(bpr_pair_loss(20.0, 0.0), 2.0611536203143807032e-09, 1e-24);
  EXPECT_DOUBLE_EQ(bpr_pair_slope(0.0, 0.0), -0.5);
}

TEST(BprLoss, NonNegativeAndStable) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> x(-800.0, 800.0);
  for (int k = 0; k < 10000; ++k) {
    const double a = x(rng), b = x(rng);
    const double l = bpr_pair_loss(a, b);
    ASSERT_TRUE(std::isfinite(l));
    ASSERT_GE(l, 0.0);
    const double s = bpr_pair_slope(a, b);
    ASSERT_TRUE(s <= 0.0 && s >= -1.0);
  }
  EXPECT_GT(bpr_pair_loss(30.0, 0.0), 0.0);
}

TEST(BprLoss, SlopeIsDerivative) {
  for (double diff : {-7.0, -1.0, -0.1, 0.0, 0.3, 2.0, 9.0}) {
    const double h = 1e-6;
    const double fd = (bpr_pair_loss(diff + h, 0.0) - bpr_pair_loss(diff - h, 0.0)) / (2 * h);
    EXPECT_NEAR(bpr_pair_slope(diff, 0.0), fd, 1e-8);
  }
}

TEST(TotalLoss, WeightsAndRegularization) {
  std::vector<double> l{2.0, 3.0}, w{0.5, 2.0};
  EXPECT_DOUBLE_EQ(total_loss(l, w, 0.25), 7.25);
  EmbeddingTable t{Matrix<double>(1, 2, 1.0), Matrix<double>(1, 2, 2.0)};
  EXPECT_DOUBLE_EQ(total_loss(l, w, t, 0.1), 7.0 + 0.1 * 10.0);
  EXPECT_THROW(total_loss(l, std::vector<double>{1.0}, 0.0), ContractViolation);
}

class GradientOracle : public ::testing::TestWithParam<std::tuple<int, int, bool, bool>> {};

TEST_P(GradientOracle, MatchesCentralDifferences) {
  const auto [B, L, shortcut, l2] = GetParam();
  std::mt19937_64 rng(1000 + B * 100 + L * 10 + shortcut * 2 + l2);
  for (int trial = 0; trial < 3; ++trial) {
    auto in = gradcheck::random_instance(rng, B, L, shortcut, l2);
    auto out = gradcheck::check(in);
    EXPECT_LT(out.max_rel_error, 1e-5) << "abs " << out.max_abs_error;
    EXPECT_LT(out.loss_gap, 1e-10);
  }
}

INSTANTIATE_TEST_SUITE_P(AllSwitches, GradientOracle,
                         ::testing::Combine(::testing::Values(1, 2, 3), ::testing::Values(0, 1, 2),
                                            ::testing::Bool(), ::testing::Bool()));

TEST(Gradients, MixedLayerCountsIncludingSkippedBlocks) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    auto in = gradcheck::random_instance(rng, 3, 1, true, true);
    in.cascade.layers_per_behavior = {unsigned(trial % 3), 0u, unsigned(1 + trial % 2)};
    EXPECT_LT(gradcheck::check(in).max_rel_error, 1e-5);
  }
}

TEST(Gradients, MaskedTriplesChangeNothing) {
  std::mt19937_64 rng(5);
  auto in = gradcheck::random_instance(rng, 2, 2, true, true);
  auto base = compute_gradients(in.emb, in.graphs, in.cascade, in.batch, in.train);
  auto padded = in.batch;
  for (auto& v : padded.per_behavior) v.insert(v.begin() + v.size() / 2, 5, Triple{0, 0, 0, true});
  auto res = compute_gradients(in.emb, in.graphs, in.cascade, padded, in.train);
  EXPECT_EQ(res.grads.users, base.grads.users);
  EXPECT_EQ(res.grads.items, base.grads.items);
  EXPECT_EQ(res.total, base.total);
}

TEST(Gradients, LinearInTaskWeight) {
  std::mt19937_64 rng(6);
  auto in = gradcheck::random_instance(rng, 3, 1, true, true);
  in.train.reg_weight = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    auto one = in.train, scaled = in.train;
    one.task_weights.assign(3, 0.0);
    scaled.task_weights.assign(3, 0.0);
    one.task_weights[b] = 1.0;
    scaled.task_weights[b] = 2.75;
    auto g1 = compute_gradients(in.emb, in.graphs, in.cascade, in.batch, one);
    auto g2 = compute_gradients(in.emb, in.graphs, in.cascade, in.batch, scaled);
    for (std::size_t k = 0; k < g1.grads.users.size(); ++k)
      EXPECT_NEAR(g2.grads.users.values()[k], 2.75 * g1.grads.users.values()[k], 1e-12);
    for (std::size_t k = 0; k < g1.grads.items.size(); ++k)
      EXPECT_NEAR(g2.grads.items.values()[k], 2.75 * g1.grads.items.values()[k], 1e-12);
  }
}

TEST(Gradients, ExactUnderFixedDropoutDraws) {
  // With a fixed rng seed the masks are a deterministic part of the loss.
  std::mt19937_64 rng(8);
  auto in = gradcheck::random_instance(rng, 2, 2, true, true);
  in.cascade.message_dropout = 0.3;
  in.cascade.node_dropout = 0.2;
  auto loss = [&](const EmbeddingTable& e) {
    Rng r(123);
    return compute_gradients(e, in.graphs, in.cascade, in.batch, in.train, &r).total;
  };
  Rng r(123);
  auto res = compute_gradients(in.emb, in.graphs, in.cascade, in.batch, in.train, &r);
  const double h = 1e-5;
  auto probe = [&](Matrix<double> EmbeddingTable::*which, const Matrix<double>& analytic) {
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      auto up = in.emb, down = in.emb;
      (up.*which).values()[k] += h;
      (down.*which).values()[k] -= h;
      const double fd = (loss(up) - loss(down)) / (2 * h);
      EXPECT_LT(gradcheck::rel_error(analytic.values()[k], fd, 1e-8), 1e-5);
    }
  };
  probe(&EmbeddingTable::users, res.grads.users);
  probe(&EmbeddingTable::items, res.grads.items);
}

TEST(Gradients, NonFiniteInputDiverges) {
  std::mt19937_64 rng(9);
  auto in = gradcheck::random_instance(rng, 1, 1, true, false);
  in.emb.users(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(compute_gradients(in.emb, in.graphs, in.cascade, in.batch, in.train), DivergenceError);
}

TEST(Adam, MatchesScalarSimulation) {
  EmbeddingTable t{Matrix<double>(1, 1, 0.5), Matrix<double>(1, 1, -1.0)};
  auto st = AdamState::zeros_like(t);
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double p = 0.5, m = 0.0, v = 0.0;
  const double grads[] = {0.3, -1.2, 0.05, 2.0, 0.0, -0.4};
  for (int s = 0; s < 6; ++s) {
    Gradients g{Matrix<double>(1, 1, grads[s]), Matrix<double>(1, 1, 0.0)};
    adam_step(t, g, st, lr, b1, b2, eps);
    m = b1 * m + (1 - b1) * grads[s];
    v = b2 * v + (1 - b2) * grads[s] * grads[s];
    p -= lr * (m / (1 - std::pow(b1, s + 1))) / (std::sqrt(v / (1 - std::pow(b2, s + 1))) + eps);
    EXPECT_DOUBLE_EQ(t.users(0, 0), p);
  }
  EXPECT_EQ(st.step, 6u);
  EXPECT_EQ(t.items(0, 0), -1.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  EmbeddingTable t{Matrix<double>(1, 2, 0.0), Matrix<double>(1, 2, 0.0)};
  auto st = AdamState::zeros_like(t);
  Gradients g{Matrix<double>(1, 2), Matrix<double>(1, 2)};
  g.users(0, 0) = 4.0;
  g.users(0, 1) = -0.02;
  adam_step(t, g, st, 0.1, 0.9, 0.999, 1e-8);
  EXPECT_NEAR(t.users(0, 0), -0.1 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_NEAR(t.users(0, 1), 0.1 * 0.02 / (0.02 + 1e-8), 1e-15);
}

namespace {

// 8 users, 6 items, 2 behaviors; users in two blocks with disjoint tastes.
Split separable_split() {
  std::vector<RawEvent> raw;
  std::int64_t t = 0;
  for (int u = 0; u < 8; ++u) {
    const int base = u < 4 ? 0 : 3;
    for (int k = 0; k < 3; ++k) {
      const auto item = "i" + std::to_string(base + k);
      raw.push_back({"u" + std::to_string(u), item, "view", ++t});
      raw.push_back({"u" + std::to_string(u), item, "buy", ++t});
    }
    raw.push_back({"u" + std::to_string(u), "i" + std::to_string((base + 3) % 6), "view", ++t});
  }
  return split_leave_one_out(build_event_log(raw, {"view", "buy"}));
}

TrainConfig small_train(double lr) {
  TrainConfig c;
  c.learning_rate = lr;
  c.embedding_dim = 8;
  c.batch_size = 4;
  c.max_epochs = 10;
  c.patience = 10;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Trainer, LossDecreasesOnSeparableToy) {
  const auto split = separable_split();
  const auto graphs = build_graphs(split.train);
  Trainer tr(split, graphs, CascadeConfig::uniform(2, 1), small_train(1e-3));
  std::vector<double> losses;
  for (int e = 0; e < 10; ++e) losses.push_back(tr.run_epoch().total_loss);
  int violations = 0;
  for (std::size_t e = 1; e < losses.size(); ++e) violations += losses[e] >= losses[e - 1];
  EXPECT_LE(violations, 1);
  EXPECT_LT(losses.back(), losses.front());
}

TEST(Fit, PatienceOneStopsAfterTwoFlatEpochs) {
  const auto split = separable_split();
  const auto graphs = build_graphs(split.train);
  auto cfg = small_train(0.0);  // parameters never move, so validation never improves
  cfg.patience = 1;
  auto res = fit(split, graphs, CascadeConfig::uniform(2, 1), cfg);
  EXPECT_EQ(res.log.size(), 2u);
  EXPECT_EQ(res.best_epoch, 1u);
}

TEST(Fit, SnapshotReproducesBestValidation) {
  const auto log = fixtures::funnel_log(60, 30, 3);
  const auto split = split_leave_one_out(log);
  const auto graphs = build_graphs(split.train);
  auto cfg = small_train(1e-2);
  cfg.max_epochs = 15;
  cfg.batch_size = 16;
  const auto cascade = CascadeConfig::uniform(3, 1);
  auto res = fit(split, graphs, cascade, cfg);
  ASSERT_GE(res.best_epoch, 1u);
  EXPECT_EQ(res.log[res.best_epoch - 1].validation_hr, res.best_validation_hr);
  const auto again = evaluate_targets(res.embeddings, graphs, cascade, split.validation, {cfg.early_stop_k});
  EXPECT_EQ(again.hr.front(), res.best_validation_hr);
}

TEST(Fit, SeededRunsAreBitIdentical) {
  const auto split = split_leave_one_out(fixtures::funnel_log(40, 25, 4));
  const auto graphs = build_graphs(split.train);
  auto cfg = small_train(1e-2);
  cfg.batch_size = 8;
  auto cascade = CascadeConfig::uniform(3, 2);
  cascade.message_dropout = 0.1;
  cascade.node_dropout = 0.1;
  for (bool per_batch : {true, false}) {
    cfg.node_dropout_per_batch = per_batch;
    auto a = fit(split, graphs, cascade, cfg);
    auto b = fit(split, graphs, cascade, cfg);
    EXPECT_EQ(a.embeddings, b.embeddings);
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t e = 0; e < a.log.size(); ++e) EXPECT_EQ(a.log[e].total_loss, b.log[e].total_loss);
  }
}

TEST(Fit, RejectsBadConfig) {
  const auto split = separable_split();
  const auto graphs = build_graphs(split.train);
  auto cfg = small_train(1e-2);
  cfg.task_weights = {1.0};
  EXPECT_THROW(fit(split, graphs, CascadeConfig::uniform(2, 1), cfg), ConfigError);
  cfg.task_weights = {1.0, -1.0};
  EXPECT_THROW(fit(split, graphs, CascadeConfig::uniform(2, 1), cfg), ConfigError);
  cfg.task_weights = {};
  cfg.patience = 0;
  EXPECT_THROW(fit(split, graphs, CascadeConfig::uniform(2, 1), cfg), ConfigError);
  cfg.patience = 1;
  EXPECT_THROW(fit(split, graphs, CascadeConfig::uniform(3, 1), cfg), ConfigError);
}
