#pragma once

// Synthetic multi-behavior logs with a planted funnel (view -> cart -> buy).
//
// Users and items get Gaussian latent factors. Each user views a set of items
// drawn without replacement with probability proportional to
// exp(sharpness * affinity). Of the n items a user reached at one stage,
// Binomial(n, p) advance to the next stage, again picked by affinity, so the
// expected conversion rate is exactly p while preferred items convert first.

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mbrec/data.hpp"
#include "mbrec/errors.hpp"

namespace mbrec {

struct FunnelSpec {
  std::size_t users = 50;
  std::size_t items = 30;
  std::size_t latent_dim = 8;
  std::size_t views_per_user = 15;  // mean; actual count is uniform in [v/2, 3v/2]
  std::vector<double> conversion{0.6, 0.5};
  std::vector<std::string> behaviors{"view", "cart", "buy"};
  double sharpness = 2.0;

  void validate() const {
    if (users == 0 || items == 0) throw ConfigError("synth: users and items must be positive");
    if (latent_dim == 0) throw ConfigError("synth: latent_dim must be positive");
    if (views_per_user == 0) throw ConfigError("synth: views_per_user must be positive");
    if (behaviors.size() != conversion.size() + 1)
      throw ConfigError("synth: need one conversion probability per behavior transition");
    validate_behavior_order(behaviors);
    for (double p : conversion)
      if (!(p > 0.0 && p <= 1.0)) throw ConfigError("synth: conversion probabilities must be in (0, 1]");
  }
};

namespace detail {

// Weighted sampling without replacement (Efraimidis-Spirakis keys).
inline std::vector<std::uint32_t> weighted_pick(const std::vector<std::uint32_t>& pool,
                                                const std::vector<double>& log_weights, std::size_t count,
                                                std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::pair<double, std::uint32_t>> keyed;
  keyed.reserve(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) {
    double r = unif(rng);
    if (r <= 0.0) r = std::numeric_limits<double>::min();
    // log(key) = log(r) / w, with w = exp(log_weight)
    keyed.emplace_back(std::log(r) * std::exp(-log_weights[k]), pool[k]);
  }
  count = std::min(count, keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(count), keyed.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<std::uint32_t> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(keyed[k].second);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Raw events (user keys "u<id>", item keys "i<id>") in user order.
/// Timestamps increase strictly along the funnel for every (user, item).
inline std::vector<RawEvent> generate_synthetic(const FunnelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const double scale = std::pow(double(spec.latent_dim), -0.25);  // affinity has unit variance
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> user_f(spec.users * spec.latent_dim), item_f(spec.items * spec.latent_dim);
  for (auto& v : user_f) v = normal(rng);
  for (auto& v : item_f) v = normal(rng);
  auto affinity = [&](std::size_t u, std::size_t i) {
    double s = 0.0;
    for (std::size_t k = 0; k < spec.latent_dim; ++k)
      s += user_f[u * spec.latent_dim + k] * item_f[i * spec.latent_dim + k];
    return s;
  };

  const std::size_t lo = std::max<std::size_t>(1, spec.views_per_user / 2);
  const std::size_t hi = std::max(lo, spec.views_per_user + spec.views_per_user / 2);
  std::vector<std::uint32_t> all_items(spec.items);
  for (std::uint32_t i = 0; i < spec.items; ++i) all_items[i] = i;

  std::vector<RawEvent> events;
  for (std::size_t u = 0; u < spec.users; ++u) {
    const std::int64_t base = static_cast<std::int64_t>(u) * 1'000'000;
    std::vector<double> logw(spec.items);
    for (std::size_t i = 0; i < spec.items; ++i) logw[i] = spec.sharpness * affinity(u, i);
    const auto n_views = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    auto stage = detail::weighted_pick(all_items, logw, n_views, rng);

    std::vector<std::int64_t> last_time(spec.items, 0);
    std::int64_t clock = base;
    for (auto i : stage) {
      clock += 10 + static_cast<std::int64_t>(rng() % 10);
      last_time[i] = clock;
      events.push_back({"u" + std::to_string(u), "i" + std::to_string(i), spec.behaviors[0], clock});
    }
    for (std::size_t s = 0; s < spec.conversion.size(); ++s) {
      std::binomial_distribution<std::size_t> binom(stage.size(), spec.conversion[s]);
      const auto n_next = binom(rng);
      std::vector<double> stage_logw;
      for (auto i : stage) stage_logw.push_back(logw[i]);
      stage = detail::weighted_pick(stage, stage_logw, n_next, rng);
      for (auto i : stage) {
        last_time[i] += 1 + static_cast<std::int64_t>(rng() % 1000);
        events.push_back({"u" + std::to_string(u), "i" + std::to_string(i), spec.behaviors[s + 1], last_time[i]});
      }
    }
  }
  return events;
}

inline void write_raw_events(std::ostream& out, const std::vector<RawEvent>& events, char delimiter = '\t') {
  for (const auto& e : events)
    out << e.user_key << delimiter << e.item_key << delimiter << e.behavior << delimiter << e.timestamp << '\n';
}

}  // namespace mbrec
