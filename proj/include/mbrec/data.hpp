#pragma once

// Interaction log ingestion: parsing, deduplication, dense id mapping and
// leave-one-out / cold-start splitting.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbrec/errors.hpp"

namespace mbrec {

struct RawEvent {
  std::string user_key;
  std::string item_key;
  std::string behavior;
  std::int64_t timestamp = 0;

  friend bool operator==(const RawEvent&, const RawEvent&) = default;
};

/// Column layout of a delimiter-separated interaction file.
struct Schema {
  char delimiter = '\t';
  std::size_t user_col = 0;
  std::size_t item_col = 1;
  std::size_t behavior_col = 2;
  std::size_t timestamp_col = 3;
  std::size_t field_count = 4;
  bool has_header = false;

  /// Builds a schema from a comma-separated column list such as
  /// "user,item,behavior,timestamp". Columns named "_" are ignored.
  static Schema from_columns(std::string_view columns, char delimiter = '\t',
                             bool has_header = false) {
    Schema s;
    s.delimiter = delimiter;
    s.has_header = has_header;
    bool seen[4] = {false, false, false, false};
    std::size_t index = 0;
    std::size_t start = 0;
    while (start <= columns.size()) {
      auto end = columns.find(',', start);
      if (end == std::string_view::npos) end = columns.size();
      auto name = columns.substr(start, end - start);
      auto claim = [&](int slot, std::size_t& col) {
        if (seen[slot]) throw ConfigError("schema: duplicate column '" + std::string(name) + "'");
        seen[slot] = true;
        col = index;
      };
      if (name == "user") claim(0, s.user_col);
      else if (name == "item") claim(1, s.item_col);
      else if (name == "behavior") claim(2, s.behavior_col);
      else if (name == "timestamp") claim(3, s.timestamp_col);
      else if (name != "_")
        throw ConfigError("schema: unknown column '" + std::string(name) +
                          "' (expected user, item, behavior, timestamp or _)");
      ++index;
      start = end + 1;
    }
    for (bool b : seen)
      if (!b) throw ConfigError("schema: columns must include user, item, behavior and timestamp");
    s.field_count = index;
    return s;
  }
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto end = line.find(delim, start);
    if (end == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, end - start));
    start = end + 1;
  }
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (k) out += sep;
    out += parts[k];
  }
  return out;
}

}  // namespace detail

/// Reads one RawEvent per non-empty line, in file order. When
/// `known_behaviors` is non-empty, any other behavior name is rejected.
inline std::vector<RawEvent> parse_events(std::istream& in, const Schema& schema,
                                          const std::vector<std::string>& known_behaviors = {}) {
  std::vector<RawEvent> events;
  std::string line;
  std::size_t line_no = 0;
  const std::unordered_set<std::string> known(known_behaviors.begin(), known_behaviors.end());
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && schema.has_header) continue;
    if (line.empty()) continue;
    auto fields = detail::split_fields(line, schema.delimiter);
    if (fields.size() != schema.field_count)
      throw ParseError(line_no, "expected " + std::to_string(schema.field_count) + " fields, got " +
                                    std::to_string(fields.size()));
    RawEvent ev;
    ev.user_key = std::string(fields[schema.user_col]);
    ev.item_key = std::string(fields[schema.item_col]);
    ev.behavior = std::string(fields[schema.behavior_col]);
    if (ev.user_key.empty()) throw ParseError(line_no, "empty user field");
    if (ev.item_key.empty()) throw ParseError(line_no, "empty item field");
    if (ev.behavior.empty()) throw ParseError(line_no, "empty behavior field");
    auto ts = fields[schema.timestamp_col];
    auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), ev.timestamp);
    if (ec != std::errc{} || ptr != ts.data() + ts.size())
      throw ParseError(line_no, "timestamp '" + std::string(ts) + "' is not an integer");
    if (ev.timestamp < 0) throw ParseError(line_no, "negative timestamp");
    if (!known.empty() && !known.contains(ev.behavior))
      throw ParseError(line_no, "unknown behavior '" + ev.behavior + "' (known: " +
                                    detail::join(known_behaviors, ", ") + ")");
    events.push_back(std::move(ev));
  }
  return events;
}

/// Keeps, per (user, item, behavior), the earliest event. Ties go to the
/// first occurrence. Survivors stay in input order.
inline std::vector<RawEvent> dedup_earliest(const std::vector<RawEvent>& events) {
  struct KeyHash {
    std::size_t operator()(const std::tuple<std::string_view, std::string_view, std::string_view>& k) const {
      auto h = std::hash<std::string_view>{};
      std::size_t seed = h(std::get<0>(k));
      seed ^= h(std::get<1>(k)) + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
      seed ^= h(std::get<2>(k)) + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
      return seed;
    }
  };
  std::unordered_map<std::tuple<std::string_view, std::string_view, std::string_view>, std::size_t, KeyHash>
      best;
  best.reserve(events.size());
  for (std::size_t k = 0; k < events.size(); ++k) {
    const auto& e = events[k];
    auto [it, inserted] = best.try_emplace({e.user_key, e.item_key, e.behavior}, k);
    if (!inserted && e.timestamp < events[it->second].timestamp) it->second = k;
  }
  std::vector<std::size_t> keep;
  keep.reserve(best.size());
  for (const auto& [key, idx] : best) keep.push_back(idx);
  std::sort(keep.begin(), keep.end());
  std::vector<RawEvent> out;
  out.reserve(keep.size());
  for (auto idx : keep) out.push_back(events[idx]);
  return out;
}

struct Event {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  std::uint32_t behavior = 0;
  std::int64_t timestamp = 0;

  friend bool operator==(const Event&, const Event&) = default;
};

/// Interaction log over dense ids. `behavior_order.back()` is the target.
struct EventLog {
  std::vector<Event> events;
  std::uint32_t user_count = 0;
  std::uint32_t item_count = 0;
  std::vector<std::string> behavior_order;
  std::vector<std::string> user_keys;  // id -> original key
  std::vector<std::string> item_keys;

  std::uint32_t behavior_count() const { return static_cast<std::uint32_t>(behavior_order.size()); }
  std::uint32_t target_behavior() const { return behavior_count() - 1; }

  std::vector<std::size_t> counts_per_behavior() const {
    std::vector<std::size_t> c(behavior_order.size(), 0);
    for (const auto& e : events) ++c[e.behavior];
    return c;
  }

  /// Same shape and id maps, no events.
  EventLog empty_copy() const {
    EventLog out;
    out.user_count = user_count;
    out.item_count = item_count;
    out.behavior_order = behavior_order;
    out.user_keys = user_keys;
    out.item_keys = item_keys;
    return out;
  }
};

inline void validate_behavior_order(const std::vector<std::string>& order) {
  if (order.empty()) throw ConfigError("behavior_order: must name at least one behavior");
  std::unordered_set<std::string> seen;
  for (const auto& b : order) {
    if (b.empty()) throw ConfigError("behavior_order: empty behavior name");
    if (!seen.insert(b).second) throw ConfigError("behavior_order: duplicate behavior '" + b + "'");
  }
}

/// Assigns dense ids by first appearance. Behavior ids are positions in
/// `behavior_order`.
inline EventLog build_event_log(const std::vector<RawEvent>& events,
                                const std::vector<std::string>& behavior_order) {
  validate_behavior_order(behavior_order);
  EventLog log;
  log.behavior_order = behavior_order;
  std::unordered_map<std::string, std::uint32_t> behavior_ids;
  for (std::uint32_t b = 0; b < behavior_order.size(); ++b) behavior_ids.emplace(behavior_order[b], b);
  std::unordered_map<std::string, std::uint32_t> users, items;
  log.events.reserve(events.size());
  for (const auto& e : events) {
    auto bit = behavior_ids.find(e.behavior);
    if (bit == behavior_ids.end())
      throw ConfigError("behavior '" + e.behavior + "' is not in behavior_order (" +
                        detail::join(behavior_order, ">") + ")");
    auto [uit, unew] = users.try_emplace(e.user_key, static_cast<std::uint32_t>(log.user_keys.size()));
    if (unew) log.user_keys.push_back(e.user_key);
    auto [iit, inew] = items.try_emplace(e.item_key, static_cast<std::uint32_t>(log.item_keys.size()));
    if (inew) log.item_keys.push_back(e.item_key);
    log.events.push_back({uit->second, iit->second, bit->second, e.timestamp});
  }
  log.user_count = static_cast<std::uint32_t>(log.user_keys.size());
  log.item_count = static_cast<std::uint32_t>(log.item_keys.size());
  return log;
}

/// Drops raw events whose behavior is not listed. Used for behavior-subset
/// experiments before build_event_log.
inline std::vector<RawEvent> filter_behaviors(const std::vector<RawEvent>& events,
                                              const std::vector<std::string>& keep) {
  std::unordered_set<std::string> k(keep.begin(), keep.end());
  std::vector<RawEvent> out;
  std::copy_if(events.begin(), events.end(), std::back_inserter(out),
               [&](const RawEvent& e) { return k.contains(e.behavior); });
  return out;
}

struct HeldOut {
  std::uint32_t item = 0;
  std::int64_t timestamp = 0;

  friend bool operator==(const HeldOut&, const HeldOut&) = default;
};

struct Split {
  EventLog train;
  std::map<std::uint32_t, HeldOut> validation;
  std::map<std::uint32_t, HeldOut> test;
  std::vector<std::uint32_t> cold_users;  // sorted; empty unless cold-start
};

/// Leave-one-out on the target behavior. Users with at least three target
/// interactions give their latest to test and the second latest to
/// validation. Equal timestamps resolve by input order, or randomly under
/// `seed` when `randomize_ties` is set.
inline Split split_leave_one_out(const EventLog& log, std::uint64_t seed = 0, bool randomize_ties = false) {
  if (log.behavior_order.empty()) throw ConfigError("split: empty behavior order");
  const auto target = log.target_behavior();
  std::vector<std::uint64_t> tiebreak(log.events.size());
  std::iota(tiebreak.begin(), tiebreak.end(), 0);
  if (randomize_ties) {
    std::mt19937_64 rng(seed);
    for (auto& t : tiebreak) t = rng();
  }
  std::vector<std::vector<std::size_t>> per_user(log.user_count);
  for (std::size_t k = 0; k < log.events.size(); ++k)
    if (log.events[k].behavior == target) per_user[log.events[k].user].push_back(k);

  std::vector<char> held(log.events.size(), 0);
  Split split;
  split.train = log.empty_copy();
  for (std::uint32_t u = 0; u < log.user_count; ++u) {
    auto& idx = per_user[u];
    if (idx.size() < 3) continue;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const auto ta = log.events[a].timestamp, tb = log.events[b].timestamp;
      if (ta != tb) return ta < tb;
      if (tiebreak[a] != tiebreak[b]) return tiebreak[a] < tiebreak[b];
      return a < b;
    });
    const auto& last = log.events[idx[idx.size() - 1]];
    const auto& second = log.events[idx[idx.size() - 2]];
    split.test[u] = {last.item, last.timestamp};
    split.validation[u] = {second.item, second.timestamp};
    held[idx[idx.size() - 1]] = 1;
    held[idx[idx.size() - 2]] = 1;
  }
  if (split.test.empty()) throw DataError("empty test set: no user has at least 3 target interactions");
  for (std::size_t k = 0; k < log.events.size(); ++k)
    if (!held[k]) split.train.events.push_back(log.events[k]);
  return split;
}

/// Leave-one-out split followed by removal of all target training
/// interactions of `n_cold` randomly chosen test users, plus their other
/// interactions with the same items.
inline Split make_cold_start_split(const EventLog& log, std::size_t n_cold, std::uint64_t seed) {
  Split split = split_leave_one_out(log, seed);
  if (n_cold == 0) return split;
  std::vector<std::uint32_t> eligible;
  for (const auto& [u, h] : split.test) eligible.push_back(u);
  if (n_cold > eligible.size())
    throw ConfigError("cold-start: n_cold=" + std::to_string(n_cold) + " exceeds " +
                      std::to_string(eligible.size()) + " eligible users");
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates keeps the draw independent of the standard library.
  for (std::size_t k = 0; k < n_cold; ++k) {
    const auto j = k + static_cast<std::size_t>(rng() % (eligible.size() - k));
    std::swap(eligible[k], eligible[j]);
  }
  eligible.resize(n_cold);
  std::sort(eligible.begin(), eligible.end());
  const std::unordered_set<std::uint32_t> cold(eligible.begin(), eligible.end());

  const auto target = log.target_behavior();
  std::unordered_set<std::uint64_t> removed_pairs;
  auto pair_key = [](std::uint32_t u, std::uint32_t i) { return (std::uint64_t{u} << 32) | i; };
  for (const auto& e : split.train.events)
    if (e.behavior == target && cold.contains(e.user)) removed_pairs.insert(pair_key(e.user, e.item));
  std::erase_if(split.train.events,
                [&](const Event& e) { return removed_pairs.contains(pair_key(e.user, e.item)); });
  split.cold_users = std::move(eligible);
  return split;
}

// ---------------------------------------------------------------------------
// Persistence: TSV event files, id maps and a JSON sidecar.

inline void write_events_tsv(std::ostream& out, const std::vector<Event>& events) {
  for (const auto& e : events)
    out << e.user << '\t' << e.item << '\t' << e.behavior << '\t' << e.timestamp << '\n';
}

inline std::vector<Event> read_events_tsv(std::istream& in) {
  std::vector<Event> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = detail::split_fields(line, '\t');
    if (f.size() != 4) throw ParseError(line_no, "expected 4 fields");
    Event e;
    auto parse = [&](std::string_view s, auto& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size())
        throw ParseError(line_no, "bad integer '" + std::string(s) + "'");
    };
    parse(f[0], e.user);
    parse(f[1], e.item);
    parse(f[2], e.behavior);
    parse(f[3], e.timestamp);
    events.push_back(e);
  }
  return events;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot open '" + p.string() + "' for writing");
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open '" + p.string() + "'");
  return in;
}

inline void write_keys(const std::filesystem::path& p, const std::vector<std::string>& keys) {
  auto out = open_out(p);
  for (std::size_t k = 0; k < keys.size(); ++k) out << k << '\t' << keys[k] << '\n';
}

inline std::vector<std::string> read_keys(const std::filesystem::path& p) {
  auto in = open_in(p);
  std::vector<std::string> keys;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(keys.size() + 1, "id map line without tab");
    keys.push_back(line.substr(tab + 1));
  }
  return keys;
}

inline void write_held_out(const std::filesystem::path& p, const std::map<std::uint32_t, HeldOut>& m,
                           std::uint32_t behavior) {
  auto out = open_out(p);
  for (const auto& [u, h] : m) out << u << '\t' << h.item << '\t' << behavior << '\t' << h.timestamp << '\n';
}

inline std::map<std::uint32_t, HeldOut> read_held_out(const std::filesystem::path& p) {
  auto in = open_in(p);
  std::map<std::uint32_t, HeldOut> m;
  for (const auto& e : read_events_tsv(in)) m[e.user] = {e.item, e.timestamp};
  return m;
}

}  // namespace detail

inline nlohmann::json split_metadata(const Split& split) {
  const auto& t = split.train;
  nlohmann::json meta;
  meta["user_count"] = t.user_count;
  meta["item_count"] = t.item_count;
  meta["behavior_order"] = t.behavior_order;
  meta["train_counts"] = t.counts_per_behavior();
  meta["validation_count"] = split.validation.size();
  meta["test_count"] = split.test.size();
  meta["cold_users"] = split.cold_users;
  return meta;
}

/// Writes train.tsv, validation.tsv, test.tsv, users.tsv, items.tsv and
/// meta.json into `dir`.
inline void write_split(const std::filesystem::path& dir, const Split& split) {
  std::filesystem::create_directories(dir);
  {
    auto out = detail::open_out(dir / "train.tsv");
    write_events_tsv(out, split.train.events);
  }
  const auto target = split.train.target_behavior();
  detail::write_held_out(dir / "validation.tsv", split.validation, target);
  detail::write_held_out(dir / "test.tsv", split.test, target);
  detail::write_keys(dir / "users.tsv", split.train.user_keys);
  detail::write_keys(dir / "items.tsv", split.train.item_keys);
  auto out = detail::open_out(dir / "meta.json");
  out << split_metadata(split).dump(2) << '\n';
}

inline Split read_split(const std::filesystem::path& dir) {
  nlohmann::json meta;
  {
    auto in = detail::open_in(dir / "meta.json");
    try {
      in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("meta.json: ") + e.what());
    }
  }
  Split split;
  auto& t = split.train;
  t.user_count = meta.at("user_count").get<std::uint32_t>();
  t.item_count = meta.at("item_count").get<std::uint32_t>();
  t.behavior_order = meta.at("behavior_order").get<std::vector<std::string>>();
  if (meta.contains("cold_users")) split.cold_users = meta["cold_users"].get<std::vector<std::uint32_t>>();
  {
    auto in = detail::open_in(dir / "train.tsv");
    t.events = read_events_tsv(in);
  }
  t.user_keys = detail::read_keys(dir / "users.tsv");
  t.item_keys = detail::read_keys(dir / "items.tsv");
  split.validation = detail::read_held_out(dir / "validation.tsv");
  split.test = detail::read_held_out(dir / "test.tsv");
  if (t.user_keys.size() != t.user_count || t.item_keys.size() != t.item_count)
    throw DataError("split directory: id maps disagree with meta.json");
  for (const auto& e : t.events)
    if (e.user >= t.user_count || e.item >= t.item_count || e.behavior >= t.behavior_count())
      throw DataError("split directory: event id out of range");
  return split;
}

}  // namespace mbrec
