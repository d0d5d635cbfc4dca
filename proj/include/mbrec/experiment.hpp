#pragma once

// Flat key = value experiment configuration and the runner behind each CLI
// subcommand. Every artifact a run writes lands in `output_dir`.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mbrec/data.hpp"
#include "mbrec/errors.hpp"
#include "mbrec/eval.hpp"
#include "mbrec/graph.hpp"
#include "mbrec/model.hpp"
#include "mbrec/pipeline.hpp"
#include "mbrec/synth.hpp"
#include "mbrec/training.hpp"

namespace mbrec {

inline constexpr const char* kVersion = "0.1.0";

enum class Mode { ingest, split, train, eval, cold_start, sweep, bench, synth };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::ingest: return "ingest";
    case Mode::split: return "split";
    case Mode::train: return "train";
    case Mode::eval: return "eval";
    case Mode::cold_start: return "cold-start";
    case Mode::sweep: return "sweep";
    case Mode::bench: return "bench";
    case Mode::synth: return "synth";
  }
  return "?";
}

struct ExperimentConfig {
  // data
  std::string data_path;
  bool data_synthetic = false;
  std::string data_columns = "user,item,behavior,timestamp";
  std::string data_delimiter = "tab";
  bool data_header = false;
  bool data_drop_unlisted = false;
  std::vector<std::string> behavior_order{"view", "cart", "buy"};
  bool randomize_ties = false;

  // cascade
  std::vector<unsigned> layers{1};
  bool shortcut = true;
  bool l2_norm = true;
  double message_dropout = 0.0;
  double node_dropout = 0.0;
  bool node_dropout_per_batch = true;

  // training
  std::size_t dim = 64;
  double init_std = 0.01;
  std::size_t batch_size = 1024;
  std::size_t negatives = 4;
  double lr = 1e-2;
  double reg = 1e-4;
  std::vector<double> task_weights;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_epochs = 400;
  std::size_t patience = 20;
  std::size_t early_stop_k = 20;
  std::uint64_t seed = 2023;

  // evaluation
  std::vector<std::size_t> ks{10, 20, 50, 80};
  std::string ties = "average";
  bool exclude_validation = false;
  std::string precision = "float64";
  std::string embeddings_path;
  std::size_t cold_users = 1000;

  // sweep axes; an empty axis means "the single value configured above"
  std::vector<std::vector<std::string>> sweep_orders;
  std::vector<std::vector<unsigned>> sweep_layers;
  std::vector<std::vector<double>> sweep_task_weights;
  std::vector<std::string> sweep_variants;

  // synthetic funnel
  std::size_t synth_users = 50;
  std::size_t synth_items = 30;
  std::size_t synth_latent_dim = 8;
  std::size_t synth_views = 15;
  std::vector<double> synth_conversion{0.6, 0.5};
  double synth_sharpness = 2.0;

  std::size_t bench_epochs = 3;
  std::string output_dir = "mbrec_out";
};

// ---------------------------------------------------------------------------
// Value codecs.

namespace config_detail {

template <typename T>
struct Codec {
  std::function<T(std::string_view)> parse;
  std::function<std::string(const T&)> format;
};

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename Num>
Num parse_number(std::string_view s) {
  s = trim(s);
  Num v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("'" + std::string(s) + "' is not a valid number");
  return v;
}

template <typename Num>
std::string format_number(Num v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline Codec<std::string> string_codec() {
  return {[](std::string_view s) { return std::string(trim(s)); }, [](const std::string& s) { return s; }};
}

inline Codec<bool> bool_codec() {
  return {[](std::string_view s) {
            s = trim(s);
            if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
            if (s == "false" || s == "0" || s == "off" || s == "no") return false;
            throw ConfigError("'" + std::string(s) + "' is not a boolean");
          },
          [](const bool& b) { return std::string(b ? "true" : "false"); }};
}

template <typename Num>
Codec<Num> number_codec() {
  return {[](std::string_view s) { return parse_number<Num>(s); }, [](const Num& v) { return format_number(v); }};
}

template <typename T>
Codec<std::vector<T>> list_codec(Codec<T> inner, char sep) {
  return {[inner, sep](std::string_view s) {
            std::vector<T> out;
            s = trim(s);
            if (s.empty()) return out;
            for (auto part : detail::split_fields(s, sep)) out.push_back(inner.parse(part));
            return out;
          },
          [inner, sep](const std::vector<T>& v) {
            std::string out;
            for (std::size_t k = 0; k < v.size(); ++k) {
              if (k) out += sep;
              out += inner.format(v[k]);
            }
            return out;
          }};
}

inline Codec<std::vector<std::string>> order_codec() { return list_codec(string_codec(), '>'); }

}  // namespace config_detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

namespace config_detail {

template <typename T>
ConfigKey key(std::string name, std::string help, T ExperimentConfig::*member, Codec<T> codec) {
  return {name, std::move(help),
          [member, codec, name](ExperimentConfig& c, std::string_view v) {
            try {
              c.*member = codec.parse(v);
            } catch (const ConfigError& e) {
              throw ConfigError(name + ": " + e.what());
            }
          },
          [member, codec](const ExperimentConfig& c) { return codec.format(c.*member); }};
}

}  // namespace config_detail

/// Every configuration key, in echo order.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace config_detail;
  static const std::vector<ConfigKey> keys = [] {
    auto sz = number_codec<std::size_t>();
    auto real = number_codec<double>();
    auto flag = bool_codec();
    auto str = string_codec();
    return std::vector<ConfigKey>{
        key("data_path", "interaction file (delimiter-separated)", &ExperimentConfig::data_path, str),
        key("data_synthetic", "generate a synthetic funnel log instead of reading data_path",
            &ExperimentConfig::data_synthetic, flag),
        key("data_columns", "column order, names from user,item,behavior,timestamp,_",
            &ExperimentConfig::data_columns, str),
        key("data_delimiter", "tab, comma, space or a single character", &ExperimentConfig::data_delimiter, str),
        key("data_header", "skip the first line", &ExperimentConfig::data_header, flag),
        key("data_drop_unlisted", "drop behaviors missing from behavior_order instead of failing",
            &ExperimentConfig::data_drop_unlisted, flag),
        key("behavior_order", "behaviors in cascade order, target last (e.g. view>cart>buy)",
            &ExperimentConfig::behavior_order, order_codec()),
        key("randomize_ties", "break equal split timestamps randomly under seed", &ExperimentConfig::randomize_ties,
            flag),
        key("layers", "propagation layers per behavior (one value broadcasts; 0 skips a block)",
            &ExperimentConfig::layers, list_codec(number_codec<unsigned>(), ',')),
        key("shortcut", "residual shortcut in every block", &ExperimentConfig::shortcut, flag),
        key("l2_norm", "L2-normalize behavioral features", &ExperimentConfig::l2_norm, flag),
        key("message_dropout", "message dropout probability", &ExperimentConfig::message_dropout, real),
        key("node_dropout", "node dropout probability", &ExperimentConfig::node_dropout, real),
        key("node_dropout_per_batch", "redraw node dropout per batch (false: per epoch)",
            &ExperimentConfig::node_dropout_per_batch, flag),
        key("dim", "embedding size", &ExperimentConfig::dim, sz),
        key("init_std", "standard deviation of the normal initializer", &ExperimentConfig::init_std, real),
        key("batch_size", "users per mini-batch", &ExperimentConfig::batch_size, sz),
        key("negatives", "negatives per sampled positive", &ExperimentConfig::negatives, sz),
        key("lr", "Adam learning rate (grid: 1e-2, 3e-3, 1e-3, 1e-4)", &ExperimentConfig::lr, real),
        key("reg", "L2 regularization weight (grid: 1e-2, 1e-3, 3e-4, 1e-4)", &ExperimentConfig::reg, real),
        key("task_weights", "per-behavior loss weights, empty means all 1", &ExperimentConfig::task_weights,
            list_codec(real, ',')),
        key("adam_beta1", "Adam first-moment decay", &ExperimentConfig::adam_beta1, real),
        key("adam_beta2", "Adam second-moment decay", &ExperimentConfig::adam_beta2, real),
        key("adam_eps", "Adam epsilon", &ExperimentConfig::adam_eps, real),
        key("max_epochs", "epoch limit", &ExperimentConfig::max_epochs, sz),
        key("patience", "early-stopping patience in epochs", &ExperimentConfig::patience, sz),
        key("early_stop_k", "K of the validation HR used for early stopping", &ExperimentConfig::early_stop_k, sz),
        key("seed", "seed for initialization, sampling and splits", &ExperimentConfig::seed,
            number_codec<std::uint64_t>()),
        key("ks", "cutoffs for HR@K / NDCG@K", &ExperimentConfig::ks, list_codec(sz, ',')),
        key("ties", "average or pessimistic", &ExperimentConfig::ties, str),
        key("exclude_validation", "also drop the validation item from test candidates",
            &ExperimentConfig::exclude_validation, flag),
        key("precision", "float64 or float32 (evaluation only)", &ExperimentConfig::precision, str),
        key("embeddings_path", "embedding dump to evaluate (eval)", &ExperimentConfig::embeddings_path, str),
        key("cold_users", "number of cold-start users (cold-start)", &ExperimentConfig::cold_users, sz),
        key("sweep_orders", "';'-separated behavior orders", &ExperimentConfig::sweep_orders,
            list_codec(order_codec(), ';')),
        key("sweep_layers", "';'-separated layer lists", &ExperimentConfig::sweep_layers,
            list_codec(list_codec(number_codec<unsigned>(), ','), ';')),
        key("sweep_task_weights", "';'-separated task weight lists", &ExperimentConfig::sweep_task_weights,
            list_codec(list_codec(real, ','), ';')),
        key("sweep_variants", "','-separated from full,no_shortcut,no_l2,no_both",
            &ExperimentConfig::sweep_variants, list_codec(str, ',')),
        key("synth_users", "synthetic users", &ExperimentConfig::synth_users, sz),
        key("synth_items", "synthetic items", &ExperimentConfig::synth_items, sz),
        key("synth_latent_dim", "synthetic latent factor size", &ExperimentConfig::synth_latent_dim, sz),
        key("synth_views", "mean views per synthetic user", &ExperimentConfig::synth_views, sz),
        key("synth_conversion", "conversion probability per funnel step", &ExperimentConfig::synth_conversion,
            list_codec(real, ',')),
        key("synth_sharpness", "affinity sharpness of the synthetic funnel", &ExperimentConfig::synth_sharpness,
            real),
        key("bench_epochs", "timed epochs after one warm-up (bench)", &ExperimentConfig::bench_epochs, sz),
        key("output_dir", "directory for all artifacts", &ExperimentConfig::output_dir, str),
    };
  }();
  return keys;
}

inline const ConfigKey& find_config_key(std::string_view name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown configuration key '" + std::string(name) + "'");
}

inline void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  find_config_key(key).set(cfg, value);
}

/// Applies "key = value" lines on top of `cfg`. '#' starts a comment.
inline void apply_config_text(ExperimentConfig& cfg, std::string_view text) {
  std::size_t line_no = 0;
  for (auto raw : detail::split_fields(text, '\n')) {
    ++line_no;
    auto line = config_detail::trim(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = config_detail::trim(line.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    set_config_value(cfg, config_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(base, ss.str());
  return base;
}

/// Every key with its current value. Feeding this back through
/// apply_config_text reproduces `cfg`.
inline std::string to_config_text(const ExperimentConfig& cfg) {
  std::string out = "# mbrec " + std::string(kVersion) + "\n";
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline char resolve_delimiter(const std::string& d) {
  if (d == "tab" || d == "\\t") return '\t';
  if (d == "comma") return ',';
  if (d == "space") return ' ';
  if (d.size() == 1) return d[0];
  throw ConfigError("data_delimiter: expected tab, comma, space or one character, got '" + d + "'");
}

inline std::vector<unsigned> resolve_layers(const std::vector<unsigned>& layers, std::size_t behaviors) {
  if (layers.size() == 1) return std::vector<unsigned>(behaviors, layers[0]);
  if (layers.size() != behaviors)
    throw ConfigError("layers: expected 1 or " + std::to_string(behaviors) + " values, got " +
                      std::to_string(layers.size()));
  return layers;
}

inline void validate(const ExperimentConfig& cfg, Mode mode) {
  validate_behavior_order(cfg.behavior_order);
  const auto B = cfg.behavior_order.size();
  resolve_layers(cfg.layers, B);
  resolve_delimiter(cfg.data_delimiter);
  Schema::from_columns(cfg.data_columns, ',');
  check_probability(cfg.message_dropout, "message_dropout");
  check_probability(cfg.node_dropout, "node_dropout");
  if (cfg.ks.empty()) throw ConfigError("ks: need at least one cutoff");
  for (auto k : cfg.ks)
    if (k == 0) throw ConfigError("ks: cutoffs must be >= 1");
  if (cfg.ties != "average" && cfg.ties != "pessimistic")
    throw ConfigError("ties: expected average or pessimistic, got '" + cfg.ties + "'");
  if (cfg.precision != "float64" && cfg.precision != "float32")
    throw ConfigError("precision: expected float64 or float32, got '" + cfg.precision + "'");
  TrainConfig t;
  t.batch_size = cfg.batch_size;
  t.negatives = cfg.negatives;
  t.learning_rate = cfg.lr;
  t.reg_weight = cfg.reg;
  t.task_weights = cfg.task_weights;
  t.patience = cfg.patience;
  t.embedding_dim = cfg.dim;
  t.early_stop_k = cfg.early_stop_k;
  t.adam_beta1 = cfg.adam_beta1;
  t.adam_beta2 = cfg.adam_beta2;
  t.validate(B);
  if (!(cfg.init_std > 0.0)) throw ConfigError("init_std must be positive");
  if (mode != Mode::synth && !cfg.data_synthetic && cfg.data_path.empty())
    throw ConfigError("data_path: required unless data_synthetic = true");
  if (cfg.data_synthetic || mode == Mode::synth) {
    if (cfg.synth_conversion.size() + 1 != B)
      throw ConfigError("synth_conversion: expected " + std::to_string(B - 1) + " values for behavior_order");
  }
  if (mode == Mode::eval && cfg.embeddings_path.empty()) throw ConfigError("embeddings_path: required for eval");
  if (mode == Mode::cold_start && cfg.cold_users == 0) throw ConfigError("cold_users must be >= 1");
  if (mode == Mode::bench && cfg.bench_epochs == 0) throw ConfigError("bench_epochs must be >= 1");
  if (mode == Mode::sweep) {
    for (const auto& v : cfg.sweep_variants)
      if (v != "full" && v != "no_shortcut" && v != "no_l2" && v != "no_both")
        throw ConfigError("sweep_variants: unknown variant '" + v + "'");
    for (const auto& order : cfg.sweep_orders) {
      validate_behavior_order(order);
      if (order.back() != cfg.behavior_order.back())
        throw ConfigError("sweep_orders: every order must end with the target '" + cfg.behavior_order.back() + "'");
      for (const auto& layers : cfg.sweep_layers) resolve_layers(layers, order.size());
      for (const auto& w : cfg.sweep_task_weights)
        if (w.size() != order.size())
          throw ConfigError("sweep_task_weights: weight list length differs from an order's behavior count");
    }
  }
}

/// Library-level settings resolved from the flat configuration.
inline PipelineConfig to_pipeline(const ExperimentConfig& cfg, std::size_t behaviors) {
  PipelineConfig p;
  p.cascade.layers_per_behavior = resolve_layers(cfg.layers, behaviors);
  p.cascade.use_shortcut = cfg.shortcut;
  p.cascade.use_l2_norm = cfg.l2_norm;
  p.cascade.message_dropout = cfg.message_dropout;
  p.cascade.node_dropout = cfg.node_dropout;
  auto& t = p.train;
  t.batch_size = cfg.batch_size;
  t.negatives = cfg.negatives;
  t.learning_rate = cfg.lr;
  t.reg_weight = cfg.reg;
  t.task_weights = cfg.task_weights;
  t.adam_beta1 = cfg.adam_beta1;
  t.adam_beta2 = cfg.adam_beta2;
  t.adam_epsilon = cfg.adam_eps;
  t.max_epochs = cfg.max_epochs;
  t.patience = cfg.patience;
  t.early_stop_k = cfg.early_stop_k;
  t.embedding_dim = cfg.dim;
  t.init_stddev = cfg.init_std;
  t.node_dropout_per_batch = cfg.node_dropout_per_batch;
  t.seed = cfg.seed;
  p.ks = cfg.ks;
  p.eval.ties = cfg.ties == "pessimistic" ? TieRule::pessimistic : TieRule::average;
  p.eval.exclude_validation_item = cfg.exclude_validation;
  p.eval.single_precision = cfg.precision == "float32";
  return p;
}

inline FunnelSpec to_funnel(const ExperimentConfig& cfg) {
  FunnelSpec s;
  s.users = cfg.synth_users;
  s.items = cfg.synth_items;
  s.latent_dim = cfg.synth_latent_dim;
  s.views_per_user = cfg.synth_views;
  s.conversion = cfg.synth_conversion;
  s.behaviors = cfg.behavior_order;
  s.sharpness = cfg.synth_sharpness;
  return s;
}

/// Raw events after deduplication, from the configured file or generator.
inline std::vector<RawEvent> load_raw_events(const ExperimentConfig& cfg) {
  std::vector<RawEvent> raw;
  if (cfg.data_synthetic) {
    raw = generate_synthetic(to_funnel(cfg), cfg.seed);
  } else {
    std::ifstream in(cfg.data_path, std::ios::binary);
    if (!in) throw Error("cannot open data file '" + cfg.data_path + "'");
    const auto schema =
        Schema::from_columns(cfg.data_columns, resolve_delimiter(cfg.data_delimiter), cfg.data_header);
    raw = parse_events(in, schema, cfg.data_drop_unlisted ? std::vector<std::string>{} : cfg.behavior_order);
    if (cfg.data_drop_unlisted) raw = filter_behaviors(raw, cfg.behavior_order);
  }
  return dedup_earliest(raw);
}

inline Split load_split(const ExperimentConfig& cfg) {
  return split_leave_one_out(build_event_log(load_raw_events(cfg), cfg.behavior_order), cfg.seed,
                             cfg.randomize_ties);
}

// ---------------------------------------------------------------------------
// Artifact writers.

namespace run_detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << content;
}

inline std::string provenance(const ExperimentConfig& cfg) {
  return "# mbrec " + std::string(kVersion) + " seed=" + std::to_string(cfg.seed) + "\n";
}

inline std::string order_string(const std::vector<std::string>& order) { return detail::join(order, ">"); }

inline std::string train_log_text(const ExperimentConfig& cfg, const std::vector<std::string>& order,
                                  const std::vector<EpochRecord>& log) {
  std::ostringstream out;
  out << provenance(cfg) << "epoch";
  for (const auto& b : order) out << "\tloss_" << b;
  out << "\ttotal_loss\tval_hr@" << cfg.early_stop_k << "\tseconds\n";
  out << std::setprecision(10);
  for (const auto& r : log) {
    out << r.epoch;
    for (double l : r.behavior_losses) out << '\t' << l;
    out << '\t' << r.total_loss << '\t' << r.validation_hr << '\t' << r.seconds << '\n';
  }
  return out.str();
}

inline void write_metrics(const std::filesystem::path& dir, const ExperimentConfig& cfg, const MetricsReport& rep,
                          const std::string& basename = "metrics") {
  write_file(dir / (basename + ".txt"), provenance(cfg) + format_table(rep));
  write_file(dir / (basename + ".kv"), provenance(cfg) + format_kv(rep));
}

inline void write_log_dir(const std::filesystem::path& dir, const EventLog& log) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "events.tsv", std::ios::binary);
    write_events_tsv(out, log.events);
  }
  detail::write_keys(dir / "users.tsv", log.user_keys);
  detail::write_keys(dir / "items.tsv", log.item_keys);
  nlohmann::json meta;
  meta["user_count"] = log.user_count;
  meta["item_count"] = log.item_count;
  meta["behavior_order"] = log.behavior_order;
  meta["counts"] = log.counts_per_behavior();
  write_file(dir / "meta.json", meta.dump(2) + "\n");
}

inline EmbeddingDump make_dump(const FitResult& fit, std::span<const BehaviorGraph> graphs,
                               const CascadeConfig& cascade, const std::vector<std::string>& order) {
  auto state = forward_cascade(fit.embeddings, graphs, cascade);
  return {order, state.final_embeddings(), fit.embeddings};
}

struct SweepCell {
  std::vector<std::string> order;
  std::vector<unsigned> layers;
  std::vector<double> weights;
  std::string variant;
};

inline std::vector<SweepCell> sweep_cells(const ExperimentConfig& cfg) {
  const auto orders = cfg.sweep_orders.empty() ? std::vector<std::vector<std::string>>{cfg.behavior_order} : cfg.sweep_orders;
  const auto layer_sets = cfg.sweep_layers.empty() ? std::vector<std::vector<unsigned>>{cfg.layers} : cfg.sweep_layers;
  const auto weight_sets = cfg.sweep_task_weights.empty() ? std::vector<std::vector<double>>{cfg.task_weights} : cfg.sweep_task_weights;
  const auto variants = cfg.sweep_variants.empty() ? std::vector<std::string>{"full"} : cfg.sweep_variants;
  std::vector<SweepCell> cells;
  for (const auto& o : orders)
    for (const auto& l : layer_sets)
      for (const auto& w : weight_sets)
        for (const auto& v : variants) cells.push_back({o, resolve_layers(l, o.size()), w, v});
  return cells;
}

}  // namespace run_detail

/// Executes one subcommand. Throws on failure; see run_guarded for exit codes.
inline void run_experiment(Mode mode, const ExperimentConfig& cfg, std::ostream& log) {
  namespace fs = std::filesystem;
  using namespace run_detail;
  validate(cfg, mode);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  write_file(dir / "resolved_config.txt", to_config_text(cfg));
  write_file(dir / "status.txt", std::string("running ") + mode_name(mode) + "\n");
  const auto B = cfg.behavior_order.size();

  switch (mode) {
    case Mode::synth: {
      const auto events = generate_synthetic(to_funnel(cfg), cfg.seed);
      std::ofstream out(dir / "events.tsv", std::ios::binary);
      write_raw_events(out, events);
      log << "wrote " << events.size() << " events to " << (dir / "events.tsv").string() << '\n';
      break;
    }
    case Mode::ingest: {
      const auto elog = build_event_log(load_raw_events(cfg), cfg.behavior_order);
      write_log_dir(dir / "log", elog);
      log << "users " << elog.user_count << ", items " << elog.item_count << ", events " << elog.events.size() << '\n';
      break;
    }
    case Mode::split: {
      const auto split = load_split(cfg);
      write_split(dir / "split", split);
      log << "train " << split.train.events.size() << ", validation " << split.validation.size() << ", test "
          << split.test.size() << '\n';
      break;
    }
    case Mode::train: {
      const auto split = load_split(cfg);
      const auto pipe = to_pipeline(cfg, B);
      auto run = train_and_evaluate(split, pipe, [&](const EpochRecord& r, const EmbeddingTable&) {
        log << "epoch " << r.epoch << " loss " << r.total_loss << " val_hr@" << cfg.early_stop_k << " "
            << r.validation_hr << '\n';
      });
      write_file(dir / "train_log.tsv", train_log_text(cfg, cfg.behavior_order, run.fit.log));
      write_metrics(dir, cfg, run.test);
      std::ofstream out(dir / "embeddings.bin", std::ios::binary);
      write_embeddings(out, make_dump(run.fit, run.graphs, pipe.cascade, cfg.behavior_order));
      log << format_table(run.test);
      break;
    }
    case Mode::eval: {
      const auto split = load_split(cfg);
      std::ifstream in(cfg.embeddings_path, std::ios::binary);
      if (!in) throw Error("cannot open embeddings '" + cfg.embeddings_path + "'");
      const auto dump = read_embeddings(in);
      if (dump.behavior_order != cfg.behavior_order)
        throw ConfigError("embeddings_path: dump was trained with behavior order " + order_string(dump.behavior_order));
      if (dump.table.users.rows() != split.train.user_count || dump.table.items.rows() != split.train.item_count)
        throw DataError("embedding dump does not match the dataset's user/item counts");
      const auto graphs = build_graphs(split.train);
      const auto pipe = to_pipeline(cfg, B);
      const auto rep = evaluate(dump.table, graphs, pipe.cascade, split, pipe.ks, pipe.eval);
      write_metrics(dir, cfg, rep);
      log << format_table(rep);
      break;
    }
    case Mode::cold_start: {
      const auto elog = build_event_log(load_raw_events(cfg), cfg.behavior_order);
      const auto res = run_cold_start_eval(elog, cfg.cold_users, to_pipeline(cfg, B), cfg.seed);
      write_metrics(dir, cfg, res.report);
      std::ostringstream users;
      for (auto u : res.cold_users) users << u << '\t' << elog.user_keys[u] << '\n';
      write_file(dir / "cold_users.tsv", users.str());
      write_file(dir / "train_log.tsv", train_log_text(cfg, cfg.behavior_order, res.fit.log));
      log << format_table(res.report);
      break;
    }
    case Mode::sweep: {
      const auto raw = load_raw_events(cfg);
      const auto cells = sweep_cells(cfg);
      std::ostringstream table;
      table << provenance(cfg) << "order\tlayers\ttask_weights\tvariant\tbest_epoch";
      for (auto k : cfg.ks) table << "\tHR@" << k;
      for (auto k : cfg.ks) table << "\tNDCG@" << k;
      table << '\n' << std::setprecision(17);
      for (const auto& cell : cells) {
        auto cell_cfg = cfg;
        cell_cfg.behavior_order = cell.order;
        cell_cfg.layers = cell.layers;
        cell_cfg.task_weights = cell.weights;
        cell_cfg.shortcut = cell.variant == "full" || cell.variant == "no_l2";
        cell_cfg.l2_norm = cell.variant == "full" || cell.variant == "no_shortcut";
        const auto split = split_leave_one_out(build_event_log(filter_behaviors(raw, cell.order), cell.order),
                                               cfg.seed, cfg.randomize_ties);
        const auto run = train_and_evaluate(split, to_pipeline(cell_cfg, cell.order.size()));
        auto weights = config_detail::list_codec(config_detail::number_codec<double>(), ',').format(cell.weights);
        auto layers = config_detail::list_codec(config_detail::number_codec<unsigned>(), ',').format(cell.layers);
        table << order_string(cell.order) << '\t' << layers << '\t' << (weights.empty() ? "default" : weights)
              << '\t' << cell.variant << '\t' << run.fit.best_epoch;
        for (double v : run.test.hr) table << '\t' << v;
        for (double v : run.test.ndcg) table << '\t' << v;
        table << '\n';
        log << order_string(cell.order) << " layers=" << layers << " variant=" << cell.variant << " HR@"
            << cfg.ks.front() << "=" << run.test.hr.front() << '\n';
      }
      write_file(dir / "sweep.tsv", table.str());
      break;
    }
    case Mode::bench: {
      const auto split = load_split(cfg);
      const auto rep = benchmark(split, to_pipeline(cfg, B), cfg.bench_epochs);
      std::ostringstream out;
      out << provenance(cfg) << "behaviors\t" << rep.behaviors << "\nlayers\t"
          << config_detail::list_codec(config_detail::number_codec<unsigned>(), ',').format(rep.layers)
          << "\ndim\t" << rep.dim << "\nbatch_size\t" << rep.batch_size << "\nusers\t" << rep.users << "\nitems\t"
          << rep.items << "\nedges\t" << rep.edges << "\ntimed_epochs\t" << rep.timed_epochs
          << "\nepoch_seconds\t" << rep.mean_epoch_seconds << "\neval_seconds_per_1000_users\t"
          << rep.eval_seconds_per_1000_users << '\n';
      write_file(dir / "bench.txt", out.str());
      log << out.str();
      break;
    }
  }
  write_file(dir / "status.txt", "ok\n");
}

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// run_experiment with failures mapped to exit codes: 2 for configuration
/// errors, 3 for anything else. A failed run leaves "failed: ..." in
/// status.txt when the output directory exists.
inline int run_guarded(Mode mode, const ExperimentConfig& cfg, std::ostream& log, std::ostream& err) {
  auto mark_failed = [&](const std::string& what) {
    std::error_code ec;
    if (std::filesystem::is_directory(cfg.output_dir, ec)) {
      std::ofstream out(std::filesystem::path(cfg.output_dir) / "status.txt");
      out << "failed: " << what << '\n';
    }
  };
  try {
    run_experiment(mode, cfg, log);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    mark_failed(e.what());
    return kExitRuntime;
  }
}

}  // namespace mbrec
