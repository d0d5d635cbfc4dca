// mbrec: command-line front end. Every subcommand takes --config FILE plus
// one --<key> VALUE override per configuration key.

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "mbrec/experiment.hpp"

namespace {

struct Subcommand {
  mbrec::Mode mode;
  const char* name;
  const char* help;
};

constexpr Subcommand kSubcommands[] = {
    {mbrec::Mode::ingest, "ingest", "parse, deduplicate and index an interaction file"},
    {mbrec::Mode::split, "split", "write the leave-one-out split"},
    {mbrec::Mode::train, "train", "train, evaluate on the test split and dump embeddings"},
    {mbrec::Mode::eval, "eval", "evaluate a saved embedding dump"},
    {mbrec::Mode::cold_start, "cold-start", "cold-start protocol on randomly chosen test users"},
    {mbrec::Mode::sweep, "sweep", "grid over behavior orders, layers, task weights and ablations"},
    {mbrec::Mode::bench, "bench", "time training epochs and evaluation"},
    {mbrec::Mode::synth, "synth", "write a synthetic funnel log"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbrec: train and evaluate multi-behavior recommenders"};
  app.set_version_flag("--version", mbrec::kVersion);
  app.require_subcommand(1);

  std::map<std::string, std::string> config_files;
  std::map<std::string, std::map<std::string, std::string>> overrides;
  for (const auto& sc : kSubcommands) {
    auto* sub = app.add_subcommand(sc.name, sc.help);
    sub->add_option("--config", config_files[sc.name], "key = value configuration file");
    for (const auto& key : mbrec::config_keys())
      sub->add_option("--" + key.name, overrides[sc.name][key.name], key.help);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? mbrec::kExitOk : mbrec::kExitConfig;
  }

  for (const auto& sc : kSubcommands) {
    auto* sub = app.get_subcommand(sc.name);
    if (!sub->parsed()) continue;
    mbrec::ExperimentConfig cfg;
    try {
      if (!config_files[sc.name].empty()) cfg = mbrec::load_config_file(config_files[sc.name]);
      for (const auto& key : mbrec::config_keys())
        if (sub->count("--" + key.name) > 0) key.set(cfg, overrides[sc.name][key.name]);
    } catch (const mbrec::ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return mbrec::kExitConfig;
    }
    return mbrec::run_guarded(sc.mode, cfg, std::cout, std::cerr);
  }
  return mbrec::kExitConfig;
}
