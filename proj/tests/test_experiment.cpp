#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "fixtures.hpp"
#include "mbrec/experiment.hpp"

using namespace mbrec;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig quick_config(const fs::path& out) {
  ExperimentConfig c;
  c.data_synthetic = true;
  c.synth_users = 40;
  c.synth_items = 25;
  c.dim = 8;
  c.batch_size = 16;
  c.max_epochs = 4;
  c.ks = {5, 10};
  c.output_dir = out.string();
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MBREC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, EchoRoundTrips) {
  ExperimentConfig c;
  c.behavior_order = {"view", "collect", "cart", "buy"};
  c.layers = {1, 2, 0, 3};
  c.lr = 3e-3;
  c.reg = 0.1 + 0.2;  // not exactly representable as a short decimal
  c.task_weights = {0.0, 1.0 / 3.0, 1.0, 1.0};
  c.sweep_orders = {{"view", "buy"}, {"cart", "buy"}};
  c.sweep_layers = {{1}, {2, 2}};
  c.sweep_task_weights = {{1, 1}, {0, 1}};
  c.sweep_variants = {"full", "no_l2"};
  c.seed = 18446744073709551615ull;
  c.data_path = "/tmp/x y.tsv";
  const auto text = to_config_text(c);
  ExperimentConfig back;
  apply_config_text(back, text);
  EXPECT_EQ(to_config_text(back), text);
  EXPECT_EQ(back.reg, c.reg);
  EXPECT_EQ(back.task_weights, c.task_weights);
  EXPECT_EQ(back.sweep_orders, c.sweep_orders);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.data_path, c.data_path);
}

TEST(Config, ParsesCommentsAndReportsBadFields) {
  ExperimentConfig c;
  apply_config_text(c, "# header\n\nlr = 0.001  # inline\nbehavior_order=view>buy\nshortcut = off\n");
  EXPECT_EQ(c.lr, 0.001);
  EXPECT_EQ(c.behavior_order, (std::vector<std::string>{"view", "buy"}));
  EXPECT_FALSE(c.shortcut);
  try {
    apply_config_text(c, "dim = many\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("dim"), std::string::npos);
  }
  EXPECT_THROW(apply_config_text(c, "no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "just text\n"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "shortcut = maybe\n"), ConfigError);
}

TEST(Config, ValidationCatchesInconsistencies) {
  auto base = quick_config("unused");
  EXPECT_NO_THROW(validate(base, Mode::train));
  auto c = base;
  c.layers = {1, 2};
  EXPECT_THROW(validate(c, Mode::train), ConfigError);
  c = base;
  c.ties = "random";
  EXPECT_THROW(validate(c, Mode::train), ConfigError);
  c = base;
  c.node_dropout = 1.0;
  EXPECT_THROW(validate(c, Mode::train), ConfigError);
  c = base;
  c.data_synthetic = false;
  EXPECT_THROW(validate(c, Mode::train), ConfigError);
  c = base;
  EXPECT_THROW(validate(c, Mode::eval), ConfigError);
  c = base;
  c.sweep_orders = {{"buy", "view"}};
  EXPECT_THROW(validate(c, Mode::sweep), ConfigError);
  c = base;
  c.sweep_variants = {"half"};
  EXPECT_THROW(validate(c, Mode::sweep), ConfigError);
  c = base;
  c.ks = {0};
  EXPECT_THROW(validate(c, Mode::train), ConfigError);
}

TEST(Experiment, TrainWritesVersionedArtifacts) {
  fixtures::TempDir dir("train");
  std::ostringstream log;
  run_experiment(Mode::train, quick_config(dir.path()), log);
  for (const char* f : {"resolved_config.txt", "metrics.txt", "metrics.kv", "train_log.tsv", "embeddings.bin"})
    EXPECT_TRUE(fs::exists(dir.path() / f)) << f;
  EXPECT_EQ(slurp(dir.path() / "status.txt"), "ok\n");
  const std::string header = "# mbrec " + std::string(kVersion) + " seed=2023\n";
  for (const char* f : {"metrics.txt", "metrics.kv", "train_log.tsv"})
    EXPECT_EQ(slurp(dir.path() / f).substr(0, header.size()), header) << f;
  EXPECT_NE(slurp(dir.path() / "resolved_config.txt").find("seed = 2023"), std::string::npos);
}

TEST(Experiment, IdenticalSeedsGiveIdenticalBytes) {
  fixtures::TempDir a("det_a"), b("det_b");
  std::ostringstream log;
  run_experiment(Mode::train, quick_config(a.path()), log);
  run_experiment(Mode::train, quick_config(b.path()), log);
  EXPECT_EQ(slurp(a.path() / "metrics.kv"), slurp(b.path() / "metrics.kv"));
  EXPECT_EQ(slurp(a.path() / "embeddings.bin"), slurp(b.path() / "embeddings.bin"));
}

TEST(Experiment, EchoedConfigReproducesTheRun) {
  fixtures::TempDir a("echo_a"), b("echo_b");
  std::ostringstream log;
  auto cfg = quick_config(a.path());
  cfg.lr = 3e-3;
  cfg.layers = {2};
  run_experiment(Mode::train, cfg, log);
  auto replay = load_config_file(a.path() / "resolved_config.txt");
  replay.output_dir = b.path().string();
  run_experiment(Mode::train, replay, log);
  EXPECT_EQ(slurp(a.path() / "metrics.kv"), slurp(b.path() / "metrics.kv"));
  EXPECT_EQ(slurp(a.path() / "embeddings.bin"), slurp(b.path() / "embeddings.bin"));
}

TEST(Experiment, EvalOfDumpMatchesTrainMetrics) {
  fixtures::TempDir a("eval_a"), b("eval_b");
  std::ostringstream log;
  auto cfg = quick_config(a.path());
  run_experiment(Mode::train, cfg, log);
  cfg.output_dir = b.path().string();
  cfg.embeddings_path = (a.path() / "embeddings.bin").string();
  run_experiment(Mode::eval, cfg, log);
  EXPECT_EQ(slurp(a.path() / "metrics.kv"), slurp(b.path() / "metrics.kv"));
  cfg.behavior_order = {"view", "buy"};
  cfg.synth_conversion = {0.5};
  EXPECT_THROW(run_experiment(Mode::eval, cfg, log), ConfigError);
}

TEST(Experiment, SweepHasOneRowPerCell) {
  fixtures::TempDir dir("sweep");
  auto cfg = quick_config(dir.path());
  cfg.max_epochs = 2;
  cfg.sweep_orders = {{"view", "cart", "buy"}, {"view", "buy"}, {"cart", "buy"}};
  cfg.sweep_layers = {{1}, {0}};
  cfg.sweep_variants = {"full", "no_shortcut", "no_l2", "no_both"};
  std::ostringstream log;
  run_experiment(Mode::sweep, cfg, log);
  std::istringstream in(slurp(dir.path() / "sweep.tsv"));
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') rows.push_back(line);
  ASSERT_EQ(rows.size(), 1u + 3 * 2 * 4);
  EXPECT_EQ(rows[0].substr(0, 5), "order");
  EXPECT_EQ(rows[1].substr(0, 14), "view>cart>buy\t");
  std::set<std::string> keys;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    auto f = detail::split_fields(rows[r], '\t');
    EXPECT_TRUE(keys.insert(std::string(f[0]) + "|" + std::string(f[1]) + "|" + std::string(f[3])).second);
  }
}

TEST(Experiment, OtherModesWriteTheirOutputs) {
  fixtures::TempDir dir("modes");
  std::ostringstream log;
  auto cfg = quick_config(dir.path() / "synth");
  run_experiment(Mode::synth, cfg, log);
  ASSERT_TRUE(fs::exists(dir.path() / "synth" / "events.tsv"));

  cfg.data_synthetic = false;
  cfg.data_path = (dir.path() / "synth" / "events.tsv").string();
  cfg.output_dir = (dir.path() / "ingest").string();
  run_experiment(Mode::ingest, cfg, log);
  EXPECT_TRUE(fs::exists(dir.path() / "ingest" / "log" / "meta.json"));

  cfg.output_dir = (dir.path() / "split").string();
  run_experiment(Mode::split, cfg, log);
  const auto s = read_split(dir.path() / "split" / "split");
  EXPECT_FALSE(s.test.empty());

  cfg.output_dir = (dir.path() / "cold").string();
  cfg.cold_users = 5;
  run_experiment(Mode::cold_start, cfg, log);
  EXPECT_NE(slurp(dir.path() / "cold" / "metrics.kv").find("\t5\n"), std::string::npos);

  cfg.output_dir = (dir.path() / "bench").string();
  cfg.bench_epochs = 1;
  run_experiment(Mode::bench, cfg, log);
  EXPECT_NE(slurp(dir.path() / "bench" / "bench.txt").find("epoch_seconds"), std::string::npos);
}

TEST(Experiment, GuardMapsFailuresToExitCodes) {
  fixtures::TempDir dir("guard");
  std::ostringstream log, err;
  auto cfg = quick_config(dir.path());
  cfg.max_epochs = 1;
  EXPECT_EQ(run_guarded(Mode::train, cfg, log, err), kExitOk);
  cfg.ties = "bogus";
  EXPECT_EQ(run_guarded(Mode::train, cfg, log, err), kExitConfig);
  cfg.ties = "average";
  cfg.data_synthetic = false;
  cfg.data_path = (dir.path() / "missing.tsv").string();
  EXPECT_EQ(run_guarded(Mode::train, cfg, log, err), kExitRuntime);
  EXPECT_EQ(slurp(dir.path() / "status.txt").substr(0, 7), "failed:");
}

TEST(Cli, ExitCodes) {
  fixtures::TempDir dir("cli");
  const auto out = dir.path().string();
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train --lr fast --data_synthetic true"), 2);
  EXPECT_EQ(run_cli("train --unknown_flag 1"), 2);
  EXPECT_EQ(run_cli("train --data_path " + out + "/none.tsv --output_dir " + out + "/f"), 3);
  EXPECT_EQ(run_cli("synth --output_dir " + out + "/s --synth_users 30"), 0);
  EXPECT_EQ(run_cli("train --data_path " + out + "/s/events.tsv --output_dir " + out +
                    "/t --dim 8 --max_epochs 2 --ks 5,10"),
            0);
  {
    std::ofstream cfgfile(dir.path() / "c.txt");
    cfgfile << "dim = 8\nmax_epochs = 2\nks = 5,10\ndata_path = " << out << "/s/events.tsv\n";
  }
  EXPECT_EQ(run_cli("train --config " + out + "/c.txt --output_dir " + out + "/t2"), 0);
  EXPECT_EQ(slurp(dir.path() / "t" / "metrics.kv"), slurp(dir.path() / "t2" / "metrics.kv"));
  EXPECT_EQ(run_cli("train --config " + out + "/missing.txt"), 2);
}
