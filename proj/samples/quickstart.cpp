// Trains on a small synthetic funnel log and prints test metrics.

#include <iostream>

#include "mbrec/pipeline.hpp"
#include "mbrec/synth.hpp"

int main() {
  mbrec::FunnelSpec spec;
  spec.users = 200;
  spec.items = 80;
  const auto raw = mbrec::dedup_earliest(mbrec::generate_synthetic(spec, 7));
  const auto log = mbrec::build_event_log(raw, spec.behaviors);
  const auto split = mbrec::split_leave_one_out(log);

  mbrec::PipelineConfig cfg;
  cfg.cascade = mbrec::CascadeConfig::uniform(log.behavior_count(), 1);
  cfg.train.embedding_dim = 16;
  cfg.train.batch_size = 64;
  cfg.train.max_epochs = 30;
  cfg.ks = {5, 10};

  const auto run = mbrec::train_and_evaluate(split, cfg, [](const mbrec::EpochRecord& r, const auto&) {
    std::cout << "epoch " << r.epoch << " loss " << r.total_loss << '\n';
  });
  std::cout << mbrec::format_table(run.test);
}
