#pragma once

// One-pass head search: all candidate heads train in parallel on a shared
// base under the averaged per-head loss, then the head with the largest
// teacher-side KL discrepancy wins.

#include <chrono>
#include <set>

#include "hssl/engine.hpp"
#include "hssl/metrics.hpp"

namespace hssl {

struct SearchOptions {
  double data_fraction = 0.1;  // fraction of the training split used
  int eval_batch = 64;
};

// Deterministic data subset: a seeded shuffle of record indices, truncated.
inline std::vector<int> search_subset(int n, double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) throw config_error("search data fraction must lie in (0,1]");
  std::vector<int> order = epoch_shuffle(n, derive_seed(seed, {0x73756273}), 0);
  const int keep = std::max(1, static_cast<int>(std::lround(fraction * n)));
  order.resize(static_cast<size_t>(std::min(n, keep)));
  return order;
}

inline SearchResult run_search(const EngineConfig& cfg_in, const Dataset& train,
                               const std::vector<const ImageRecord*>& eval_records,
                               const SearchOptions& opts = {}, TrainHooks hooks = {}) {
  EngineConfig cfg = cfg_in;
  cfg.search_mode = true;
  if (cfg.heads.size() < 2) throw config_error("run_search: need at least two candidate heads");
  {
    std::set<std::string> structural;
    for (const auto& h : cfg.heads) {
      std::string key = std::to_string(static_cast<int>(h.blocks.front().mixer)) + ":" +
                        std::to_string(h.depth()) + ":" + std::to_string(h.blocks.front().width) + ":" +
                        std::to_string(h.blocks.front().mlp_ratio) + ":" + std::to_string(h.remove_first_shortcut);
      if (!structural.insert(key).second)
        throw config_error("run_search: candidate head specs must be distinct");
    }
  }

  Dataset subset;
  subset.num_classes = train.num_classes;
  subset.seed = train.seed;
  for (int idx : search_subset(static_cast<int>(train.size()), opts.data_fraction, cfg.seed))
    subset.records.push_back(train.records[static_cast<size_t>(idx)]);
  cfg.total_steps = steps_per_epoch(static_cast<int64_t>(subset.size()), cfg.optim.batch_size) * cfg.optim.epochs;

  const auto t0 = std::chrono::steady_clock::now();
  HsslEngine engine(cfg);
  run_training(engine, subset, nullptr, hooks);

  std::vector<DiscrepancyReport> reports;
  for (int h = 0; h < engine.head_count(); ++h) {
    std::vector<double> samples = engine.per_sample_discrepancy(eval_records, h, opts.eval_batch);
    reports.push_back(DiscrepancyReport::from_samples(cfg.heads[static_cast<size_t>(h)].id, std::move(samples),
                                                      cfg.optim.epochs - 1));
  }
  SearchResult res = select_head(reports);
  res.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.data_fraction = opts.data_fraction;
  return res;
}

}  // namespace hssl
