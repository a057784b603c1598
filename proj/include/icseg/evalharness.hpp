#pragma once

#include "icseg/inference.hpp"
#include "icseg/metrics.hpp"
#include "icseg/training.hpp"

#include <map>
#include <string>

namespace icseg {

struct EvalReport {
  std::map<int32_t, double> per_category_iou;
  double miou = 0;
  double fb_iou = 0;
  double fw_iou = 0;
  double j = 0;
  double f = 0;
  double jf = 0;
  int64_t episode_count = 0;

  std::string to_text() const;
};

// Fixed-seed episode protocol: episodes are sampled from the dataset with
// `seed` (so runs are comparable), inference runs per episode, and scores
// aggregate by category. Episode inference may run on worker threads unless
// the ICSEG_DETERMINISTIC environment variable is set to 1; aggregation is
// order-independent either way.
EvalReport evaluate(ModelStateF& model, const EpisodeDataset& data, int64_t episodes,
                    uint64_t seed, int64_t k_prompts = 1);

// All-foreground reference score on the same episode protocol.
EvalReport all_foreground_baseline(const EpisodeDataset& data, int64_t episodes, uint64_t seed,
                                   int32_t categories);

// First-frame propagation protocol over every video in the dataset.
EvalReport evaluate_videos(ModelStateF& model, const EpisodeDataset& data, uint64_t seed);

int32_t max_category(const EpisodeDataset& data);

}  // namespace icseg
