#pragma once

#include "icseg/rng.hpp"
#include "icseg/training.hpp"

namespace icseg::testutil {

// Tiny in-memory corpus: per category, images with one solid-color blob on a
// gray background. Category 1 draws squares, category 2 circles, category 3
// bars; each category keeps a distinctive color so the task is learnable at
// toy scale.
inline DataSample make_blob_sample(Rng& rng, int32_t category, int64_t res,
                                   const std::string& id) {
  DataSample s;
  s.id = id;
  s.categories = {category};
  s.image = Tensor<float>({3, res, res});
  s.labels = LabelGrid(res, res);
  s.labels.setZero();

  const float bg = float(rng.uniform(-0.2, 0.2));
  for (int64_t i = 0; i < s.image.size(); ++i) s.image[i] = bg;

  static const float palette[3][3] = {{0.8f, -0.6f, -0.6f},
                                      {-0.6f, 0.8f, -0.6f},
                                      {-0.6f, -0.6f, 0.8f}};
  const float* color = palette[(category - 1) % 3];
  const int64_t size = res / 4 + rng.below(res / 4);
  const int64_t cy = size / 2 + rng.below(res - size);
  const int64_t cx = size / 2 + rng.below(res - size);

  for (int64_t y = 0; y < res; ++y)
    for (int64_t x = 0; x < res; ++x) {
      bool inside = false;
      const int64_t dy = y - cy, dx = x - cx;
      if (category % 3 == 1) {
        inside = std::abs(dy) <= size / 2 && std::abs(dx) <= size / 2;
      } else if (category % 3 == 2) {
        inside = dy * dy + dx * dx <= (size / 2) * (size / 2);
      } else {
        inside = std::abs(dy) <= size / 4 && std::abs(dx) <= size / 2;
      }
      if (inside && y >= 0 && y < res && x >= 0 && x < res) {
        s.labels(y, x) = category;
        for (int64_t c = 0; c < 3; ++c) s.image.at(c, y, x) = color[c];
      }
    }
  return s;
}

inline EpisodeDataset make_blob_dataset(uint64_t seed, int64_t categories, int64_t per_category,
                                        int64_t res) {
  Rng rng(seed);
  EpisodeDataset data;
  for (int32_t c = 1; c <= categories; ++c)
    for (int64_t i = 0; i < per_category; ++i)
      data.add(make_blob_sample(rng, c, res, "s" + std::to_string(c) + "_" + std::to_string(i)));
  return data;
}

inline PipelineConfig toy_config(const std::string& variant, uint64_t seed = 1) {
  PipelineConfig cfg;
  cfg.variant = variant;
  cfg.resolution = 16;
  cfg.f_sp = 2;
  cfg.patch_size = 4;
  cfg.base_width = 16;
  cfg.channel_mults = {1, 2};
  cfg.attn_resolutions = {4};
  cfg.heads = 2;
  cfg.d_enc = 16;
  cfg.enc_depth = 1;
  cfg.enc_heads = 2;
  cfg.groups = 4;
  cfg.timesteps = 100;
  cfg.n_steps = 5;
  cfg.iters = 50;
  cfg.batch = 1;
  cfg.seed = seed;
  return cfg;
}

}  // namespace icseg::testutil
