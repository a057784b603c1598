#pragma once

#include "icseg/pipeline.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace icseg {

// One labelled sample: image, full label grid, categories present, and the
// video identity when the sample is a frame.
struct DataSample {
  std::string id;
  Tensor<float> image;  // [3,H,W] in [-1,1]
  LabelGrid labels;
  std::vector<int32_t> categories;
  int64_t video_id = -1;
  int64_t frame_index = -1;

  bool is_video() const { return video_id >= 0; }
};

// In-context task unit: query + k same-category prompts. For video sources
// the prompts come from the query's video.
struct Episode {
  Tensor<float> query_image;
  MaskGrid query_mask;
  std::vector<std::pair<Tensor<float>, MaskGrid>> prompts;
  int32_t category_id = 0;
  int64_t video_id = -1;
  size_t query_index = 0;
  std::vector<size_t> prompt_indices;
};

class EpisodeDataset {
 public:
  void add(DataSample s) {
    const size_t idx = samples_.size();
    for (int32_t c : s.categories) by_category_[c].push_back(idx);
    samples_.push_back(std::move(s));
  }

  size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const DataSample& sample(size_t i) const { return samples_[i]; }

  // Ordered (query, prompt) pools per category obeying the pairing rules:
  // image samples pair freely within a category; video frames only pair
  // inside their own video.
  struct PairPool {
    std::vector<size_t> image_members;
    std::vector<std::vector<size_t>> video_groups;  // each with >= 2 members
    int64_t total_pairs = 0;
  };

  const PairPool& pair_pool(int32_t category) const {
    auto it = pools_.find(category);
    if (it != pools_.end()) return it->second;
    PairPool pool;
    auto cit = by_category_.find(category);
    if (cit != by_category_.end()) {
      std::map<int64_t, std::vector<size_t>> groups;
      for (size_t idx : cit->second) {
        if (samples_[idx].is_video())
          groups[samples_[idx].video_id].push_back(idx);
        else
          pool.image_members.push_back(idx);
      }
      const int64_t n = static_cast<int64_t>(pool.image_members.size());
      pool.total_pairs = n * (n - 1);
      for (auto& [vid, members] : groups)
        if (members.size() >= 2) {
          const int64_t m = static_cast<int64_t>(members.size());
          pool.total_pairs += m * (m - 1);
          pool.video_groups.push_back(std::move(members));
        }
    }
    return pools_.emplace(category, std::move(pool)).first->second;
  }

  std::vector<int32_t> pairable_categories() const {
    std::vector<int32_t> out;
    for (const auto& [cat, members] : by_category_)
      if (pair_pool(cat).total_pairs > 0) out.push_back(cat);
    return out;
  }

  MaskGrid binary_mask(size_t idx, int32_t category) const {
    const LabelGrid& l = samples_[idx].labels;
    return l == category;
  }

 private:
  std::vector<DataSample> samples_;
  std::map<int32_t, std::vector<size_t>> by_category_;
  mutable std::map<int32_t, PairPool> pools_;
};

namespace detail {

// Uniform ordered pair from a pool: choose the sub-pool weighted by its pair
// count, then a distinct ordered pair inside it.
inline std::pair<size_t, size_t> draw_pair(const EpisodeDataset::PairPool& pool, Rng& rng) {
  int64_t ticket = rng.below(pool.total_pairs);
  const int64_t n = static_cast<int64_t>(pool.image_members.size());
  if (ticket < n * (n - 1)) {
    const int64_t i = ticket / (n - 1);
    int64_t j = ticket % (n - 1);
    if (j >= i) ++j;
    return {pool.image_members[size_t(i)], pool.image_members[size_t(j)]};
  }
  ticket -= n * (n - 1);
  for (const auto& group : pool.video_groups) {
    const int64_t m = static_cast<int64_t>(group.size());
    if (ticket < m * (m - 1)) {
      const int64_t i = ticket / (m - 1);
      int64_t j = ticket % (m - 1);
      if (j >= i) ++j;
      return {group[size_t(i)], group[size_t(j)]};
    }
    ticket -= m * (m - 1);
  }
  throw Error("pair pool bookkeeping error");
}

}  // namespace detail

// Uniform category among those with at least one valid ordered pair, then a
// uniform (query, prompt) pair. k > 1 adds distinct extra prompts from the
// query's partner pool.
inline Episode sample_episode(const EpisodeDataset& data, Rng& rng, int64_t k = 1) {
  check(k >= 1, "episode needs at least one prompt");
  const std::vector<int32_t> cats = data.pairable_categories();
  check(!cats.empty(), "no category has two pairable samples");
  const int32_t cat = cats[size_t(rng.below(int64_t(cats.size())))];
  const auto& pool = data.pair_pool(cat);
  auto [qi, pi] = detail::draw_pair(pool, rng);

  Episode ep;
  ep.category_id = cat;
  ep.query_index = qi;
  ep.video_id = data.sample(qi).video_id;
  ep.query_image = data.sample(qi).image;
  ep.query_mask = data.binary_mask(qi, cat);
  ep.prompts.emplace_back(data.sample(pi).image, data.binary_mask(pi, cat));
  ep.prompt_indices.push_back(pi);

  if (k > 1) {
    std::vector<size_t> partners;
    if (data.sample(qi).is_video()) {
      for (const auto& group : pool.video_groups)
        if (std::find(group.begin(), group.end(), qi) != group.end())
          for (size_t m : group)
            if (m != qi && m != pi) partners.push_back(m);
    } else {
      for (size_t m : pool.image_members)
        if (m != qi && m != pi) partners.push_back(m);
    }
    const int64_t extra = std::min<int64_t>(k - 1, int64_t(partners.size()));
    for (int64_t e = 0; e < extra; ++e) {
      const int64_t pick = rng.below(int64_t(partners.size()));
      const size_t idx = partners[size_t(pick)];
      partners.erase(partners.begin() + pick);
      ep.prompts.emplace_back(data.sample(idx).image, data.binary_mask(idx, cat));
      ep.prompt_indices.push_back(idx);
    }
  }
  return ep;
}

inline Tensor<float> hflip_image(const Tensor<float>& img) {
  Tensor<float> out(img.shape());
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) out.at(ch, y, x) = img.at(ch, y, w - 1 - x);
  return out;
}

inline MaskGrid hflip_mask(const MaskGrid& m) { return m.rowwise().reverse(); }

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Pixel-space mask loss: ||PM - decode(z_pred)||^2 mean; gradients flow
// through the latent decoder.
inline Value<float> loss_f_pixel(Tape<float>& t, const Tensor<float>& pm_target,
                                 Value<float> z_pred, const LatentCodec& codec) {
  return mse(codec.decode_value(z_pred), t.input(pm_target));
}

// Latent-space mask loss: ||z_pm - z_pred||^2 mean.
inline Value<float> loss_f_latent(Tape<float>& t, const Tensor<float>& z_pm,
                                  Value<float> z_pred) {
  return mse(z_pred, t.input(z_pm));
}

// Noise-prediction loss: ||eps - eps_pred||^2 mean.
inline Value<float> loss_n(Tape<float>& t, const Tensor<float>& eps_true,
                           Value<float> eps_pred) {
  return mse(eps_pred, t.input(eps_true));
}

// Per-episode condition dropout: the query latent and the instruction are
// nulled independently, each with probability p.
struct DropoutDraw {
  bool drop_query = false;
  bool drop_instruction = false;
};

inline DropoutDraw draw_condition_dropout(Rng& rng, double p) {
  DropoutDraw d;
  d.drop_query = rng.bernoulli(p);
  d.drop_instruction = rng.bernoulli(p);
  return d;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Decoupled weight decay Adam. Moments exist only for trainable parameters.
class AdamW {
 public:
  struct Slot {
    Tensor<float> m, v;
  };

  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void init(ParamRegistry<float>& reg) {
    slots_.clear();
    step_count_ = 0;
    reg.for_each([&](const std::string& name, Parameter<float>& p) {
      if (p.trainable)
        slots_.emplace(name, Slot{Tensor<float>(p.value.shape()),
                                  Tensor<float>(p.value.shape())});
    });
  }

  void step(ParamRegistry<float>& reg, double lr, double weight_decay) {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1, double(step_count_));
    const double bc2 = 1.0 - std::pow(beta2, double(step_count_));
    reg.for_each([&](const std::string& name, Parameter<float>& p) {
      if (!p.trainable) return;
      auto it = slots_.find(name);
      check(it != slots_.end(), "optimizer slot missing for " + name);
      Slot& s = it->second;
      for (int64_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        const double m = beta1 * s.m[i] + (1.0 - beta1) * g;
        const double v = beta2 * s.v[i] + (1.0 - beta2) * g * g;
        s.m[i] = float(m);
        s.v[i] = float(v);
        const double mh = m / bc1;
        const double vh = v / bc2;
        double x = p.value[i];
        x -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * x);
        p.value[i] = float(x);
      }
    });
  }

  int64_t step_count() const { return step_count_; }
  void set_step_count(int64_t t) { step_count_ = t; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  std::map<std::string, Slot> slots_;
  int64_t step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Training state and step
// ---------------------------------------------------------------------------

struct TrainState {
  ModelStateF model;
  AdamW opt;
  Rng rng;
  int64_t step = 0;
  std::vector<float> loss_log;
  int64_t dropped_query = 0;
  int64_t dropped_instruction = 0;
  int64_t episodes_seen = 0;

  static TrainState init(const PipelineConfig& cfg) {
    TrainState st;
    st.model = ModelStateF::build(cfg);
    st.opt.init(st.model.params);
    st.rng.reseed(cfg.seed ^ 0x747261696eULL);
    return st;
  }

  double lr_at(int64_t s) const {
    // linear decay to zero over the configured iterations
    const double frac = double(std::max<int64_t>(model.cfg.iters - s, 0)) /
                        double(model.cfg.iters);
    return model.cfg.lr * frac;
  }
};

// One optimizer update over a batch of episodes. Per-episode draw order is
// fixed (query dropout, instruction dropout, timestep, noise) so runs are
// bit-reproducible under a fixed seed.
inline float train_step(TrainState& st, const std::vector<Episode>& batch) {
  check(!batch.empty(), "empty training batch");
  ModelStateF& m = st.model;
  const PipelineConfig& cfg = m.cfg;
  const int64_t cz = cfg.c_z(), hs = cfg.latent_size();
  const bool noise_variant = cfg.is_noise_variant();
  const int64_t c_in = noise_variant ? 2 * cz : cz;
  const int64_t b = static_cast<int64_t>(batch.size());

  Tape<float> tape;
  const size_t bsz = size_t(b);
  Tensor<float> z_in({b, c_in, hs, hs});
  std::vector<int64_t> tsteps(bsz);
  std::vector<CondSlot<float>> conds;
  std::vector<Tensor<float>> pm_targets(bsz);   // variant f
  std::vector<Tensor<float>> latent_targets(bsz);
  Tensor<float> eps_target({b, cz, hs, hs});    // variant n

  for (int64_t i = 0; i < b; ++i) {
    const Episode& ep = batch[size_t(i)];
    check(!ep.prompts.empty(), "episode without prompts");
    const DropoutDraw drop = draw_condition_dropout(st.rng, cfg.p_drop);
    const bool drop_q = drop.drop_query;
    const bool drop_tau = drop.drop_instruction;
    st.dropped_query += drop_q ? 1 : 0;
    st.dropped_instruction += drop_tau ? 1 : 0;
    ++st.episodes_seen;
    const int64_t t_ep = noise_variant ? st.rng.below(cfg.timesteps) : cfg.t_f;
    Tensor<float> eps = st.rng.normal_tensor<float>({cz, hs, hs});

    Tensor<float> z_q = drop_q ? null_query_latent<float>(cz, hs, hs)
                               : m.latent.encode(ep.query_image);
    tsteps[size_t(i)] = t_ep;

    if (noise_variant) {
      Tensor<float> pm =
          pm::encode(ep.query_mask, ep.query_image, cfg.codec_params());
      Tensor<float> z_pm = m.latent.encode(pm);
      Tensor<float> noisy = add_noise(z_pm, eps, t_ep, m.sched);
      std::copy(noisy.data(), noisy.data() + noisy.size(), z_in.data() + i * c_in * hs * hs);
      std::copy(z_q.data(), z_q.data() + z_q.size(),
                z_in.data() + i * c_in * hs * hs + cz * hs * hs);
      std::copy(eps.data(), eps.data() + eps.size(), eps_target.data() + i * cz * hs * hs);
    } else {
      Tensor<float> noisy;
      if (cfg.f_literal_noise) {
        noisy = z_q;
        noisy += eps;
      } else {
        noisy = add_noise(z_q, eps, t_ep, m.sched);
      }
      std::copy(noisy.data(), noisy.data() + noisy.size(), z_in.data() + i * c_in * hs * hs);
      Tensor<float> pm =
          pm::encode(ep.query_mask, ep.query_image, cfg.codec_params());
      latent_targets[size_t(i)] = m.latent.encode(pm);
      pm_targets[size_t(i)] = std::move(pm);
    }

    if (drop_tau) {
      conds.push_back(m.null_slot(tape));
    } else if (ep.prompts.size() == 1) {
      conds.push_back(m.prompt_slot(tape, ep.prompts[0].first, ep.prompts[0].second));
    } else {
      conds.push_back(m.prompt_slot_multi(tape, ep.prompts));
    }
  }

  m.params.zero_grads();
  Value<float> pred =
      m.unet.forward(tape, tape.input(std::move(z_in)), tsteps, conds, m.adapters,
                     cfg.bias_floor);

  Value<float> loss;
  if (noise_variant) {
    loss = loss_n(tape, eps_target, pred);
  } else if (cfg.optimization_space == "pixel") {
    std::vector<Value<float>> per_episode;
    for (int64_t i = 0; i < b; ++i) {
      Value<float> zi = reshape(slice(pred, 0, i, 1), {cz, hs, hs});
      per_episode.push_back(loss_f_pixel(tape, pm_targets[size_t(i)], zi, m.latent));
    }
    loss = per_episode[0];
    for (size_t i = 1; i < per_episode.size(); ++i) loss = add(loss, per_episode[i]);
    loss = scale(loss, 1.f / float(b));
  } else {
    std::vector<Value<float>> per_episode;
    for (int64_t i = 0; i < b; ++i) {
      Value<float> zi = reshape(slice(pred, 0, i, 1), {cz, hs, hs});
      per_episode.push_back(loss_f_latent(tape, latent_targets[size_t(i)], zi));
    }
    loss = per_episode[0];
    for (size_t i = 1; i < per_episode.size(); ++i) loss = add(loss, per_episode[i]);
    loss = scale(loss, 1.f / float(b));
  }

  tape.backward(loss);
  st.opt.step(m.params, st.lr_at(st.step), cfg.weight_decay);
  ++st.step;
  const float lv = loss.val()[0];
  st.loss_log.push_back(lv);
  return lv;
}

// Sample + augment one batch, matching the fixed draw order used everywhere.
inline std::vector<Episode> next_batch(TrainState& st, const EpisodeDataset& data) {
  std::vector<Episode> batch;
  for (int64_t i = 0; i < st.model.cfg.batch; ++i) {
    Episode ep = sample_episode(data, st.rng);
    if (st.rng.bernoulli(st.model.cfg.flip_prob)) {
      ep.query_image = hflip_image(ep.query_image);
      ep.query_mask = hflip_mask(ep.query_mask);
    }
    for (auto& [img, mask] : ep.prompts)
      if (st.rng.bernoulli(st.model.cfg.flip_prob)) {
        img = hflip_image(img);
        mask = hflip_mask(mask);
      }
    batch.push_back(std::move(ep));
  }
  return batch;
}

inline void run_training(TrainState& st, const EpisodeDataset& data,
                         const std::function<void(int64_t, float)>& progress = nullptr) {
  while (st.step < st.model.cfg.iters) {
    std::vector<Episode> batch = next_batch(st, data);
    const float loss = train_step(st, batch);
    if (progress) progress(st.step, loss);
  }
}

}  // namespace icseg
