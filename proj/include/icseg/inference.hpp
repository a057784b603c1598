#pragma once

#include "icseg/pipeline.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace icseg {

struct GuidanceConfig {
  double gamma_q = 1.5;
  double gamma_tau = 7.0;
  int64_t n_steps = 20;

  void validate() const {
    check(n_steps >= 1, "guidance needs at least one step");
    check(std::isfinite(gamma_q) && std::isfinite(gamma_tau), "guidance weights must be finite");
  }
};

// e_null + gq * (e_q - e_null) + gt * (e_full - e_q); exactly e_full when
// both weights are one.
template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& e_null, const Tensor<S>& e_q, const Tensor<S>& e_full,
                      const GuidanceConfig& g) {
  check(e_null.same_shape(e_q) && e_q.same_shape(e_full), "cfg_combine: shape mismatch");
  if (g.gamma_q == 1.0 && g.gamma_tau == 1.0) return e_full;
  Tensor<S> out(e_null.shape());
  const S gq = S(g.gamma_q), gt = S(g.gamma_tau);
  for (int64_t i = 0; i < out.size(); ++i)
    out[i] = e_null[i] + gq * (e_q[i] - e_null[i]) + gt * (e_full[i] - e_q[i]);
  return out;
}

struct InferenceResult {
  MaskGrid mask;
  Tensor<float> pseudo_mask;  // decoded [3,H,W] prediction
};

using Prompt = std::pair<Tensor<float>, MaskGrid>;

// One-step inference: noise the query latent at t_f, one forward pass,
// decode, and recover the mask (the query image is subtracted when the
// augmented codec is active). Guidance does not apply to this variant.
inline InferenceResult infer_f(const Tensor<float>& query, const std::vector<Prompt>& prompts,
                               ModelStateF& m, uint64_t seed = 0) {
  check(!m.cfg.is_noise_variant(), "one-step inference requires a variant-f model");
  check(!prompts.empty(), "at least one prompt required");
  const int64_t cz = m.cfg.c_z(), hs = m.cfg.latent_size();
  Rng rng(seed ^ 0x696e666572ULL);

  Tensor<float> z_q = m.latent.encode(query);
  Tensor<float> eps = rng.normal_tensor<float>({cz, hs, hs});
  Tensor<float> z_in;
  if (m.cfg.f_literal_noise) {
    z_in = z_q;
    z_in += eps;
  } else {
    z_in = add_noise(z_q, eps, m.cfg.t_f, m.sched);
  }

  Tape<float> tape;
  std::vector<CondSlot<float>> conds{m.prompt_slot_multi(tape, prompts)};
  Value<float> pred = m.unet.forward(tape, tape.input(z_in.reshaped({1, cz, hs, hs})),
                                     {m.cfg.t_f}, conds, m.adapters, m.cfg.bias_floor);
  Tensor<float> z_out = pred.val().reshaped({cz, hs, hs});

  InferenceResult res;
  res.pseudo_mask = m.latent.decode(z_out);
  res.mask = pm::decode(res.pseudo_mask, query, m.cfg.codec_params());
  return res;
}

// Observer invoked after every reverse step: (step index, timestep, denoised
// pseudo-mask latent, the exact batched denoiser input used at this step).
using StepObserver =
    std::function<void(int64_t, int64_t, const Tensor<float>&, const Tensor<float>&)>;

// Multi-step guided inference. The pseudo-mask slot starts from Gaussian
// noise and is denoised by the deterministic reverse update; the query
// channels are re-concatenated fresh at every step. Each step runs the three
// guidance branches as one batched forward:
//   branch 0: (null query, null instruction)
//   branch 1: (query, null instruction)
//   branch 2: (query, instructions)
inline InferenceResult infer_n(const Tensor<float>& query, const std::vector<Prompt>& prompts,
                               ModelStateF& m, const GuidanceConfig& g, uint64_t seed = 0,
                               const StepObserver& observer = nullptr) {
  check(m.cfg.is_noise_variant(), "multi-step inference requires a variant-n model");
  check(!prompts.empty(), "at least one prompt required");
  g.validate();
  const int64_t cz = m.cfg.c_z(), hs = m.cfg.latent_size();
  Rng rng(seed ^ 0x696e666572ULL);

  Tensor<float> z_q = m.latent.encode(query);
  Tensor<float> z_null = null_query_latent<float>(cz, hs, hs);
  Tensor<float> z = rng.normal_tensor<float>({cz, hs, hs});

  const TimestepPlan plan = make_timestep_plan(m.sched.T, g.n_steps);
  for (size_t si = 0; si < plan.steps.size(); ++si) {
    const int64_t t = plan.steps[si];
    Tensor<float> z_in({3, 2 * cz, hs, hs});
    auto put = [&](int64_t row, const Tensor<float>& pm_slot, const Tensor<float>& q_slot) {
      std::copy(pm_slot.data(), pm_slot.data() + pm_slot.size(),
                z_in.data() + row * 2 * cz * hs * hs);
      std::copy(q_slot.data(), q_slot.data() + q_slot.size(),
                z_in.data() + row * 2 * cz * hs * hs + cz * hs * hs);
    };
    put(0, z, z_null);
    put(1, z, z_q);
    put(2, z, z_q);

    Tape<float> tape;
    std::vector<CondSlot<float>> conds;
    conds.push_back(m.null_slot(tape));
    conds.push_back(m.null_slot(tape));
    conds.push_back(m.prompt_slot_multi(tape, prompts));
    Value<float> pred = m.unet.forward(tape, tape.input(z_in), {t, t, t}, conds, m.adapters,
                                       m.cfg.bias_floor);
    const Tensor<float>& out3 = pred.val();
    auto branch = [&](int64_t row) {
      Tensor<float> e({cz, hs, hs});
      std::copy(out3.data() + row * cz * hs * hs, out3.data() + (row + 1) * cz * hs * hs,
                e.data());
      return e;
    };
    Tensor<float> eps_hat = cfg_combine(branch(0), branch(1), branch(2), g);
    z = reverse_step(z, eps_hat, t, plan.prev_of(si), m.sched, m.cfg.z0_clamp);
    if (observer) observer(int64_t(si), t, z, z_in);
  }

  InferenceResult res;
  res.pseudo_mask = m.latent.decode(z);
  res.mask = pm::decode(res.pseudo_mask, query, m.cfg.codec_params());
  return res;
}

// Variant dispatch with the model's configured guidance.
inline InferenceResult infer(const Tensor<float>& query, const std::vector<Prompt>& prompts,
                             ModelStateF& m, uint64_t seed = 0,
                             const StepObserver& observer = nullptr) {
  if (m.cfg.is_noise_variant()) {
    GuidanceConfig g{m.cfg.gamma_q, m.cfg.gamma_tau, m.cfg.n_steps};
    return infer_n(query, prompts, m, g, seed, observer);
  }
  return infer_f(query, prompts, m, seed);
}

// First-frame-conditioned video inference. Frame 0 carries the per-category
// annotations; every later frame runs single-category inference per category,
// and the per-category predictions are fused through the foreground-odds
// aggregation into one label map.
inline std::vector<LabelGrid> infer_video(const std::vector<Tensor<float>>& frames,
                                          const std::vector<MaskGrid>& first_frame_masks,
                                          ModelStateF& m, uint64_t seed = 0) {
  check(!frames.empty(), "empty frame list");
  const int64_t c = static_cast<int64_t>(first_frame_masks.size());
  check(c >= 1, "at least one category annotation required");
  const int64_t h = frames[0].dim(1), w = frames[0].dim(2);

  std::vector<LabelGrid> out;
  LabelGrid first(h, w);
  first.setZero();
  for (int64_t ci = 0; ci < c; ++ci) {
    const MaskGrid& mk = first_frame_masks[size_t(ci)];
    check(mk.rows() == h && mk.cols() == w, "annotation size mismatch");
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        if (mk(y, x)) first(y, x) = int32_t(ci + 1);
  }
  out.push_back(std::move(first));

  const CodecParams codec = m.cfg.codec_params();
  for (size_t f = 1; f < frames.size(); ++f) {
    std::vector<Tensor<float>> pm_minus;
    for (int64_t ci = 0; ci < c; ++ci) {
      std::vector<Prompt> prompts{{frames[0], first_frame_masks[size_t(ci)]}};
      InferenceResult r = infer(frames[f], prompts, m, seed + uint64_t(f) * 131 + uint64_t(ci));
      // the aggregation consumes image-subtracted channels for the augmented
      // codec; the subtracted image is the current query frame
      pm_minus.push_back(pm::subtract_image(r.pseudo_mask, frames[f], codec));
    }
    Tensor<float> probs = pm::category_probabilities(pm_minus);
    out.push_back(pm::assign_labels(probs));
  }
  return out;
}

}  // namespace icseg
