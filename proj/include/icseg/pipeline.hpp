#pragma once

#include "icseg/config.hpp"
#include "icseg/conditioning.hpp"
#include "icseg/denoiser.hpp"
#include "icseg/latent_codec.hpp"
#include "icseg/pmcodec.hpp"
#include "icseg/schedule.hpp"

#include <atomic>
#include <string>

namespace icseg {

// Everything needed to build and run one model end to end. Serializes to the
// flat key-value format; defaults are the desk-scale configuration.
struct PipelineConfig {
  // meta-architecture: "f" = one-step, predicts the mask latent directly;
  // "n" = multi-step, predicts noise on a channel-concatenated input
  std::string variant = "f";
  std::string optimization_space = "pixel";  // f only: "pixel" | "latent"

  // pseudo-mask codec
  double codec_a = -0.6;
  double codec_b = 0.6;
  double codec_alpha = 4.0;
  bool codec_augmented = true;

  // latent codec
  int64_t f_sp = 2;
  std::string latent_mix = "identity";  // "identity" | "random"
  uint64_t latent_mix_seed = 0;

  // noise schedule
  int64_t timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  // geometry
  int64_t resolution = 64;

  // denoiser
  int64_t base_width = 64;
  std::vector<int64_t> channel_mults = {1, 2};
  std::vector<int64_t> attn_resolutions = {16};
  int64_t heads = 4;
  int64_t d_enc = 128;
  int64_t groups = 8;
  double bias_floor = 1e-6;

  // prompt encoder
  int64_t patch_size = 8;
  int64_t enc_depth = 2;
  int64_t enc_heads = 4;

  // low-rank adaptation (rank 0 = full training)
  int64_t lora_rank = 0;
  double lora_scale = 1.0;
  std::string lora_targets = "qkvo";

  // training
  int64_t iters = 2000;
  int64_t batch = 2;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double p_drop = 0.05;
  int64_t t_f = 0;
  bool f_literal_noise = false;  // one-step input as z_q + eps instead of add_noise
  double flip_prob = 0.5;
  uint64_t seed = 0;

  // guided inference
  double gamma_q = 1.5;
  double gamma_tau = 7.0;
  int64_t n_steps = 20;
  double z0_clamp = 3.0;  // reverse-update reconstruction guard; 0 disables

  int64_t c_z() const { return 3 * f_sp * f_sp; }
  int64_t latent_size() const { return resolution / f_sp; }
  bool is_noise_variant() const { return variant == "n"; }

  void validate() const {
    check(variant == "f" || variant == "n", "variant must be `f` or `n`");
    check(optimization_space == "pixel" || optimization_space == "latent",
          "optimization_space must be `pixel` or `latent`");
    check(latent_mix == "identity" || latent_mix == "random",
          "latent_mix must be `identity` or `random`");
    check(resolution % f_sp == 0, "resolution not divisible by the latent factor");
    check(resolution % patch_size == 0, "resolution not divisible by the patch size");
    check(p_drop >= 0.0 && p_drop <= 1.0, "p_drop must be in [0, 1]");
    check(t_f >= 0 && t_f < timesteps, "t_f out of schedule range");
    check(n_steps >= 1 && n_steps <= timesteps, "n_steps must be in [1, T]");
    check(std::isfinite(gamma_q) && std::isfinite(gamma_tau), "guidance weights must be finite");
    check(iters >= 1 && batch >= 1, "iters and batch must be positive");
    codec_params().validate();
  }

  CodecParams codec_params() const {
    return CodecParams{codec_a, codec_b, codec_alpha, codec_augmented};
  }

  UNetConfig unet_config() const {
    UNetConfig u;
    u.c_in = is_noise_variant() ? 2 * c_z() : c_z();
    u.c_out = c_z();
    u.input_size = latent_size();
    u.base_width = base_width;
    u.channel_mults = channel_mults;
    u.attn_resolutions = attn_resolutions;
    u.heads = heads;
    u.d_enc = d_enc;
    u.groups = groups;
    return u;
  }

  PromptEncoderConfig encoder_config() const {
    PromptEncoderConfig e;
    e.image_size = resolution;
    e.patch_size = patch_size;
    e.embed_dim = d_enc;
    e.depth = enc_depth;
    e.heads = enc_heads;
    return e;
  }

  LoRAConfig lora_config() const {
    LoRAConfig l;
    l.rank = lora_rank;
    l.scale = lora_scale;
    l.targets = lora_targets;
    return l;
  }

  static PipelineConfig from_kv(const KeyValueConfig& kv) {
    PipelineConfig c;
    c.variant = kv.get_string("variant", c.variant);
    c.optimization_space = kv.get_string("optimization_space", c.optimization_space);
    c.codec_a = kv.get_double("codec_a", c.codec_a);
    c.codec_b = kv.get_double("codec_b", c.codec_b);
    c.codec_alpha = kv.get_double("codec_alpha", c.codec_alpha);
    c.codec_augmented = kv.get_bool("codec_augmented", c.codec_augmented);
    c.f_sp = kv.get_int("f_sp", c.f_sp);
    c.latent_mix = kv.get_string("latent_mix", c.latent_mix);
    c.latent_mix_seed = uint64_t(kv.get_int("latent_mix_seed", int64_t(c.latent_mix_seed)));
    c.timesteps = kv.get_int("timesteps", c.timesteps);
    c.beta_start = kv.get_double("beta_start", c.beta_start);
    c.beta_end = kv.get_double("beta_end", c.beta_end);
    c.resolution = kv.get_int("resolution", c.resolution);
    c.base_width = kv.get_int("base_width", c.base_width);
    c.channel_mults = kv.get_int_list("channel_mults", c.channel_mults);
    c.attn_resolutions = kv.get_int_list("attn_resolutions", c.attn_resolutions);
    c.heads = kv.get_int("heads", c.heads);
    c.d_enc = kv.get_int("d_enc", c.d_enc);
    c.groups = kv.get_int("groups", c.groups);
    c.bias_floor = kv.get_double("bias_floor", c.bias_floor);
    c.patch_size = kv.get_int("patch_size", c.patch_size);
    c.enc_depth = kv.get_int("enc_depth", c.enc_depth);
    c.enc_heads = kv.get_int("enc_heads", c.enc_heads);
    c.lora_rank = kv.get_int("lora_rank", c.lora_rank);
    c.lora_scale = kv.get_double("lora_scale", c.lora_scale);
    c.lora_targets = kv.get_string("lora_targets", c.lora_targets);
    c.iters = kv.get_int("iters", c.iters);
    c.batch = kv.get_int("batch", c.batch);
    c.lr = kv.get_double("lr", c.lr);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.p_drop = kv.get_double("p_drop", c.p_drop);
    c.t_f = kv.get_int("t_f", c.t_f);
    c.f_literal_noise = kv.get_bool("f_literal_noise", c.f_literal_noise);
    c.flip_prob = kv.get_double("flip_prob", c.flip_prob);
    c.seed = uint64_t(kv.get_int("seed", int64_t(c.seed)));
    c.gamma_q = kv.get_double("gamma_q", c.gamma_q);
    c.gamma_tau = kv.get_double("gamma_tau", c.gamma_tau);
    c.n_steps = kv.get_int("n_steps", c.n_steps);
    c.z0_clamp = kv.get_double("z0_clamp", c.z0_clamp);
    c.validate();
    return c;
  }

  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    kv.set("variant", variant);
    kv.set("optimization_space", optimization_space);
    kv.set_double("codec_a", codec_a);
    kv.set_double("codec_b", codec_b);
    kv.set_double("codec_alpha", codec_alpha);
    kv.set_bool("codec_augmented", codec_augmented);
    kv.set_int("f_sp", f_sp);
    kv.set("latent_mix", latent_mix);
    kv.set_int("latent_mix_seed", int64_t(latent_mix_seed));
    kv.set_int("timesteps", timesteps);
    kv.set_double("beta_start", beta_start);
    kv.set_double("beta_end", beta_end);
    kv.set_int("resolution", resolution);
    kv.set_int("base_width", base_width);
    kv.set_int_list("channel_mults", channel_mults);
    kv.set_int_list("attn_resolutions", attn_resolutions);
    kv.set_int("heads", heads);
    kv.set_int("d_enc", d_enc);
    kv.set_int("groups", groups);
    kv.set_double("bias_floor", bias_floor);
    kv.set_int("patch_size", patch_size);
    kv.set_int("enc_depth", enc_depth);
    kv.set_int("enc_heads", enc_heads);
    kv.set_int("lora_rank", lora_rank);
    kv.set_double("lora_scale", lora_scale);
    kv.set("lora_targets", lora_targets);
    kv.set_int("iters", iters);
    kv.set_int("batch", batch);
    kv.set_double("lr", lr);
    kv.set_double("weight_decay", weight_decay);
    kv.set_double("p_drop", p_drop);
    kv.set_int("t_f", t_f);
    kv.set_bool("f_literal_noise", f_literal_noise);
    kv.set_double("flip_prob", flip_prob);
    kv.set_int("seed", int64_t(seed));
    kv.set_double("gamma_q", gamma_q);
    kv.set_double("gamma_tau", gamma_tau);
    kv.set_int("n_steps", n_steps);
    kv.set_double("z0_clamp", z0_clamp);
    return kv;
  }
};

// Model bundle: codec, schedule, prompt encoder, denoiser, adapters, and the
// flat parameter table over all of them.
template <typename S>
struct ModelState {
  PipelineConfig cfg;
  LatentCodec latent{2};
  NoiseSchedule sched;
  PromptEncoder<S> encoder;
  UNet<S> unet;
  AdapterSet<S> adapters;
  ParamRegistry<S> params;

  // `params` holds pointers into the sibling members, so any move or copy
  // must re-point it at the new object's parameters.
  ModelState() = default;
  ModelState(ModelState&& o) noexcept { *this = std::move(o); }
  ModelState& operator=(ModelState&& o) noexcept {
    cfg = std::move(o.cfg);
    latent = std::move(o.latent);
    sched = std::move(o.sched);
    encoder = std::move(o.encoder);
    unet = std::move(o.unet);
    adapters = std::move(o.adapters);
    fg_warned_.store(o.fg_warned_.load());
    rebuild_registry();
    return *this;
  }
  ModelState(const ModelState& o) { *this = o; }
  ModelState& operator=(const ModelState& o) {
    cfg = o.cfg;
    latent = o.latent;
    sched = o.sched;
    encoder = o.encoder;
    unet = o.unet;
    adapters = o.adapters;
    fg_warned_.store(o.fg_warned_.load());
    rebuild_registry();
    return *this;
  }

  static ModelState build(const PipelineConfig& cfg) {
    cfg.validate();
    ModelState m;
    m.cfg = cfg;
    m.latent = cfg.latent_mix == "random"
                   ? LatentCodec::with_random_mix(cfg.f_sp, cfg.latent_mix_seed)
                   : LatentCodec(cfg.f_sp);
    m.sched = make_linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);
    Rng init_rng(cfg.seed ^ 0x6d6f64656cULL);
    m.encoder = PromptEncoder<S>(cfg.encoder_config(), init_rng);
    m.unet = UNet<S>(cfg.unet_config(), init_rng);
    m.adapters = AdapterSet<S>(init_rng, cfg.d_enc, m.unet.cross_attention_widths());
    if (cfg.lora_rank > 0) {
      m.unet.apply_lora(cfg.lora_config(), init_rng);
      m.freeze_for_lora();
    }
    m.rebuild_registry();
    return m;
  }

  // Under low-rank adaptation everything pretrain-like is frozen: the whole
  // prompt encoder and the denoiser base. LoRA factors, adapters and the
  // learned null token stay trainable.
  void freeze_for_lora() {
    ParamRegistry<S> enc_reg;
    encoder.register_params(enc_reg, "enc");
    enc_reg.freeze_all();
    unet.freeze_base();
  }

  void rebuild_registry() {
    params = ParamRegistry<S>();
    encoder.register_params(params, "enc");
    unet.register_params(params, "unet");
    adapters.register_params(params, "adapters");
  }

  int64_t c_z() const { return cfg.c_z(); }

  // [3,H,W] image in [-1,1] -> query latent
  Tensor<S> encode_query(const Tensor<S>& image) const { return latent.encode(image); }

  // Instruction slot from one prompt (image + mask), or the null slot.
  CondSlot<S> prompt_slot(Tape<S>& t, const Tensor<S>& image, const MaskGrid& mask) {
    const auto& ec = encoder.config();
    std::vector<S> w = foreground_token_weights<S>(mask, ec.tokens_per_side(),
                                                   ec.tokens_per_side());
    w = fallback_weights(std::move(w));
    return CondSlot<S>{encoder.encode(t, image), std::move(w)};
  }

  CondSlot<S> null_slot(Tape<S>& t) {
    return CondSlot<S>{unet.null_instruction(t), UNet<S>::null_instruction_bias()};
  }

  // Combined slot over k prompts (token-sequence concatenation).
  CondSlot<S> prompt_slot_multi(Tape<S>& t,
                                const std::vector<std::pair<Tensor<S>, MaskGrid>>& prompts) {
    check(!prompts.empty(), "at least one prompt required");
    std::vector<InstructionTokens<S>> per_prompt;
    const auto& ec = encoder.config();
    for (const auto& [img, mask] : prompts) {
      std::vector<S> w = foreground_token_weights<S>(mask, ec.tokens_per_side(),
                                                     ec.tokens_per_side());
      w = fallback_weights(std::move(w));
      per_prompt.push_back(InstructionTokens<S>{encoder.encode(t, img), std::move(w)});
    }
    InstructionTokens<S> combined = combine_instructions(per_prompt);
    return CondSlot<S>{combined.tokens, std::move(combined.fg_weights)};
  }

 private:
  std::vector<S> fallback_weights(std::vector<S> w) {
    bool warned = fg_warned_.load();
    w = fg_weights_with_fallback(w, &warned);
    if (warned) fg_warned_.store(true);
    return w;
  }

  // written by concurrent evaluation workers when a prompt has no foreground
  std::atomic<bool> fg_warned_{false};
};

using ModelStateF = ModelState<float>;

}  // namespace icseg
