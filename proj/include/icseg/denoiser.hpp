#pragma once

#include "icseg/conditioning.hpp"
#include "icseg/nn.hpp"
#include "icseg/tape.hpp"

#include <string>
#include <vector>

namespace icseg {

struct UNetConfig {
  int64_t c_in = 12;   // c_z (one-step variant) or 2*c_z (noise variant)
  int64_t c_out = 12;  // c_z
  int64_t input_size = 32;
  int64_t base_width = 64;
  std::vector<int64_t> channel_mults = {1, 2};
  std::vector<int64_t> attn_resolutions = {16};
  int64_t heads = 4;
  int64_t d_enc = 128;
  int64_t time_dim = 0;  // 0 -> 4 * base_width
  int64_t groups = 8;

  int64_t resolved_time_dim() const { return time_dim > 0 ? time_dim : 4 * base_width; }

  void validate() const {
    check(c_in == c_out || c_in == 2 * c_out, "c_in must be c_z or 2*c_z");
    check(!channel_mults.empty(), "at least one resolution level required");
    int64_t res = input_size;
    for (size_t i = 0; i + 1 < channel_mults.size(); ++i) {
      check(res % 2 == 0, "input size not divisible across levels");
      res /= 2;
    }
    for (int64_t m : channel_mults) {
      check(m >= 1, "channel multipliers must be >= 1");
      check((base_width * m) % groups == 0, "level width not divisible by norm groups");
      check((base_width * m) % heads == 0, "level width not divisible by heads");
    }
  }
};

struct LoRAConfig {
  int64_t rank = 0;  // 0 disables
  double scale = 1.0;
  std::string targets = "qkvo";

  bool enabled() const { return rank > 0; }
  bool targets_projection(char p) const { return targets.find(p) != std::string::npos; }

  void validate() const {
    check(rank >= 0, "negative LoRA rank");
    for (char c : targets)
      check(c == 'q' || c == 'k' || c == 'v' || c == 'o',
            std::string("unknown LoRA target '") + c + "'");
  }
};

// Per-sample conditioning slot for the denoiser forward. `tokens` is on the
// forward's tape (either encoder output or the learned null token); the bias
// is one logit per instruction token.
template <typename S>
struct CondSlot {
  Value<S> tokens;
  std::vector<S> token_bias;
};

// Compact conditional U-Net: residual blocks with time-embedding shifts,
// self-attention plus mask-biased cross-attention over instruction tokens at
// the configured resolutions (the middle block always attends), and optional
// low-rank adaptation on all attention projections.
template <typename S>
class UNet {
 public:
  UNet() = default;

  UNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int64_t td = cfg_.resolved_time_dim();
    const int64_t levels = static_cast<int64_t>(cfg_.channel_mults.size());
    time_fc1_ = nn::Linear<S>(rng, cfg_.base_width, td);
    time_fc2_ = nn::Linear<S>(rng, td, td);
    conv_in_ = nn::Conv2d<S>(rng, cfg_.c_in, width(0), 3);

    int64_t res = cfg_.input_size;
    int64_t prev = width(0);
    for (int64_t l = 0; l < levels; ++l) {
      down_res_.emplace_back(rng, prev, width(l), td, cfg_.groups);
      prev = width(l);
      down_attn_flag_.push_back(attend_at(res));
      if (down_attn_flag_.back()) down_attn_.emplace_back(make_attn_block(rng, width(l)));
      if (l + 1 < levels) {
        down_sample_.emplace_back(rng, width(l), width(l), 3, 2);
        res /= 2;
      }
    }
    mid_res1_ = nn::ResBlock<S>(rng, prev, prev, td, cfg_.groups);
    mid_attn_ = make_attn_block(rng, prev);
    mid_res2_ = nn::ResBlock<S>(rng, prev, prev, td, cfg_.groups);
    for (int64_t l = levels - 1; l >= 0; --l) {
      up_res_.emplace_back(rng, prev + width(l), width(l), td, cfg_.groups);
      prev = width(l);
      up_attn_flag_.push_back(down_attn_flag_[static_cast<size_t>(l)]);
      if (up_attn_flag_.back()) up_attn_.emplace_back(make_attn_block(rng, width(l)));
      if (l > 0) {
        up_conv_.emplace_back(rng, width(l), width(l - 1), 3, 1);
        prev = width(l - 1);
      }
    }
    out_norm_ = nn::GroupNorm<S>(width(0), cfg_.groups);
    out_conv_ = nn::Conv2d<S>(rng, width(0), cfg_.c_out, 3);

    Tensor<S> nt = rng.normal_tensor<S>({1, cfg_.d_enc});
    nt.vec() *= S(0.02);
    null_token_ = Parameter<S>(std::move(nt));
  }

  const UNetConfig& config() const { return cfg_; }

  // Widths of the cross-attention layers in forward order; the adapter set
  // must be built against exactly this list.
  std::vector<int64_t> cross_attention_widths() const {
    std::vector<int64_t> w;
    for (const auto& blk : down_attn_) w.push_back(blk.width);
    w.push_back(mid_attn_.width);
    for (const auto& blk : up_attn_) w.push_back(blk.width);
    return w;
  }

  // Learned single-token embedding standing in for "no instruction".
  Value<S> null_instruction(Tape<S>& t) { return t.param(null_token_); }
  static std::vector<S> null_instruction_bias() { return {S(0)}; }

  // z_in [B, c_in, h, w]; one timestep and one conditioning slot per sample.
  Value<S> forward(Tape<S>& t, Value<S> z_in, const std::vector<int64_t>& timesteps,
                   std::vector<CondSlot<S>> conds, AdapterSet<S>& adapters,
                   double bias_floor = 1e-6) {
    const Shape& in_shape = z_in.shape();
    check(in_shape.size() == 4, "denoiser input must be [B,c_in,H,W]");
    const int64_t batch = in_shape[0];
    check(in_shape[1] == cfg_.c_in, "denoiser input channel mismatch");
    check(static_cast<int64_t>(timesteps.size()) == batch &&
              static_cast<int64_t>(conds.size()) == batch,
          "one timestep and conditioning slot per sample required");
    check(adapters.size() == cross_attention_widths().size(),
          "adapter count does not match cross-attention layers");

    Tensor<S> temb0({batch, cfg_.base_width});
    for (int64_t b = 0; b < batch; ++b) {
      Tensor<S> e = sinusoidal_embedding<S>(double(timesteps[static_cast<size_t>(b)]),
                                            cfg_.base_width);
      std::copy(e.data(), e.data() + cfg_.base_width, temb0.data() + b * cfg_.base_width);
    }
    Value<S> temb = time_fc2_.forward(t, silu(time_fc1_.forward(t, t.input(std::move(temb0)))));

    size_t attn_index = 0;  // walks cross-attention layers in forward order
    Value<S> h = conv_in_.forward(t, z_in);
    std::vector<Value<S>> skips;
    const int64_t levels = static_cast<int64_t>(cfg_.channel_mults.size());
    for (int64_t l = 0; l < levels; ++l) {
      h = down_res_[static_cast<size_t>(l)].forward(t, h, temb);
      if (down_attn_flag_[static_cast<size_t>(l)])
        h = attn_forward(t, down_attn_[attn_of_level_down(l)], h, conds, adapters, attn_index++,
                         bias_floor);
      skips.push_back(h);
      if (l + 1 < levels) h = down_sample_[static_cast<size_t>(l)].forward(t, h);
    }
    h = mid_res1_.forward(t, h, temb);
    h = attn_forward(t, mid_attn_, h, conds, adapters, attn_index++, bias_floor);
    h = mid_res2_.forward(t, h, temb);
    for (int64_t i = 0; i < levels; ++i) {
      const int64_t l = levels - 1 - i;
      h = concat(1, std::vector<Value<S>>{h, skips[static_cast<size_t>(l)]});
      h = up_res_[static_cast<size_t>(i)].forward(t, h, temb);
      if (up_attn_flag_[static_cast<size_t>(i)])
        h = attn_forward(t, up_attn_[attn_of_index_up(i)], h, conds, adapters, attn_index++,
                         bias_floor);
      if (l > 0) {
        h = up_conv_[static_cast<size_t>(i)].forward(t, h);
        h = upsample_nearest2x(h);
      }
    }
    return out_conv_.forward(t, silu(out_norm_.forward(t, h)));
  }

  void apply_lora(const LoRAConfig& cfg, Rng& rng) {
    cfg.validate();
    check(cfg.rank >= 1, "apply_lora requires rank >= 1");
    for_each_attention([&](nn::MultiHeadAttention<S>& mha) {
      mha.for_each_projection([&](char name, nn::Linear<S>& proj) {
        if (cfg.targets_projection(name)) proj.attach_lora(rng, cfg.rank, S(cfg.scale));
      });
    });
    lora_ = cfg;
  }

  const LoRAConfig& lora() const { return lora_; }

  // Base parameter count of the targeted projections, for the closed-form
  // trainable count: sum over targets of rank * (d_in + d_out).
  int64_t lora_param_count() const {
    int64_t n = 0;
    const_cast<UNet*>(this)->for_each_attention([&](nn::MultiHeadAttention<S>& mha) {
      mha.for_each_projection([&](char, nn::Linear<S>& proj) {
        if (proj.has_lora()) n += proj.rank * (proj.in_dim() + proj.out_dim());
      });
    });
    return n;
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    time_fc1_.register_params(reg, prefix + ".time1");
    time_fc2_.register_params(reg, prefix + ".time2");
    conv_in_.register_params(reg, prefix + ".conv_in");
    for (size_t l = 0; l < down_res_.size(); ++l)
      down_res_[l].register_params(reg, prefix + ".down" + std::to_string(l));
    for (size_t l = 0; l < down_attn_.size(); ++l)
      register_attn(reg, down_attn_[l], prefix + ".dattn" + std::to_string(l));
    for (size_t l = 0; l < down_sample_.size(); ++l)
      down_sample_[l].register_params(reg, prefix + ".downsample" + std::to_string(l));
    mid_res1_.register_params(reg, prefix + ".mid1");
    register_attn(reg, mid_attn_, prefix + ".mattn");
    mid_res2_.register_params(reg, prefix + ".mid2");
    for (size_t l = 0; l < up_res_.size(); ++l)
      up_res_[l].register_params(reg, prefix + ".up" + std::to_string(l));
    for (size_t l = 0; l < up_attn_.size(); ++l)
      register_attn(reg, up_attn_[l], prefix + ".uattn" + std::to_string(l));
    for (size_t l = 0; l < up_conv_.size(); ++l)
      up_conv_[l].register_params(reg, prefix + ".upconv" + std::to_string(l));
    out_norm_.register_params(reg, prefix + ".out_norm");
    out_conv_.register_params(reg, prefix + ".out_conv");
    reg.add(prefix + ".null_token", &null_token_);
    if (lora_.enabled()) {
      for_each_attention_named(prefix, [&](const std::string& name,
                                           nn::MultiHeadAttention<S>& mha) {
        mha.for_each_projection([&](char pname, nn::Linear<S>& proj) {
          if (proj.has_lora()) proj.register_lora(reg, name + "." + pname);
        });
      });
    }
  }

  // Frozen-base contract: everything except the learned null token (new
  // parameter, like the adapters) and any LoRA factors.
  void freeze_base() {
    ParamRegistry<S> reg;
    register_params(reg, "unet");
    reg.for_each([](const std::string& name, Parameter<S>& p) {
      const bool keep = name.find("lora_") != std::string::npos ||
                        name.find("null_token") != std::string::npos;
      if (!keep) p.trainable = false;
    });
  }

 private:
  struct AttnBlock {
    int64_t width = 0;
    nn::GroupNorm<S> gn;
    nn::LayerNorm<S> ln_self, ln_cross;
    nn::MultiHeadAttention<S> self_attn, cross_attn;
  };

  int64_t width(int64_t level) const {
    return cfg_.base_width * cfg_.channel_mults[static_cast<size_t>(level)];
  }

  bool attend_at(int64_t res) const {
    for (int64_t r : cfg_.attn_resolutions)
      if (r == res) return true;
    return false;
  }

  size_t attn_of_level_down(int64_t level) const {
    size_t idx = 0;
    for (int64_t l = 0; l < level; ++l)
      if (down_attn_flag_[static_cast<size_t>(l)]) ++idx;
    return idx;
  }
  size_t attn_of_index_up(int64_t i) const {
    size_t idx = 0;
    for (int64_t j = 0; j < i; ++j)
      if (up_attn_flag_[static_cast<size_t>(j)]) ++idx;
    return idx;
  }

  AttnBlock make_attn_block(Rng& rng, int64_t w) {
    AttnBlock blk;
    blk.width = w;
    blk.gn = nn::GroupNorm<S>(w, cfg_.groups);
    blk.ln_self = nn::LayerNorm<S>(w);
    blk.ln_cross = nn::LayerNorm<S>(w);
    blk.self_attn = nn::MultiHeadAttention<S>(rng, w, cfg_.heads);
    blk.cross_attn = nn::MultiHeadAttention<S>(rng, w, cfg_.heads);
    return blk;
  }

  void register_attn(ParamRegistry<S>& reg, AttnBlock& blk, const std::string& prefix) {
    blk.gn.register_params(reg, prefix + ".gn");
    blk.ln_self.register_params(reg, prefix + ".ln_self");
    blk.ln_cross.register_params(reg, prefix + ".ln_cross");
    blk.self_attn.register_params(reg, prefix + ".self");
    blk.cross_attn.register_params(reg, prefix + ".cross");
  }

  template <typename Fn>
  void for_each_attention(Fn&& fn) {
    for (auto& blk : down_attn_) {
      fn(blk.self_attn);
      fn(blk.cross_attn);
    }
    fn(mid_attn_.self_attn);
    fn(mid_attn_.cross_attn);
    for (auto& blk : up_attn_) {
      fn(blk.self_attn);
      fn(blk.cross_attn);
    }
  }

  template <typename Fn>
  void for_each_attention_named(const std::string& prefix, Fn&& fn) {
    for (size_t l = 0; l < down_attn_.size(); ++l) {
      fn(prefix + ".dattn" + std::to_string(l) + ".self", down_attn_[l].self_attn);
      fn(prefix + ".dattn" + std::to_string(l) + ".cross", down_attn_[l].cross_attn);
    }
    fn(prefix + ".mattn.self", mid_attn_.self_attn);
    fn(prefix + ".mattn.cross", mid_attn_.cross_attn);
    for (size_t l = 0; l < up_attn_.size(); ++l) {
      fn(prefix + ".uattn" + std::to_string(l) + ".self", up_attn_[l].self_attn);
      fn(prefix + ".uattn" + std::to_string(l) + ".cross", up_attn_[l].cross_attn);
    }
  }

  // Self-attention then mask-biased cross-attention on [B,C,H,W] feature
  // maps, token conditioning per sample.
  Value<S> attn_forward(Tape<S>& t, AttnBlock& blk, Value<S> x,
                        const std::vector<CondSlot<S>>& conds, AdapterSet<S>& adapters,
                        size_t layer_index, double bias_floor) {
    const Shape s = x.shape();
    const int64_t batch = s[0], c = s[1], hw = s[2] * s[3];
    Value<S> normed = blk.gn.forward(t, x);
    std::vector<Value<S>> outs;
    for (int64_t b = 0; b < batch; ++b) {
      Value<S> xb = slice(normed, 0, b, 1);
      Value<S> tok = transpose2d(reshape(xb, {c, hw}));
      Value<S> tok_n = blk.ln_self.forward(t, tok);
      tok = add(tok, blk.self_attn.forward(t, tok_n, tok_n));
      const CondSlot<S>& cond = conds[static_cast<size_t>(b)];
      Value<S> instr = adapters.adapt(t, cond.tokens, layer_index);
      const int64_t n_tok = instr.shape()[0];
      check(static_cast<int64_t>(cond.token_bias.size()) == n_tok,
            "token bias length mismatch");
      Tensor<S> bias({hw, n_tok});
      std::vector<S> bias_row = fg_weights_to_bias(cond.token_bias, bias_floor);
      for (int64_t r = 0; r < hw; ++r)
        std::copy(bias_row.begin(), bias_row.end(), bias.data() + r * n_tok);
      tok = add(tok, blk.cross_attn.forward(t, blk.ln_cross.forward(t, tok), instr,
                                            t.input(std::move(bias))));
      outs.push_back(reshape(transpose2d(tok), {int64_t(1), c, s[2], s[3]}));
    }
    Value<S> merged = batch == 1 ? outs[0] : concat(0, outs);
    return add(x, merged);
  }

  UNetConfig cfg_;
  LoRAConfig lora_;
  nn::Linear<S> time_fc1_, time_fc2_;
  nn::Conv2d<S> conv_in_;
  std::vector<nn::ResBlock<S>> down_res_;
  std::vector<bool> down_attn_flag_;
  std::vector<AttnBlock> down_attn_;
  std::vector<nn::Conv2d<S>> down_sample_;
  nn::ResBlock<S> mid_res1_, mid_res2_;
  AttnBlock mid_attn_;
  std::vector<nn::ResBlock<S>> up_res_;
  std::vector<bool> up_attn_flag_;
  std::vector<AttnBlock> up_attn_;
  std::vector<nn::Conv2d<S>> up_conv_;
  nn::GroupNorm<S> out_norm_;
  nn::Conv2d<S> out_conv_;
  Parameter<S> null_token_;
};

// Zero latent standing in for "no query".
template <typename S>
Tensor<S> null_query_latent(int64_t c_z, int64_t h, int64_t w) {
  return Tensor<S>::zeros({c_z, h, w});
}

}  // namespace icseg
