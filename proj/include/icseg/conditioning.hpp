#pragma once

#include "icseg/nn.hpp"
#include "icseg/pmcodec.hpp"
#include "icseg/tape.hpp"

#include <iostream>
#include <vector>

namespace icseg {

struct PromptEncoderConfig {
  int64_t image_size = 64;
  int64_t patch_size = 8;
  int64_t embed_dim = 128;
  int64_t depth = 2;
  int64_t heads = 4;

  int64_t tokens_per_side() const { return image_size / patch_size; }
  int64_t num_tokens() const { return tokens_per_side() * tokens_per_side(); }

  void validate() const {
    check(image_size % patch_size == 0, "image size not divisible by patch size");
    check(embed_dim % heads == 0, "embed dim not divisible by heads");
    check(depth >= 0, "negative encoder depth");
  }
};

// Instruction tokens extracted from one or more visual prompts: the encoder's
// last hidden states with the class token dropped, plus per-token foreground
// weights derived from the prompt mask.
template <typename S>
struct InstructionTokens {
  Value<S> tokens;             // [N_tok, d_enc], on the caller's tape
  std::vector<S> fg_weights;   // N_tok, in [0, 1]
};

// Per token, the exact fraction of foreground pixels in its patch.
template <typename S>
std::vector<S> foreground_token_weights(const MaskGrid& mask, int64_t tokens_h,
                                        int64_t tokens_w) {
  check(tokens_h >= 1 && tokens_w >= 1, "token grid must be positive");
  check(mask.rows() % tokens_h == 0 && mask.cols() % tokens_w == 0,
        "mask does not divide into the token grid");
  const int64_t ph = mask.rows() / tokens_h, pw = mask.cols() / tokens_w;
  std::vector<S> weights(static_cast<size_t>(tokens_h * tokens_w));
  for (int64_t ty = 0; ty < tokens_h; ++ty)
    for (int64_t tx = 0; tx < tokens_w; ++tx) {
      int64_t fg = 0;
      for (int64_t y = 0; y < ph; ++y)
        for (int64_t x = 0; x < pw; ++x) fg += mask(ty * ph + y, tx * pw + x) ? 1 : 0;
      weights[static_cast<size_t>(ty * tokens_w + tx)] = S(fg) / S(ph * pw);
    }
  return weights;
}

// Foreground weights -> additive logit bias, log(max(w, eps)). eps = 0
// requests hard masking: zero-weight tokens get -1e30 so their attention
// weight underflows to zero.
template <typename S>
std::vector<S> fg_weights_to_bias(const std::vector<S>& weights, double eps = 1e-6) {
  std::vector<S> bias(weights.size());
  for (size_t i = 0; i < weights.size(); ++i) {
    const double w = std::max(double(weights[i]), eps);
    bias[i] = w > 0.0 ? S(std::log(w)) : S(-1e30);
  }
  return bias;
}

// Small patch transformer trained jointly from scratch. Returns the last
// hidden states except the first (class) token.
template <typename S>
class PromptEncoder {
 public:
  PromptEncoder() = default;

  PromptEncoder(const PromptEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int64_t pdim = 3 * cfg_.patch_size * cfg_.patch_size;
    patch_proj_ = nn::Linear<S>(rng, pdim, cfg_.embed_dim);
    Tensor<S> cls = rng.normal_tensor<S>({1, cfg_.embed_dim});
    cls.vec() *= S(0.02);
    class_token_ = Parameter<S>(std::move(cls));
    // zero-init positional table: depth-0 output is a pure patch embedding
    pos_embed_ = Parameter<S>(Tensor<S>::zeros({cfg_.num_tokens() + 1, cfg_.embed_dim}));
    blocks_.clear();
    for (int64_t i = 0; i < cfg_.depth; ++i)
      blocks_.emplace_back(rng, cfg_.embed_dim, cfg_.heads);
    final_ln_ = nn::LayerNorm<S>(cfg_.embed_dim);
  }

  const PromptEncoderConfig& config() const { return cfg_; }

  // image [3,H,W] -> tokens [N_tok, d_enc]
  Value<S> encode(Tape<S>& t, const Tensor<S>& image) {
    check(image.rank() == 3 && image.dim(0) == 3 && image.dim(1) == cfg_.image_size &&
              image.dim(2) == cfg_.image_size,
          "prompt image does not match the configured encoder size");
    const int64_t n = cfg_.num_tokens();
    // [3,H,W] -> [3p^2, n] -> [n, 3p^2]
    Value<S> patches = space_to_depth(t.input(image), cfg_.patch_size);
    patches = transpose2d(reshape(patches, {3 * cfg_.patch_size * cfg_.patch_size, n}));
    Value<S> tok = patch_proj_.forward(t, patches);
    tok = concat(0, std::vector<Value<S>>{t.param(class_token_), tok});
    tok = add(tok, t.param(pos_embed_));
    for (auto& block : blocks_) tok = block.forward(t, tok);
    tok = final_ln_.forward(t, tok);
    return slice(tok, 0, 1, n);  // drop the class token
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    patch_proj_.register_params(reg, prefix + ".patch");
    reg.add(prefix + ".class_token", &class_token_);
    reg.add(prefix + ".pos_embed", &pos_embed_);
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].register_params(reg, prefix + ".block" + std::to_string(i));
    final_ln_.register_params(reg, prefix + ".final_ln");
  }

 private:
  PromptEncoderConfig cfg_;
  nn::Linear<S> patch_proj_;
  Parameter<S> class_token_;
  Parameter<S> pos_embed_;
  std::vector<nn::TransformerBlock<S>> blocks_;
  nn::LayerNorm<S> final_ln_;
};

// One linear map per cross-attention layer, adapting d_enc instruction
// tokens to that layer's model width. New parameters, so they stay trainable
// even when the rest of the model is frozen.
template <typename S>
struct AdapterSet {
  std::vector<nn::Linear<S>> adapters;

  AdapterSet() = default;
  AdapterSet(Rng& rng, int64_t d_enc, const std::vector<int64_t>& layer_widths) {
    for (int64_t w : layer_widths) adapters.emplace_back(rng, d_enc, w);
  }

  size_t size() const { return adapters.size(); }

  Value<S> adapt(Tape<S>& t, Value<S> tokens, size_t layer_index) {
    check(layer_index < adapters.size(), "adapter index out of range");
    return adapters[layer_index].forward(t, tokens);
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    for (size_t i = 0; i < adapters.size(); ++i)
      adapters[i].register_params(reg, prefix + ".f" + std::to_string(i));
  }
};

// Token-sequence concatenation of k >= 1 prompts' instructions.
template <typename S>
InstructionTokens<S> combine_instructions(const std::vector<InstructionTokens<S>>& per_prompt) {
  check(!per_prompt.empty(), "combine_instructions: empty prompt list");
  if (per_prompt.size() == 1) return per_prompt[0];
  std::vector<Value<S>> token_parts;
  std::vector<S> weights;
  for (const auto& it : per_prompt) {
    token_parts.push_back(it.tokens);
    weights.insert(weights.end(), it.fg_weights.begin(), it.fg_weights.end());
  }
  return InstructionTokens<S>{concat(0, token_parts), std::move(weights)};
}

// All-background prompt masks fall back to unbiased attention.
template <typename S>
std::vector<S> fg_weights_with_fallback(const std::vector<S>& weights, bool* warned = nullptr) {
  bool any_fg = false;
  for (S w : weights) any_fg = any_fg || w > S(0);
  if (any_fg) return weights;
  if (warned == nullptr || !*warned) {
    std::cerr << "[icseg] warning: prompt mask has no foreground tokens; "
                 "using unbiased attention\n";
    if (warned) *warned = true;
  }
  return std::vector<S>(weights.size(), S(1));
}

}  // namespace icseg
