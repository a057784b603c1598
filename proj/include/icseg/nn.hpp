#pragma once

#include "icseg/rng.hpp"
#include "icseg/tape.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace icseg {

// Name -> parameter table for a model. Layers own their parameters; the
// registry is the flat view used by the optimizer, checkpointing and freeze.
template <typename S>
class ParamRegistry {
 public:
  void add(const std::string& name, Parameter<S>* p) {
    check(entries_.emplace(name, p).second, "duplicate parameter name: " + name);
    ordered_.push_back(name);
  }

  Parameter<S>* find(const std::string& name) const {
    auto it = entries_.find(name);
    return it == entries_.end() ? nullptr : it->second;
  }

  const std::vector<std::string>& names() const { return ordered_; }
  size_t count() const { return ordered_.size(); }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& name : ordered_) {
      const Parameter<S>* p = entries_.at(name);
      if (p->trainable) n += p->size();
    }
    return n;
  }

  void zero_grads() {
    for (const auto& name : ordered_) entries_.at(name)->zero_grad();
  }

  void freeze_all() {
    for (const auto& name : ordered_) entries_.at(name)->trainable = false;
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& name : ordered_) fn(name, *entries_.at(name));
  }
  template <typename Fn>
  void for_each(Fn&& fn) {
    for (const auto& name : ordered_) fn(name, *entries_.at(name));
  }

 private:
  std::map<std::string, Parameter<S>*> entries_;
  std::vector<std::string> ordered_;
};

namespace nn {

template <typename S>
Tensor<S> uniform_init(Rng& rng, Shape shape, int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  return rng.uniform_tensor<S>(std::move(shape), -bound, bound);
}

// Fully connected layer, y = x W + b, with optional low-rank adaptation
// factors delta = (scale / r) * (x A) B, A random-init and B zero-init so a
// freshly attached adapter is an exact no-op.
template <typename S>
struct Linear {
  Parameter<S> w, b;
  Parameter<S> lora_a, lora_b;
  int64_t rank = 0;
  S lora_scale = S(1);
  bool has_bias = true;

  Linear() = default;
  // A key-projection bias is cancelled exactly by the softmax, so attention
  // q/k/v layers are built bias-free (see MultiHeadAttention).
  Linear(Rng& rng, int64_t din, int64_t dout, bool bias = true)
      : w(uniform_init<S>(rng, {din, dout}, din)), has_bias(bias) {
    if (has_bias) b = Parameter<S>(Tensor<S>::zeros({dout}));
  }

  int64_t in_dim() const { return w.value.dim(0); }
  int64_t out_dim() const { return w.value.dim(1); }
  bool has_lora() const { return rank > 0; }

  void attach_lora(Rng& rng, int64_t r, S scl) {
    rank = r;
    lora_scale = scl;
    lora_a = Parameter<S>(uniform_init<S>(rng, {in_dim(), r}, in_dim()));
    lora_b = Parameter<S>(Tensor<S>::zeros({r, out_dim()}));
  }

  Value<S> forward(Tape<S>& t, Value<S> x) {
    Value<S> y = has_bias ? linear(x, t.param(w), t.param(b)) : matmul(x, t.param(w));
    if (has_lora()) {
      Value<S> delta = matmul(matmul(x, t.param(lora_a)), t.param(lora_b));
      y = add(y, scale(delta, lora_scale / S(rank)));
    }
    return y;
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    reg.add(prefix + ".w", &w);
    if (has_bias) reg.add(prefix + ".b", &b);
  }
  void register_lora(ParamRegistry<S>& reg, const std::string& prefix) {
    reg.add(prefix + ".lora_a", &lora_a);
    reg.add(prefix + ".lora_b", &lora_b);
  }
};

template <typename S>
struct Conv2d {
  Parameter<S> w, b;
  int64_t stride = 1;

  Conv2d() = default;
  Conv2d(Rng& rng, int64_t cin, int64_t cout, int64_t ksize, int64_t stride_ = 1)
      : w(uniform_init<S>(rng, {cout, cin, ksize, ksize}, cin * ksize * ksize)),
        b(Tensor<S>::zeros({cout})),
        stride(stride_) {}

  Value<S> forward(Tape<S>& t, Value<S> x) { return conv2d(x, t.param(w), t.param(b), stride); }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    reg.add(prefix + ".w", &w);
    reg.add(prefix + ".b", &b);
  }
};

template <typename S>
struct GroupNorm {
  Parameter<S> gamma, beta;
  int64_t groups = 8;

  GroupNorm() = default;
  GroupNorm(int64_t channels, int64_t groups_)
      : gamma(Tensor<S>::full({channels}, S(1))), beta(Tensor<S>::zeros({channels})),
        groups(groups_) {}

  Value<S> forward(Tape<S>& t, Value<S> x) {
    return group_norm(x, t.param(gamma), t.param(beta), groups);
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    reg.add(prefix + ".gamma", &gamma);
    reg.add(prefix + ".beta", &beta);
  }
};

template <typename S>
struct LayerNorm {
  Parameter<S> gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int64_t dim)
      : gamma(Tensor<S>::full({dim}, S(1))), beta(Tensor<S>::zeros({dim})) {}

  Value<S> forward(Tape<S>& t, Value<S> x) {
    return layer_norm(x, t.param(gamma), t.param(beta));
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    reg.add(prefix + ".gamma", &gamma);
    reg.add(prefix + ".beta", &beta);
  }
};

// Multi-head attention over token matrices [N, d]. Self-attention when
// queries and keys/values share a source; cross-attention otherwise. An
// optional [N_q, N_kv] logit bias is broadcast over heads.
template <typename S>
struct MultiHeadAttention {
  int64_t heads = 1;
  Linear<S> q, k, v, o;

  MultiHeadAttention() = default;
  MultiHeadAttention(Rng& rng, int64_t d_model, int64_t heads_)
      : heads(heads_),
        q(rng, d_model, d_model, /*bias=*/false),
        k(rng, d_model, d_model, /*bias=*/false),
        v(rng, d_model, d_model, /*bias=*/false),
        o(rng, d_model, d_model) {
    check(d_model % heads_ == 0, "model width must be divisible by heads");
  }

  Value<S> forward(Tape<S>& t, Value<S> x_q, Value<S> x_kv, Value<S> bias = Value<S>{}) {
    Value<S> qh = split_heads(q.forward(t, x_q), heads);
    Value<S> kh = split_heads(k.forward(t, x_kv), heads);
    Value<S> vh = split_heads(v.forward(t, x_kv), heads);
    Value<S> bias_h{};
    if (bias.valid()) {
      const int64_t n = bias.shape()[0], m = bias.shape()[1];
      Tensor<S> tiled({heads, n, m});
      for (int64_t h = 0; h < heads; ++h)
        std::copy(bias.val().data(), bias.val().data() + n * m, tiled.data() + h * n * m);
      bias_h = t.input(std::move(tiled));
    }
    Value<S> att = attention(qh, kh, vh, bias_h);
    return o.forward(t, merge_heads(att));
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    q.register_params(reg, prefix + ".q");
    k.register_params(reg, prefix + ".k");
    v.register_params(reg, prefix + ".v");
    o.register_params(reg, prefix + ".o");
  }

  template <typename Fn>
  void for_each_projection(Fn&& fn) {
    fn('q', q);
    fn('k', k);
    fn('v', v);
    fn('o', o);
  }
};

// Pre-norm transformer encoder block: x + attn(ln1 x); x + mlp(ln2 x).
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  Linear<S> fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(Rng& rng, int64_t d_model, int64_t heads)
      : ln1(d_model),
        ln2(d_model),
        attn(rng, d_model, heads),
        fc1(rng, d_model, d_model * 4),
        fc2(rng, d_model * 4, d_model) {}

  Value<S> forward(Tape<S>& t, Value<S> x) {
    Value<S> h = ln1.forward(t, x);
    x = add(x, attn.forward(t, h, h));
    Value<S> m = fc2.forward(t, gelu(fc1.forward(t, ln2.forward(t, x))));
    return add(x, m);
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    ln1.register_params(reg, prefix + ".ln1");
    ln2.register_params(reg, prefix + ".ln2");
    attn.register_params(reg, prefix + ".attn");
    fc1.register_params(reg, prefix + ".fc1");
    fc2.register_params(reg, prefix + ".fc2");
  }
};

// Diffusion residual block with a per-channel time-embedding shift.
template <typename S>
struct ResBlock {
  GroupNorm<S> gn1, gn2;
  Conv2d<S> conv1, conv2;
  Linear<S> time_proj;
  Conv2d<S> skip;  // 1x1, only when cin != cout
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(Rng& rng, int64_t cin, int64_t cout, int64_t time_dim, int64_t groups)
      : gn1(cin, groups),
        gn2(cout, groups),
        conv1(rng, cin, cout, 3),
        conv2(rng, cout, cout, 3),
        time_proj(rng, time_dim, cout),
        has_skip(cin != cout) {
    if (has_skip) skip = Conv2d<S>(rng, cin, cout, 1);
  }

  // x [B,C,H,W], temb [B, time_dim]
  Value<S> forward(Tape<S>& t, Value<S> x, Value<S> temb) {
    Value<S> h = conv1.forward(t, silu(gn1.forward(t, x)));
    h = add_channel_bias(h, time_proj.forward(t, silu(temb)));
    h = conv2.forward(t, silu(gn2.forward(t, h)));
    Value<S> residual = has_skip ? skip.forward(t, x) : x;
    return add(h, residual);
  }

  void register_params(ParamRegistry<S>& reg, const std::string& prefix) {
    gn1.register_params(reg, prefix + ".gn1");
    gn2.register_params(reg, prefix + ".gn2");
    conv1.register_params(reg, prefix + ".conv1");
    conv2.register_params(reg, prefix + ".conv2");
    time_proj.register_params(reg, prefix + ".time");
    if (has_skip) skip.register_params(reg, prefix + ".skip");
  }
};

}  // namespace nn
}  // namespace icseg
