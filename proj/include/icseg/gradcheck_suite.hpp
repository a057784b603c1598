#pragma once

#include "icseg/denoiser.hpp"
#include "icseg/grad_check.hpp"

#include <string>
#include <vector>

namespace icseg {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
};

// f64 finite-difference sweep over the kernel inventory plus a tiny
// end-to-end denoiser, `seeds` random shapes each.
inline std::vector<GradCheckResult> run_grad_check_suite(int64_t seeds, double step) {
  std::vector<GradCheckResult> results;
  auto record = [&](const std::string& name, double err) {
    for (GradCheckResult& r : results)
      if (r.name == name) {
        r.max_rel_error = std::max(r.max_rel_error, err);
        return;
      }
    results.push_back({name, err});
  };

  for (int64_t seed = 0; seed < seeds; ++seed) {
    Rng rng{uint64_t(seed)};
    {
      auto a = Parameter<double>(rng.normal_tensor<double>({3, 4}));
      auto b = Parameter<double>(rng.normal_tensor<double>({3, 4}));
      auto build = [&](Tape<double>& t) {
        auto s = add(mul(t.param(a), t.param(b)), scale(t.param(a), 0.3));
        return mse(silu(s), t.input(Tensor<double>::zeros({3, 4})));
      };
      record("elementwise (add/mul/scale/silu)", grad_check(build, {&a, &b}, step));
    }
    {
      auto x = Parameter<double>(rng.normal_tensor<double>({2, 5}));
      auto w = Parameter<double>(rng.normal_tensor<double>({5, 4}));
      auto b = Parameter<double>(rng.normal_tensor<double>({4}));
      auto build = [&](Tape<double>& t) {
        auto y = gelu(linear(t.param(x), t.param(w), t.param(b)));
        return mse(matmul(y, transpose2d(y)), t.input(Tensor<double>::zeros({2, 2})));
      };
      record("matmul/linear/gelu", grad_check(build, {&x, &w, &b}, step));
    }
    {
      auto x = Parameter<double>(rng.normal_tensor<double>({1, 3, 6, 6}));
      auto w = Parameter<double>(rng.normal_tensor<double>({4, 3, 3, 3}));
      auto b = Parameter<double>(rng.normal_tensor<double>({4}));
      const int64_t stride = 1 + seed % 2;
      auto build = [&](Tape<double>& t) {
        auto h = conv2d(t.param(x), t.param(w), t.param(b), stride);
        h = upsample_nearest2x(h);
        return mse(h, t.input(Tensor<double>::zeros(h.shape())));
      };
      record("conv2d/upsample", grad_check(build, {&x, &w, &b}, step));
    }
    {
      auto x = Parameter<double>(rng.normal_tensor<double>({2, 4, 3, 3}));
      auto g = Parameter<double>(rng.normal_tensor<double>({4}));
      auto be = Parameter<double>(rng.normal_tensor<double>({4}));
      auto lg = Parameter<double>(rng.normal_tensor<double>({9}));
      auto lb = Parameter<double>(rng.normal_tensor<double>({9}));
      auto build = [&](Tape<double>& t) {
        // the nonlinearity matters: layer_norm cancels a per-row affine, and
        // without it the group affine parameters have exactly zero gradient
        auto h = silu(group_norm(t.param(x), t.param(g), t.param(be), 2));
        h = layer_norm(reshape(h, {8, 9}), t.param(lg), t.param(lb));
        return sum(mul(h, h));
      };
      record("group_norm/layer_norm", grad_check(build, {&x, &g, &be, &lg, &lb}, step));
    }
    {
      auto x = Parameter<double>(rng.normal_tensor<double>({3, 6}));
      auto build = [&](Tape<double>& t) {
        auto s = softmax(t.param(x), 1);
        return sum(mul(s, t.param(x)));
      };
      record("softmax", grad_check(build, {&x}, step));
    }
    {
      auto q = Parameter<double>(rng.normal_tensor<double>({2, 3, 4}));
      auto k = Parameter<double>(rng.normal_tensor<double>({2, 5, 4}));
      auto v = Parameter<double>(rng.normal_tensor<double>({2, 5, 4}));
      auto bias = Parameter<double>(rng.normal_tensor<double>({2, 3, 5}));
      auto build = [&](Tape<double>& t) {
        auto o = attention(t.param(q), t.param(k), t.param(v), t.param(bias));
        return mse(o, t.input(Tensor<double>::zeros({2, 3, 4})));
      };
      record("attention (with logit bias)", grad_check(build, {&q, &k, &v, &bias}, step));
    }
  }

  // tiny end-to-end denoiser, a handful of seeds
  for (int64_t seed = 0; seed < std::min<int64_t>(seeds, 3); ++seed) {
    UNetConfig cfg;
    cfg.c_in = 3;
    cfg.c_out = 3;
    cfg.input_size = 8;
    cfg.base_width = 8;
    cfg.channel_mults = {1, 2};
    cfg.attn_resolutions = {4};
    cfg.heads = 2;
    cfg.d_enc = 8;
    cfg.groups = 2;
    Rng rng{100 + uint64_t(seed)};
    UNet<double> unet(cfg, rng);
    AdapterSet<double> adapters(rng, 8, unet.cross_attention_widths());
    ParamRegistry<double> reg;
    unet.register_params(reg, "unet");
    adapters.register_params(reg, "adapters");
    Tensor<double> z = rng.normal_tensor<double>({1, 3, 8, 8});
    Tensor<double> tokens = rng.normal_tensor<double>({4, 8});
    std::vector<double> bias = {1.0, 0.5, 0.25, 1.0};
    Tensor<double> target = rng.normal_tensor<double>({1, 3, 8, 8});
    std::vector<Parameter<double>*> params;
    reg.for_each([&](const std::string&, Parameter<double>& p) { params.push_back(&p); });
    auto build = [&](Tape<double>& t) {
      std::vector<CondSlot<double>> conds{CondSlot<double>{t.input(tokens), bias}};
      auto out = unet.forward(t, t.input(z), {5}, conds, adapters);
      return mse(out, t.input(target));
    };
    record("end-to-end denoiser", grad_check(build, params, step, 2, uint64_t(7 + seed)));
  }
  return results;
}

}  // namespace icseg
