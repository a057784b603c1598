#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icseg/grad_check.hpp"
#include "icseg/rng.hpp"
#include "icseg/tape.hpp"

#include <cmath>

using namespace icseg;

namespace {

template <typename S>
Parameter<S> random_param(Rng& rng, Shape shape, double scl = 1.0) {
  Tensor<S> t = rng.normal_tensor<S>(std::move(shape));
  t.vec() *= S(scl);
  return Parameter<S>(std::move(t));
}

}  // namespace

TEST_CASE("matmul identity leaves operand unchanged") {
  Rng rng(1);
  Tape<float> tape;
  auto a = tape.input(rng.normal_tensor<float>({2, 2}));
  auto eye = tape.input(Tensor<float>::identity(2));
  auto out = matmul(eye, a);
  CHECK(out.val().bit_equal(a.val()));
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
  Tape<float> tape;
  auto x = tape.input(Tensor<float>({2}, {0.f, 0.f}));
  auto y = softmax(x, 0);
  CHECK(y.val()[0] == doctest::Approx(0.5));
  CHECK(y.val()[1] == doctest::Approx(0.5));

  Rng rng(7);
  auto z = tape.input(rng.normal_tensor<float>({4, 9}));
  auto sm = softmax(z, 1);
  for (int64_t r = 0; r < 4; ++r) {
    float s = 0;
    for (int64_t c = 0; c < 9; ++c) s += sm.val().at(r, c);
    CHECK(std::abs(s - 1.f) < 1e-6f);
  }
}

TEST_CASE("conv2d constant image against sliding-window oracle") {
  // 4x4 ones convolved with 3x3 ones, zero pad: centers 9, corners 4.
  Tape<float> tape;
  auto x = tape.input(Tensor<float>::full({1, 1, 4, 4}, 1.f));
  auto w = tape.input(Tensor<float>::full({1, 1, 3, 3}, 1.f));
  auto b = tape.input(Tensor<float>::zeros({1}));
  auto y = conv2d(x, w, b, 1);
  REQUIRE(y.shape() == Shape({1, 1, 4, 4}));
  CHECK(y.val().at(0, 0, 1, 1) == doctest::Approx(9.f));
  CHECK(y.val().at(0, 0, 2, 2) == doctest::Approx(9.f));
  CHECK(y.val().at(0, 0, 0, 0) == doctest::Approx(4.f));
  CHECK(y.val().at(0, 0, 3, 3) == doctest::Approx(4.f));
  CHECK(y.val().at(0, 0, 0, 1) == doctest::Approx(6.f));
}

TEST_CASE("conv2d arbitrary case against direct sliding window") {
  Rng rng(11);
  for (int64_t stride : {int64_t(1), int64_t(2)}) {
    for (int64_t k : {int64_t(1), int64_t(3)}) {
      Tensor<float> xv = rng.normal_tensor<float>({2, 3, 6, 5});
      Tensor<float> wv = rng.normal_tensor<float>({4, 3, k, k});
      Tensor<float> bv = rng.normal_tensor<float>({4});
      Tape<float> tape;
      auto y = conv2d(tape.input(xv), tape.input(wv), tape.input(bv), stride);
      const int64_t pad = k / 2;
      const int64_t ho = (6 + 2 * pad - k) / stride + 1;
      const int64_t wo = (5 + 2 * pad - k) / stride + 1;
      REQUIRE(y.shape() == Shape({2, 4, ho, wo}));
      for (int64_t bi = 0; bi < 2; ++bi)
        for (int64_t oc = 0; oc < 4; ++oc)
          for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox) {
              double acc = bv[oc];
              for (int64_t c = 0; c < 3; ++c)
                for (int64_t ky = 0; ky < k; ++ky)
                  for (int64_t kx = 0; kx < k; ++kx) {
                    const int64_t iy = oy * stride + ky - pad;
                    const int64_t ix = ox * stride + kx - pad;
                    if (iy >= 0 && iy < 6 && ix >= 0 && ix < 5)
                      acc += double(xv.at(bi, c, iy, ix)) * double(wv.at(oc, c, ky, kx));
                  }
              CHECK(std::abs(double(y.val().at(bi, oc, oy, ox)) - acc) < 1e-4);
            }
    }
  }
}

TEST_CASE("backward of x^2 at x=3 gives 6; constant loss gives zero grads") {
  Parameter<double> p(Tensor<double>::scalar(3.0));
  Tape<double> tape;
  auto x = tape.param(p);
  auto loss = mul(x, x);
  tape.backward(loss);
  CHECK(p.grad[0] == doctest::Approx(6.0));

  p.zero_grad();
  Tape<double> tape2;
  auto x2 = tape2.param(p);
  auto c = tape2.constant(4.0);
  auto loss2 = mul(c, tape2.constant(0.5));
  (void)x2;
  tape2.backward(loss2);
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("frozen parameters accumulate zero gradient") {
  Parameter<double> frozen(Tensor<double>::scalar(2.0), /*train=*/false);
  Parameter<double> live(Tensor<double>::scalar(5.0));
  Tape<double> tape;
  auto loss = mul(tape.param(frozen), tape.param(live));
  tape.backward(loss);
  CHECK(frozen.grad[0] == 0.0);
  CHECK(live.grad[0] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape<float> tape;
  auto x = tape.input(Tensor<float>({2}, {1.f, 2.f}));
  CHECK_THROWS_AS(tape.backward(x), Error);
}

TEST_CASE("non-finite intermediate is an error") {
  Tape<float> tape;
  auto x = tape.input(Tensor<float>({1}, {88.f}));
  CHECK_THROWS_AS(mul(scale(x, std::numeric_limits<float>::max()),
                      scale(x, std::numeric_limits<float>::max())),
                  Error);
  auto y = tape.input(Tensor<float>({2}, {1.f, 2.f}));
  CHECK_THROWS_AS(add(y, tape.input(Tensor<float>({3}, {1.f, 2.f, 3.f}))), Error);
}

// Every kernel: FD match within 1e-4 relative error in f64, >= 20 seeds.
TEST_CASE("gradient fidelity across the kernel inventory") {
  const double kStep = 1e-5;
  const double kTol = 1e-4;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);

    SUBCASE("") {}  // keep doctest quiet about empty case

    {
      // add / mul / scale / sub, with scalar broadcast
      auto a = random_param<double>(rng, {3, 4});
      auto b = random_param<double>(rng, {3, 4});
      auto s = random_param<double>(rng, {1});
      auto build = [&](Tape<double>& t) {
        auto av = t.param(a), bv = t.param(b), sv = t.param(s);
        auto e = add(mul(av, bv), mul(bv, sv));
        return mse(scale(sub(e, av), 0.7), t.input(Tensor<double>::zeros({3, 4})));
      };
      CHECK(grad_check(build, {&a, &b, &s}, kStep) < kTol);
    }
    {
      // matmul + linear + transpose
      auto a = random_param<double>(rng, {3, 4});
      auto w = random_param<double>(rng, {4, 5});
      auto b = random_param<double>(rng, {5});
      auto build = [&](Tape<double>& t) {
        auto y = linear(t.param(a), t.param(w), t.param(b));
        auto z = matmul(y, transpose2d(y));
        return mse(z, t.input(Tensor<double>::zeros({3, 3})));
      };
      CHECK(grad_check(build, {&a, &w, &b}, kStep) < kTol);
    }
    {
      // conv2d stride 1 and 2, 3x3 and 1x1 + upsample + channel bias
      auto x = random_param<double>(rng, {2, 3, 6, 6});
      auto w3 = random_param<double>(rng, {4, 3, 3, 3}, 0.5);
      auto b3 = random_param<double>(rng, {4});
      auto w1 = random_param<double>(rng, {2, 4, 1, 1}, 0.5);
      auto b1 = random_param<double>(rng, {2});
      auto cb = random_param<double>(rng, {2, 2});
      auto build = [&](Tape<double>& t) {
        auto h = conv2d(t.param(x), t.param(w3), t.param(b3), 2);
        h = silu(h);
        h = conv2d(h, t.param(w1), t.param(b1), 1);
        h = add_channel_bias(h, t.param(cb));
        h = upsample_nearest2x(h);
        return mse(h, t.input(Tensor<double>::zeros(h.shape())));
      };
      CHECK(grad_check(build, {&x, &w3, &b3, &w1, &b1, &cb}, kStep) < kTol);
    }
    {
      // group_norm + layer_norm + silu + gelu
      auto x = random_param<double>(rng, {2, 4, 3, 3});
      auto gg = random_param<double>(rng, {4});
      auto gb = random_param<double>(rng, {4});
      auto lg = random_param<double>(rng, {9});
      auto lb = random_param<double>(rng, {9});
      auto build = [&](Tape<double>& t) {
        auto h = group_norm(t.param(x), t.param(gg), t.param(gb), 2);
        h = gelu(h);
        h = reshape(h, {8, 9});
        h = layer_norm(h, t.param(lg), t.param(lb));
        h = silu(h);
        return mse(h, t.input(Tensor<double>::zeros({8, 9})));
      };
      CHECK(grad_check(build, {&x, &gg, &gb, &lg, &lb}, kStep) < kTol);
    }
    {
      // softmax + sum + slice + concat + heads plumbing
      auto x = random_param<double>(rng, {4, 6});
      auto build = [&](Tape<double>& t) {
        auto v = t.param(x);
        auto sm = softmax(v, 1);
        auto h = split_heads(sm, 2);
        auto m = merge_heads(h);
        auto s1 = slice(m, 1, 0, 3);
        auto s2 = slice(m, 1, 3, 3);
        auto cat = concat(0, std::vector<Value<double>>{s1, s2});
        return sum(mul(cat, cat));
      };
      CHECK(grad_check(build, {&x}, kStep) < kTol);
    }
    {
      // attention with additive logit bias
      auto q = random_param<double>(rng, {2, 3, 4});
      auto k = random_param<double>(rng, {2, 5, 4});
      auto v = random_param<double>(rng, {2, 5, 4});
      auto bias = random_param<double>(rng, {2, 3, 5});
      auto build = [&](Tape<double>& t) {
        auto o = attention(t.param(q), t.param(k), t.param(v), t.param(bias));
        return mse(o, t.input(Tensor<double>::zeros({2, 3, 4})));
      };
      CHECK(grad_check(build, {&q, &k, &v, &bias}, kStep) < kTol);
    }
    {
      // space_to_depth / depth_to_space roundtrip path
      auto x = random_param<double>(rng, {3, 4, 4});
      auto build = [&](Tape<double>& t) {
        auto z = space_to_depth(t.param(x), 2);
        auto back = depth_to_space(z, 2);
        return sum(mul(back, back));
      };
      CHECK(grad_check(build, {&x}, kStep) < kTol);
    }
  }
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    auto x = random_param<double>(rng, {2, 6});
    auto w1 = random_param<double>(rng, {6, 8});
    auto b1 = random_param<double>(rng, {8});
    auto w2 = random_param<double>(rng, {8, 3});
    auto b2 = random_param<double>(rng, {3});
    Tensor<double> target = rng.normal_tensor<double>({2, 3});
    auto build = [&](Tape<double>& t) {
      auto h = gelu(linear(t.param(x), t.param(w1), t.param(b1)));
      auto y = linear(h, t.param(w2), t.param(b2));
      return mse(y, t.input(target));
    };
    CHECK(grad_check(build, {&x, &w1, &b1, &w2, &b2}, 1e-5) < 1e-4);
  }
}

TEST_CASE("grad_check is exact on a quadratic form") {
  Rng rng(3);
  auto x = random_param<double>(rng, {5});
  Tensor<double> a = rng.normal_tensor<double>({5, 5});
  auto build = [&](Tape<double>& t) {
    auto xv = reshape(t.param(x), {1, 5});
    auto y = matmul(matmul(xv, t.input(a)), transpose2d(xv));
    return reshape(y, {1});
  };
  CHECK(grad_check(build, {&x}, 1e-5) < 1e-8);
}

TEST_CASE("grad_check flags a corrupted backward rule") {
  // A silu whose backward rule drops the x*s*(1-s) term.
  auto bad_silu = [](Value<double> a) {
    Tensor<double> out(a.val().shape());
    for (int64_t i = 0; i < a.val().size(); ++i) {
      const double x = a.val()[i];
      out[i] = x / (1.0 + std::exp(-x));
    }
    return a.tape->make_node(
        std::move(out), {a},
        [a](Tape<double>& t, const Tensor<double>& g) {
          Tensor<double> ga(a.val().shape());
          for (int64_t i = 0; i < a.val().size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-a.val()[i]));
            ga[i] = g[i] * s;  // wrong on purpose
          }
          t.accumulate(a, ga);
        },
        "bad_silu");
  };
  Rng rng(5);
  auto x = random_param<double>(rng, {4, 4});
  auto build = [&](Tape<double>& t) {
    auto h = bad_silu(t.param(x));
    return sum(mul(h, h));
  };
  CHECK(grad_check(build, {&x}, 1e-5) > 1e-2);
}

TEST_CASE("kernels are deterministic bit-for-bit") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tape<float> tape;
    auto x = tape.input(rng.normal_tensor<float>({2, 3, 8, 8}));
    auto w = tape.input(rng.normal_tensor<float>({4, 3, 3, 3}));
    auto b = tape.input(rng.normal_tensor<float>({4}));
    auto g = tape.input(Tensor<float>::full({4}, 1.f));
    auto be = tape.input(Tensor<float>::zeros({4}));
    auto h = group_norm(conv2d(x, w, b, 1), g, be, 2);
    auto tok = reshape(silu(h), {2 * 4, 64});
    auto att = attention(reshape(tok, {1, 8, 64}), reshape(tok, {1, 8, 64}),
                         reshape(tok, {1, 8, 64}));
    return sum(mul(att, att)).val()[0];
  };
  CHECK(std::memcmp(&(run(17) == run(17) ? "" : "")[0], "", 0) == 0);  // no-op anchor
  const float a = run(17), b = run(17);
  CHECK(std::memcmp(&a, &b, sizeof(float)) == 0);
}

TEST_CASE("attention weights under huge negative bias vanish") {
  Rng rng(9);
  Tape<float> tape;
  auto q = tape.input(rng.normal_tensor<float>({1, 2, 4}));
  auto k = tape.input(rng.normal_tensor<float>({1, 3, 4}));
  Tensor<float> vvals = Tensor<float>::zeros({1, 3, 4});
  // one-hot value rows expose the weight of each key position
  for (int64_t i = 0; i < 3; ++i) vvals.at(0, i, i) = 1.f;
  auto v = tape.input(vvals);
  Tensor<float> bias = Tensor<float>::zeros({1, 2, 3});
  bias.at(0, 0, 1) = -1e9f;
  bias.at(0, 1, 1) = -1e9f;
  auto out = attention(q, k, v, tape.input(bias));
  CHECK(out.val().at(0, 0, 1) < 1e-30f);
  CHECK(out.val().at(0, 1, 1) < 1e-30f);
}

TEST_CASE("sinusoidal embedding is bounded and distinguishes timesteps") {
  auto e0 = sinusoidal_embedding<float>(0.0, 16);
  auto e5 = sinusoidal_embedding<float>(5.0, 16);
  CHECK(e0.size() == 16);
  for (int64_t i = 0; i < 16; ++i) CHECK(std::abs(e0[i]) <= 1.f);
  CHECK(!e0.bit_equal(e5));
  CHECK(e0[8] == doctest::Approx(1.f));  // cos(0)
}

TEST_CASE("mse matches a scalar oracle") {
  Rng rng(21);
  Tensor<double> a = rng.normal_tensor<double>({7, 5});
  Tensor<double> b = rng.normal_tensor<double>({7, 5});
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  acc /= double(a.size());
  Tape<double> tape;
  CHECK(mse(tape.input(a), tape.input(b)).val()[0] == doctest::Approx(acc));
}
