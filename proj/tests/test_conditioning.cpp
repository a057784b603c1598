#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icseg/conditioning.hpp"
#include "icseg/rng.hpp"

#include <cmath>

using namespace icseg;

namespace {

PromptEncoderConfig tiny_cfg(int64_t depth = 2) {
  PromptEncoderConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  cfg.embed_dim = 32;
  cfg.depth = depth;
  cfg.heads = 4;
  return cfg;
}

}  // namespace

TEST_CASE("token count is the patch grid area, class token dropped") {
  Rng rng(1);
  PromptEncoder<float> enc(tiny_cfg(), rng);
  Tape<float> tape;
  Tensor<float> img = rng.uniform_tensor<float>({3, 32, 32}, -1, 1);
  auto tok = enc.encode(tape, img);
  CHECK(tok.shape() == Shape({16, 32}));
}

TEST_CASE("identical images produce identical tokens") {
  Rng rng(2);
  PromptEncoder<float> enc(tiny_cfg(), rng);
  Tensor<float> img = rng.uniform_tensor<float>({3, 32, 32}, -1, 1);
  Tape<float> t1, t2;
  auto a = enc.encode(t1, img);
  auto b = enc.encode(t2, img);
  CHECK(a.val().bit_equal(b.val()));
}

TEST_CASE("with depth 0 a patch-content permutation permutes tokens") {
  Rng rng(3);
  PromptEncoder<float> enc(tiny_cfg(/*depth=*/0), rng);
  Tensor<float> img = rng.uniform_tensor<float>({3, 32, 32}, -1, 1);
  // swap the contents of patch (0,0) and patch (1,1) wholesale
  Tensor<float> swapped = img;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x) {
        std::swap(swapped.at(c, y, x), swapped.at(c, 8 + y, 8 + x));
      }
  Tape<float> t1, t2;
  auto tok = enc.encode(t1, img);
  auto tok_sw = enc.encode(t2, swapped);
  // patch (0,0) is token 0; patch (1,1) is token 5 on the 4x4 grid
  for (int64_t d = 0; d < 32; ++d) {
    CHECK(tok.val().at(0, d) == doctest::Approx(tok_sw.val().at(5, d)));
    CHECK(tok.val().at(5, d) == doctest::Approx(tok_sw.val().at(0, d)));
    CHECK(tok.val().at(3, d) == doctest::Approx(tok_sw.val().at(3, d)));
  }
}

TEST_CASE("foreground token weights count exact patch fractions") {
  MaskGrid all_fg = MaskGrid::Constant(16, 16, true);
  auto w1 = foreground_token_weights<float>(all_fg, 2, 2);
  for (float w : w1) CHECK(w == 1.f);

  MaskGrid all_bg = MaskGrid::Constant(16, 16, false);
  auto w0 = foreground_token_weights<float>(all_bg, 2, 2);
  for (float w : w0) CHECK(w == 0.f);

  MaskGrid quad = MaskGrid::Constant(16, 16, false);
  quad.block(0, 0, 8, 8).setConstant(true);
  auto wq = foreground_token_weights<float>(quad, 2, 2);
  CHECK(wq == std::vector<float>({1.f, 0.f, 0.f, 0.f}));

  MaskGrid half = MaskGrid::Constant(4, 4, false);
  half.block(0, 0, 2, 4).setConstant(true);
  auto wh = foreground_token_weights<float>(half, 1, 1);
  CHECK(wh[0] == 0.5f);

  CHECK_THROWS_AS(foreground_token_weights<float>(all_fg, 3, 3), Error);
}

TEST_CASE("all-background weights fall back to unbiased attention") {
  std::vector<float> weights(4, 0.f);
  bool warned = false;
  auto fb = fg_weights_with_fallback(weights, &warned);
  CHECK(warned);
  for (float w : fb) CHECK(w == 1.f);

  std::vector<float> some_fg = {0.f, 0.25f};
  auto kept = fg_weights_with_fallback(some_fg, &warned);
  CHECK(kept == some_fg);
}

TEST_CASE("bias mapping: soft floor and hard mask") {
  std::vector<float> w = {1.f, 0.5f, 0.f};
  auto soft = fg_weights_to_bias(w, 1e-6);
  CHECK(soft[0] == doctest::Approx(0.f));
  CHECK(soft[1] == doctest::Approx(std::log(0.5f)));
  CHECK(soft[2] == doctest::Approx(std::log(1e-6)));
  auto hard = fg_weights_to_bias(w, 0.0);
  CHECK(hard[2] == -1e30f);
}

TEST_CASE("adapters: identity, zero, and matmul oracle") {
  Rng rng(5);
  AdapterSet<float> set(rng, 8, {8, 16});
  REQUIRE(set.size() == 2);

  // identity-initialized square adapter passes tokens through
  set.adapters[0].w.value = Tensor<float>::identity(8);
  set.adapters[0].b.value = Tensor<float>::zeros({8});
  Tape<float> tape;
  Tensor<float> tok = rng.normal_tensor<float>({5, 8});
  auto out = set.adapt(tape, tape.input(tok), 0);
  CHECK(out.val().bit_equal(tok));

  // zero adapter maps to zero
  set.adapters[1].w.value = Tensor<float>::zeros({8, 16});
  auto z = set.adapt(tape, tape.input(tok), 1);
  for (int64_t i = 0; i < z.size(); ++i) CHECK(z.val()[i] == 0.f);

  // random adapter equals the plain matmul
  AdapterSet<float> rset(rng, 8, {12});
  auto r = rset.adapt(tape, tape.input(tok), 0);
  Tensor<float> expect({5, 12});
  expect.mat(5, 12) = tok.mat(5, 8) * rset.adapters[0].w.value.mat(8, 12);
  expect.mat(5, 12).rowwise() += rset.adapters[0].b.value.mat(1, 12).row(0);
  for (int64_t i = 0; i < expect.size(); ++i)
    CHECK(r.val()[i] == doctest::Approx(expect[i]).epsilon(1e-5));

  CHECK_THROWS_AS(rset.adapt(tape, tape.input(tok), 3), Error);
}

TEST_CASE("combine_instructions concatenates tokens and weights") {
  Rng rng(6);
  Tape<float> tape;
  InstructionTokens<float> one{tape.input(rng.normal_tensor<float>({4, 8})),
                               {0.f, 1.f, 0.5f, 0.f}};
  auto same = combine_instructions(std::vector<InstructionTokens<float>>{one});
  CHECK(same.tokens.val().bit_equal(one.tokens.val()));

  auto three = combine_instructions(std::vector<InstructionTokens<float>>{one, one, one});
  CHECK(three.tokens.shape() == Shape({12, 8}));
  CHECK(three.fg_weights.size() == 12);

  CHECK_THROWS_AS(combine_instructions(std::vector<InstructionTokens<float>>{}), Error);
}

TEST_CASE("duplicated prompts leave attention output unchanged") {
  Rng rng(7);
  Tape<float> tape;
  Tensor<float> q = rng.normal_tensor<float>({1, 6, 8});
  Tensor<float> keys = rng.normal_tensor<float>({1, 4, 8});
  Tensor<float> vals = rng.normal_tensor<float>({1, 4, 8});

  auto out1 = attention(tape.input(q), tape.input(keys), tape.input(vals));

  // duplicate the token sequence: [K;K], [V;V]
  Tensor<float> keys2({1, 8, 8});
  Tensor<float> vals2({1, 8, 8});
  std::copy(keys.data(), keys.data() + 32, keys2.data());
  std::copy(keys.data(), keys.data() + 32, keys2.data() + 32);
  std::copy(vals.data(), vals.data() + 32, vals2.data());
  std::copy(vals.data(), vals.data() + 32, vals2.data() + 32);
  auto out2 = attention(tape.input(q), tape.input(keys2), tape.input(vals2));

  REQUIRE(out1.shape() == out2.shape());
  for (int64_t i = 0; i < out1.size(); ++i)
    CHECK(std::abs(out1.val()[i] - out2.val()[i]) < 1e-5f);
}

TEST_CASE("encoder rejects mismatched image sizes") {
  Rng rng(8);
  PromptEncoder<float> enc(tiny_cfg(), rng);
  Tape<float> tape;
  Tensor<float> wrong = Tensor<float>::zeros({3, 16, 16});
  CHECK_THROWS_AS(enc.encode(tape, wrong), Error);
}
