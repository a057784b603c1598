#pragma once

#include "icseg/rng.hpp"
#include "icseg/tape.hpp"
#include "icseg/tensor.hpp"

#include <Eigen/Dense>

namespace icseg {

// Lossless image <-> latent transform standing in for a learned autoencoder:
// space-to-depth by f_sp followed by a fixed orthonormal channel mix. Exactly
// invertible and norm preserving, so codec error never enters the pipeline.
// c_z = 3 * f_sp^2. Decode output is intentionally not clamped.
class LatentCodec {
 public:
  explicit LatentCodec(int64_t f_sp = 2) : f_sp_(f_sp), mix_(identity_mix(f_sp)) {
    check(f_sp >= 1, "spatial factor must be >= 1");
  }

  LatentCodec(int64_t f_sp, Eigen::MatrixXd mix) : f_sp_(f_sp), mix_(std::move(mix)) {
    check(f_sp >= 1, "spatial factor must be >= 1");
    check(mix_.rows() == channels() && mix_.cols() == channels(),
          "channel mix must be c_z x c_z");
    check((mix_.transpose() * mix_ - Eigen::MatrixXd::Identity(channels(), channels()))
              .cwiseAbs()
              .maxCoeff() < 1e-9,
          "channel mix must be orthonormal");
  }

  static LatentCodec with_random_mix(int64_t f_sp, uint64_t seed) {
    const int64_t c = 3 * f_sp * f_sp;
    Rng rng(seed);
    Eigen::MatrixXd g(c, c);
    for (int64_t i = 0; i < c; ++i)
      for (int64_t j = 0; j < c; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(c, c);
    return LatentCodec(f_sp, std::move(q));
  }

  int64_t spatial_factor() const { return f_sp_; }
  int64_t channels() const { return 3 * f_sp_ * f_sp_; }
  const Eigen::MatrixXd& mix() const { return mix_; }

  // [3,H,W] -> [c_z, H/f, W/f]
  template <typename S>
  Tensor<S> encode(const Tensor<S>& image) const {
    check(image.rank() == 3 && image.dim(0) == 3, "image must be [3,H,W]");
    check(image.dim(1) % f_sp_ == 0 && image.dim(2) % f_sp_ == 0,
          "image size not divisible by the spatial factor");
    Tensor<S> blocks = to_blocks(image);
    return apply_mix(blocks, /*transpose=*/false);
  }

  // [c_z, h, w] -> [3, h*f, w*f]
  template <typename S>
  Tensor<S> decode(const Tensor<S>& latent) const {
    check(latent.rank() == 3 && latent.dim(0) == channels(), "latent must be [c_z,h,w]");
    Tensor<S> unmixed = apply_mix(latent, /*transpose=*/true);
    return from_blocks(unmixed);
  }

  // Differentiable decode for losses computed in pixel space.
  template <typename S>
  Value<S> decode_value(Value<S> latent) const {
    const Shape& s = latent.shape();
    check(s.size() == 3 && s[0] == channels(), "latent must be [c_z,h,w]");
    const int64_t c = channels(), hw = s[1] * s[2];
    Tensor<S> qt({c, c});
    for (int64_t i = 0; i < c; ++i)
      for (int64_t j = 0; j < c; ++j) qt.at(i, j) = S(mix_(j, i));
    auto unmixed = matmul(latent.tape->input(std::move(qt)), reshape(latent, {c, hw}));
    return depth_to_space(reshape(unmixed, {c, s[1], s[2]}), f_sp_);
  }

 private:
  static Eigen::MatrixXd identity_mix(int64_t f_sp) {
    const int64_t c = 3 * f_sp * f_sp;
    return Eigen::MatrixXd::Identity(c, c);
  }

  template <typename S>
  Tensor<S> to_blocks(const Tensor<S>& image) const {
    const int64_t f = f_sp_, h = image.dim(1), w = image.dim(2);
    const int64_t ho = h / f, wo = w / f;
    Tensor<S> out({channels(), ho, wo});
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t dy = 0; dy < f; ++dy)
        for (int64_t dx = 0; dx < f; ++dx) {
          const int64_t oc = (ch * f + dy) * f + dx;
          for (int64_t y = 0; y < ho; ++y)
            for (int64_t x = 0; x < wo; ++x)
              out.at(oc, y, x) = image.at(ch, y * f + dy, x * f + dx);
        }
    return out;
  }

  template <typename S>
  Tensor<S> from_blocks(const Tensor<S>& latent) const {
    const int64_t f = f_sp_, ho = latent.dim(1), wo = latent.dim(2);
    Tensor<S> out({3, ho * f, wo * f});
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t dy = 0; dy < f; ++dy)
        for (int64_t dx = 0; dx < f; ++dx) {
          const int64_t ic = (ch * f + dy) * f + dx;
          for (int64_t y = 0; y < ho; ++y)
            for (int64_t x = 0; x < wo; ++x)
              out.at(ch, y * f + dy, x * f + dx) = latent.at(ic, y, x);
        }
    return out;
  }

  template <typename S>
  Tensor<S> apply_mix(const Tensor<S>& t, bool transpose) const {
    const int64_t c = channels(), hw = t.dim(1) * t.dim(2);
    Tensor<S> out(t.shape());
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> q = mix_.cast<S>();
    if (transpose) q.transposeInPlace();
    out.mat(c, hw).noalias() = q * t.mat(c, hw);
    return out;
  }

  int64_t f_sp_;
  Eigen::MatrixXd mix_;
};

}  // namespace icseg
