#pragma once

#include "icseg/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>

namespace icseg {

// xoshiro256++ with a splitmix64 seeder. Self-contained so that RNG state can
// be serialized into checkpoints as four words and restored bit-exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      s = z ^ (z >> 31);
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  int64_t below(int64_t n) {
    check(n > 0, "Rng::below requires n > 0");
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller without a cached spare so the state is exactly the four words.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename S>
  Tensor<S> normal_tensor(Shape shape) {
    Tensor<S> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal());
    return t;
  }

  template <typename S>
  Tensor<S> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<S> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
    return t;
  }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<uint64_t, 4> state_{};
};

}  // namespace icseg
