#pragma once

#include "icseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace icseg {

// Forward-corruption schedule: beta_t, alpha_t = 1 - beta_t and the running
// product alpha_bar_t. Tables are kept in f64 and cast at the point of use.
struct NoiseSchedule {
  int64_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double alpha_bar_at(int64_t t) const {
    check(t >= -1 && t < T, "timestep out of range");
    return t < 0 ? 1.0 : alpha_bar[static_cast<size_t>(t)];
  }

  // Signal-to-noise ratio at t.
  double snr(int64_t t) const {
    const double ab = alpha_bar_at(t);
    return ab / (1.0 - ab);
  }
};

inline NoiseSchedule make_linear_schedule(int64_t T, double beta_start, double beta_end) {
  check(T >= 1, "schedule length must be >= 1");
  check(beta_start > 0 && beta_start <= beta_end && beta_end < 1,
        "betas must satisfy 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<size_t>(T));
  s.alpha.resize(static_cast<size_t>(T));
  s.alpha_bar.resize(static_cast<size_t>(T));
  double prod = 1.0;
  for (int64_t t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : double(t) / double(T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta[static_cast<size_t>(t)] = b;
    s.alpha[static_cast<size_t>(t)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<size_t>(t)] = prod;
  }
  return s;
}

// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps
template <typename S>
Tensor<S> add_noise(const Tensor<S>& z0, const Tensor<S>& eps, int64_t t,
                    const NoiseSchedule& sched) {
  check(z0.same_shape(eps), "add_noise: noise shape must match data shape");
  check(t >= 0 && t < sched.T, "add_noise: timestep out of range");
  const double ab = sched.alpha_bar_at(t);
  const S c0 = S(std::sqrt(ab)), c1 = S(std::sqrt(1.0 - ab));
  Tensor<S> out(z0.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = c0 * z0[i] + c1 * eps[i];
  return out;
}

// Deterministic reverse update: reconstruct z0_hat from the predicted noise
// and re-noise it to t_prev (alpha_bar at t_prev = -1 is defined as 1).
// z0_clamp > 0 bounds the reconstruction, keeping early high-amplification
// steps from compounding prediction error; 0 disables the guard.
template <typename S>
Tensor<S> reverse_step(const Tensor<S>& z_t, const Tensor<S>& eps_hat, int64_t t, int64_t t_prev,
                       const NoiseSchedule& sched, double z0_clamp = 0.0) {
  check(z_t.same_shape(eps_hat), "reverse_step: shape mismatch");
  check(t > t_prev, "reverse_step: requires t > t_prev");
  check(t >= 0 && t < sched.T && t_prev >= -1, "reverse_step: timestep out of range");
  const double ab_t = std::max(sched.alpha_bar_at(t), 1e-8);
  const double ab_p = sched.alpha_bar_at(t_prev);
  const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
  const double sig_t = std::sqrt(1.0 - sched.alpha_bar_at(t));
  const double sqrt_ab_p = std::sqrt(ab_p);
  const double sig_p = std::sqrt(1.0 - ab_p);
  Tensor<S> out(z_t.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    double z0 = (double(z_t[i]) - sig_t * double(eps_hat[i])) * inv_sqrt_ab;
    if (z0_clamp > 0.0) z0 = std::clamp(z0, -z0_clamp, z0_clamp);
    out[i] = S(sqrt_ab_p * z0 + sig_p * double(eps_hat[i]));
  }
  return out;
}

// Strictly decreasing inference timesteps starting at T-1; the final step's
// predecessor is the data (use plan_prev to walk them pairwise).
struct TimestepPlan {
  std::vector<int64_t> steps;

  int64_t prev_of(size_t i) const {
    return i + 1 < steps.size() ? steps[i + 1] : int64_t(-1);
  }
};

inline TimestepPlan make_timestep_plan(int64_t T, int64_t n_steps) {
  check(n_steps >= 1 && n_steps <= T, "plan requires 1 <= n_steps <= T");
  TimestepPlan plan;
  const int64_t stride = T / n_steps;
  plan.steps.reserve(static_cast<size_t>(n_steps));
  for (int64_t i = 0; i < n_steps; ++i) plan.steps.push_back(T - 1 - i * stride);
  check(plan.steps.back() >= 0, "plan construction produced a negative step");
  return plan;
}

}  // namespace icseg
