#pragma once

#include "icseg/rng.hpp"
#include "icseg/tape.hpp"

#include <algorithm>
#include <functional>
#include <vector>

namespace icseg {

// Central finite-difference check of reverse-mode gradients, f64 only.
// `build` constructs the scalar loss on a fresh tape from the current
// parameter values; it is re-run for every probe. Returns the max over
// sampled coordinates of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
//
// `max_coords_per_param` < 0 probes every coordinate; otherwise a random
// subset of that size is probed per parameter.
inline double grad_check(const std::function<Value<double>(Tape<double>&)>& build,
                         const std::vector<Parameter<double>*>& params, double step,
                         int64_t max_coords_per_param = -1, uint64_t probe_seed = 0) {
  check(step > 0, "grad_check: step must be positive");
  for (Parameter<double>* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Value<double> loss = build(tape);
    check(loss.size() == 1, "grad_check: build must return a scalar loss");
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape;
    return build(tape).val()[0];
  };
  Rng probe_rng(probe_seed);
  double max_err = 0;
  for (Parameter<double>* p : params) {
    if (!p->trainable) continue;
    std::vector<int64_t> coords;
    if (max_coords_per_param < 0 || p->size() <= max_coords_per_param) {
      coords.resize(static_cast<size_t>(p->size()));
      for (int64_t i = 0; i < p->size(); ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int64_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(probe_rng.below(p->size()));
    }
    for (int64_t c : coords) {
      const double saved = p->value[c];
      p->value[c] = saved + step;
      const double fp = eval();
      p->value[c] = saved - step;
      const double fm = eval();
      p->value[c] = saved;
      const double fd = (fp - fm) / (2.0 * step);
      const double analytic = p->grad[c];
      const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
      max_err = std::max(max_err, std::abs(analytic - fd) / denom);
    }
  }
  return max_err;
}

}  // namespace icseg
