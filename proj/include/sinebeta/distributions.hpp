#pragma once

// Gamma and chi variates for non-integer degrees of freedom.
//
// Gamma uses the Marsaglia-Tsang squeeze/rejection sampler; shapes below one
// are boosted with G(a) = G(a + 1) * U^(1/a).

#include <cmath>
#include <stdexcept>

#include "sinebeta/rng.hpp"

namespace sinebeta {

/// Gamma(shape, 1).  shape == 0 returns 0.
inline double sample_gamma(mc::RngStream& rng, double shape) {
  if (!(shape >= 0.0)) throw std::invalid_argument("sample_gamma: shape must be nonnegative");
  if (shape == 0.0) return 0.0;
  if (shape < 1.0) {
    const double boost = std::pow(rng.uniform(), 1.0 / shape);
    return sample_gamma(rng, shape + 1.0) * boost;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    const double x = rng.normal();
    const double t = 1.0 + c * x;
    if (t <= 0.0) continue;
    const double v = t * t * t;
    const double u = rng.uniform();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

/// Chi-squared with k (real, >= 0) degrees of freedom.
inline double sample_chi_squared(mc::RngStream& rng, double k) {
  return 2.0 * sample_gamma(rng, 0.5 * k);
}

/// Chi with k (real, >= 0) degrees of freedom: sqrt(2 G), G ~ Gamma(k/2, 1).
inline double sample_chi(mc::RngStream& rng, double k) {
  return std::sqrt(sample_chi_squared(rng, k));
}

}  // namespace sinebeta
