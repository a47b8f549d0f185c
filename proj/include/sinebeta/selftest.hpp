#pragma once

// Exact (non-statistical) invariant checks, runnable from the command line.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sinebeta/carousel.hpp"
#include "sinebeta/ensemble.hpp"
#include "sinebeta/hyperbolic.hpp"
#include "sinebeta/rng.hpp"

namespace sinebeta::selftest {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

using hyperbolic::complex;

inline hyperbolic::MobiusMap random_map(mc::RngStream& rng) {
  // product of an affine map and a rotation covers PSL(2, R)
  const double a = std::exp(2.0 * rng.uniform_signed());
  const double b = 3.0 * rng.uniform_signed();
  const double theta = hyperbolic::kPi * rng.uniform_signed();
  return hyperbolic::MobiusMap::affine(a, b) * hyperbolic::MobiusMap::rotation(theta);
}

inline CheckResult philox_vectors() {
  using P = mc::Philox4x32;
  const P::Counter zero = P::generate({0, 0, 0, 0}, {0, 0});
  const P::Counter ones = P::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  const P::Counter pi = P::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  const bool ok = zero == P::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u} &&
                  ones == P::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu} &&
                  pi == P::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u};
  return {"philox known-answer vectors", ok, ""};
}

inline CheckResult ash_identity(std::size_t cases) {
  mc::RngStream rng(0x5eed, 1);
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const auto t = random_map(rng);
    const hyperbolic::DiskPoint v = hyperbolic::DiskPoint::from_angle(hyperbolic::kPi * rng.uniform_signed());
    const hyperbolic::DiskPoint w = hyperbolic::DiskPoint::from_angle(hyperbolic::kPi * rng.uniform_signed());
    const double a1 = hyperbolic::ash(t, v, w);
    const double a2 = hyperbolic::ash_alternate(t, v, w);
    const double direct = hyperbolic::arg_0_2pi(t.apply_disk(w).value() / t.apply_disk(v).value()) -
                          hyperbolic::arg_0_2pi(w.value() / v.value());
    const double diff_direct = std::remainder(a1 - direct, hyperbolic::kTwoPi);
    worst = std::max({worst, std::abs(std::remainder(a1 - a2, hyperbolic::kTwoPi)), std::abs(diff_direct)});
    if (!(std::abs(a1) < hyperbolic::kTwoPi)) worst = std::max(worst, 1.0);
  }
  return {"angular shift identity", worst <= 1e-10, "max deviation " + std::to_string(worst)};
}

inline CheckResult lift_quasiperiodic() {
  mc::RngStream rng(0x5eed, 2);
  double worst = 0.0;
  bool monotone = true;
  for (int i = 0; i < 200; ++i) {
    const double a = std::exp(2.0 * rng.uniform_signed());
    const double b = 3.0 * rng.uniform_signed();
    double prev = -std::numeric_limits<double>::infinity();
    for (int j = 0; j <= 64; ++j) {
      const double phi = -hyperbolic::kPi + hyperbolic::kTwoPi * j / 64.0;
      const double x = hyperbolic::lifted_apply_affine(a, b, phi);
      const double y = hyperbolic::lifted_apply_affine(a, b, phi + hyperbolic::kTwoPi);
      worst = std::max(worst, std::abs(y - x - hyperbolic::kTwoPi));
      if (!(x > prev)) monotone = false;
      prev = x;
    }
    if (hyperbolic::lifted_apply_affine(a, b, hyperbolic::kPi) != hyperbolic::kPi &&
        std::abs(hyperbolic::lifted_apply_affine(a, b, hyperbolic::kPi) - hyperbolic::kPi) > 1e-12) {
      monotone = false;
    }
  }
  return {"lifted affine quasiperiodicity", worst <= 1e-12 && monotone, "max deviation " + std::to_string(worst)};
}

inline CheckResult counting_oracle(std::size_t matrices, std::size_t points) {
  mc::RngStream rng(0x5eed, 3);
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < matrices; ++i) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 200.0);
    const double beta = 0.5 + 3.5 * rng.uniform();
    const ensemble::EnsembleParams p{n, beta, 0.0, 0};
    const auto m = ensemble::sample_ensemble(p, rng);
    const auto model = ensemble::conjugate(m);
    const auto [lo, hi] = ensemble::gershgorin_bounds(m);
    for (std::size_t j = 0; j < points; ++j) {
      const double lambda = lo - 1.0 + (hi - lo + 2.0) * rng.uniform();
      if (ensemble::phase_count_below(model, lambda) != ensemble::sturm_count_below(m, lambda)) ++mismatches;
    }
  }
  return {"phase count equals Sturm count", mismatches == 0, std::to_string(mismatches) + " mismatches"};
}

inline CheckResult valve(std::size_t runs) {
  mc::RngStream rng(0x5eed, 4);
  std::size_t failures = 0;
  for (std::size_t i = 0; i < runs; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 150.0);
    const double beta = 0.5 + 3.5 * rng.uniform();
    const double mu = 1.5 * std::sqrt(static_cast<double>(n)) * rng.uniform_signed();
    const ensemble::EnsembleParams p{n, beta, mu, 0};
    if (!(p.n0() > 0.0)) continue;
    const auto model = ensemble::sample_conjugated(p, rng);
    const double lambda = 10.0 * rng.uniform();
    const auto states = ensemble::regularized_phase_run(model, p, lambda);
    if (!ensemble::valve_check(states)) ++failures;
  }
  return {"valve property", failures == 0, std::to_string(failures) + " violations"};
}

inline CheckResult sse_lattice() {
  carousel::SsePathState s = carousel::SsePathState::start(std::vector<double>{0.0, 3.0});
  s.alphas[1] = carousel::LatticeAngle{2, 0.0};
  const double f = 0.3, dt = 1e-3;
  carousel::step_coupled_sse(s, f, dt, {0.7, -1.3});
  const bool zero_ok = s.alphas[0].k == 0 && s.alphas[0].x == 0.0;
  const bool drift_ok = s.alphas[1].k == 2 && s.alphas[1].x == 3.0 * f * dt;
  carousel::LatticeAngle a{1, 0.0};
  carousel::step_single_sse(a, 2.0, f, dt, 0.9);
  const bool single_ok = a.k == 1 && a.x == 2.0 * f * dt;
  return {"sine equation lattice invariants", zero_ok && drift_ok && single_ok, ""};
}

inline CheckResult stream_determinism() {
  mc::RngStream a(42, 7), b(42, 7), c(42, 8);
  bool same = true, differ = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    same = same && x == b.next_u64();
    differ = differ || x != c.next_u64();
  }
  return {"stream determinism", same && differ, ""};
}

}  // namespace detail

inline std::vector<CheckResult> run_all() {
  return {detail::philox_vectors(),  detail::stream_determinism(), detail::ash_identity(20000),
          detail::lift_quasiperiodic(), detail::counting_oracle(40, 20), detail::valve(40),
          detail::sse_lattice()};
}

}  // namespace sinebeta::selftest
