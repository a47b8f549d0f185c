#pragma once

// Tridiagonal beta-ensemble: sampling, Sturm counting, and the lifted phase
// recursions of the eigenvalue equation.
//
// Index convention (0-based).  For n = 3:
//
//       [ diag[0]     offdiag[0]   0          ]
//   M = [ offdiag[0]  diag[1]      offdiag[1] ]
//       [ 0           offdiag[1]   diag[2]    ]
//
// diag[j] ~ N(0, 2)/sqrt(beta) and offdiag[j] ~ chi_{(n-1-j) beta}/sqrt(beta),
// so offdiag[0] carries chi_{2 beta} and offdiag[1] carries chi_{beta}.
//
// The conjugated model uses s[l] = sqrt(n - l - 1/2), x[l] = diag[l] and
// y[l] = offdiag[l]^2 / s[l+1] - s[l] with y[n-1] = 0.  Both share the spectrum.

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sinebeta/distributions.hpp"
#include "sinebeta/hyperbolic.hpp"
#include "sinebeta/rng.hpp"

namespace sinebeta::ensemble {

using hyperbolic::complex;
using hyperbolic::kPi;
using hyperbolic::kTwoPi;

struct EnsembleParams {
  std::size_t n = 1;
  double beta = 2.0;
  double mu = 0.0;  ///< center of the scaling window
  std::uint64_t seed = 0;

  /// n0 = n - mu^2/4 - 1/2.
  double n0() const { return static_cast<double>(n) - mu * mu / 4.0 - 0.5; }

  /// n^{1/6} (2 sqrt(n) - |mu|); large values put mu well inside the bulk.
  double edge_diagnostic() const {
    const double nn = static_cast<double>(n);
    return std::pow(nn, 1.0 / 6.0) * (2.0 * std::sqrt(nn) - std::abs(mu));
  }

  void validate() const {
    if (n < 1) throw std::invalid_argument("EnsembleParams: n must be >= 1");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("EnsembleParams: beta must be > 0");
    if (!std::isfinite(mu)) throw std::invalid_argument("EnsembleParams: mu must be finite");
  }

  /// Bulk experiments additionally need n0 > 0.
  void validate_bulk() const {
    validate();
    if (!(n0() > 0.0)) {
      throw std::invalid_argument("EnsembleParams: n0 = n - mu^2/4 - 1/2 must be positive, got " +
                                  std::to_string(n0()));
    }
  }
};

struct TridiagonalSymmetric {
  std::vector<double> diag;
  std::vector<double> offdiag;

  std::size_t size() const { return diag.size(); }
};

struct ConjugatedModel {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> s;

  std::size_t size() const { return x.size(); }
};

/// Thrown when 1 + y/s <= 0, which a chi-squared sample cannot produce.
class InvalidSample : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline TridiagonalSymmetric sample_ensemble(const EnsembleParams& params, mc::RngStream& rng) {
  params.validate();
  const std::size_t n = params.n;
  const double inv_sqrt_beta = 1.0 / std::sqrt(params.beta);
  TridiagonalSymmetric m;
  m.diag.resize(n);
  m.offdiag.resize(n - 1);
  for (std::size_t j = 0; j < n; ++j) {
    m.diag[j] = std::sqrt(2.0) * rng.normal() * inv_sqrt_beta;
    if (j + 1 < n) {
      const double dof = static_cast<double>(n - 1 - j) * params.beta;
      m.offdiag[j] = sample_chi(rng, dof) * inv_sqrt_beta;
    }
  }
  return m;
}

inline double scale_s(std::size_t n, std::size_t l) {
  return std::sqrt(static_cast<double>(n) - static_cast<double>(l) - 0.5);
}

/// Conjugated form of a sampled matrix (same eigenvalues).
inline ConjugatedModel conjugate(const TridiagonalSymmetric& m) {
  const std::size_t n = m.size();
  ConjugatedModel c;
  c.x = m.diag;
  c.y.assign(n, 0.0);
  c.s.resize(n);
  for (std::size_t l = 0; l < n; ++l) c.s[l] = scale_s(n, l);
  for (std::size_t l = 0; l + 1 < n; ++l) {
    c.y[l] = m.offdiag[l] * m.offdiag[l] / c.s[l + 1] - c.s[l];
  }
  return c;
}

inline ConjugatedModel sample_conjugated(const EnsembleParams& params, mc::RngStream& rng) {
  return conjugate(sample_ensemble(params, rng));
}

/// Symmetric tridiagonal matrix with the model's spectrum.
inline TridiagonalSymmetric symmetrize(const ConjugatedModel& c) {
  const std::size_t n = c.size();
  TridiagonalSymmetric m;
  m.diag = c.x;
  m.offdiag.resize(n > 0 ? n - 1 : 0);
  for (std::size_t l = 0; l + 1 < n; ++l) m.offdiag[l] = std::sqrt((c.s[l] + c.y[l]) * c.s[l + 1]);
  return m;
}

/// Gershgorin enclosure [lower, upper] of the spectrum.
inline std::pair<double, double> gershgorin_bounds(const TridiagonalSymmetric& m) {
  const std::size_t n = m.size();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    if (i > 0) r += std::abs(m.offdiag[i - 1]);
    if (i + 1 < n) r += std::abs(m.offdiag[i]);
    lo = std::min(lo, m.diag[i] - r);
    hi = std::max(hi, m.diag[i] + r);
  }
  return {lo, hi};
}

inline std::pair<double, double> gershgorin_bounds(const ConjugatedModel& c) {
  return gershgorin_bounds(symmetrize(c));
}

/// Number of eigenvalues strictly below `lambda` (Sturm sequence / LDL^T pivots).
inline std::size_t sturm_count_below(const TridiagonalSymmetric& m, double lambda) {
  const std::size_t n = m.size();
  double max_e2 = 1.0;
  for (double e : m.offdiag) max_e2 = std::max(max_e2, e * e);
  const double pivmin = DBL_MIN * max_e2;
  // A zero pivot becomes +pivmin: the sequence is then evaluated just below
  // `lambda`, which keeps the count strict.
  std::size_t count = 0;
  double pivot = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    pivot = (m.diag[i] - lambda) - (i > 0 ? m.offdiag[i - 1] * m.offdiag[i - 1] / pivot : 0.0);
    if (std::abs(pivot) < pivmin) pivot = pivmin;
    if (pivot < 0.0) ++count;
  }
  return count;
}


// ---------------------------------------------------------------------------
// Lifted phase recursions

enum class PhaseKind { wild_forward, target_backward };

struct PhaseTrajectory {
  double spectral = 0.0;        ///< Lambda
  std::vector<double> phases;   ///< indexed by l = 0..n
  PhaseKind kind = PhaseKind::wild_forward;
};

namespace detail {

/// Scale 1/(1 + y/s) of the sampled step; nonpositive denominators are invalid.
inline double step_scale(const ConjugatedModel& m, std::size_t l) {
  const double denom = 1.0 + m.y[l] / m.s[l];
  if (!(denom > 0.0)) {
    throw InvalidSample("conjugated model: 1 + Y/s <= 0 at l = " + std::to_string(l));
  }
  return 1.0 / denom;
}

inline double step_shift(const ConjugatedModel& m, std::size_t l, double lambda) {
  return (lambda - m.x[l]) / m.s[l];
}

}  // namespace detail

/// Forward lifted phase: phases[0] = pi, then per step the rotation Q(pi)
/// followed by the affine map A(c_l, (Lambda - X_l)/s_l), c_l = 1/(1 + Y_l/s_l).
/// e^{i phases[l]} is the Cayley image of r_l.
inline PhaseTrajectory wild_phase_forward(const ConjugatedModel& m, double lambda) {
  const std::size_t n = m.size();
  PhaseTrajectory out;
  out.spectral = lambda;
  out.kind = PhaseKind::wild_forward;
  out.phases.resize(n + 1);
  double phi = kPi;
  out.phases[0] = phi;
  for (std::size_t l = 0; l < n; ++l) {
    phi = hyperbolic::lifted_apply_rotation(kPi, phi);
    phi = hyperbolic::lifted_apply_affine(detail::step_scale(m, l), detail::step_shift(m, l, lambda), phi);
    out.phases[l + 1] = phi;
  }
  return out;
}

/// Final forward phase only.
inline double wild_phase_final(const ConjugatedModel& m, double lambda) {
  double phi = kPi;
  for (std::size_t l = 0; l < m.size(); ++l) {
    phi = hyperbolic::lifted_apply_affine(detail::step_scale(m, l), detail::step_shift(m, l, lambda), phi + kPi);
  }
  return phi;
}

/// Backward lifted phase from 0 at l = n, applying the inverse steps
/// R_{n-1}^{-1}, ..., R_l^{-1}; each inverse is A(1/c, -b c) followed by Q(-pi).
inline PhaseTrajectory target_phase_trajectory(const ConjugatedModel& m, double lambda) {
  const std::size_t n = m.size();
  PhaseTrajectory out;
  out.spectral = lambda;
  out.kind = PhaseKind::target_backward;
  out.phases.resize(n + 1);
  double phi = 0.0;
  out.phases[n] = phi;
  for (std::size_t j = n; j-- > 0;) {
    const double c = detail::step_scale(m, j);
    const double b = detail::step_shift(m, j, lambda);
    phi = hyperbolic::lifted_apply_affine(1.0 / c, -b * c, phi);
    phi = hyperbolic::lifted_apply_rotation(-kPi, phi);
    out.phases[j] = phi;
  }
  return out;
}

inline double target_phase_backward(const ConjugatedModel& m, double lambda, std::size_t ell) {
  const std::size_t n = m.size();
  if (ell > n) throw std::out_of_range("target_phase_backward: ell > n");
  double phi = 0.0;
  for (std::size_t j = n; j-- > ell;) {
    const double c = detail::step_scale(m, j);
    const double b = detail::step_shift(m, j, lambda);
    phi = hyperbolic::lifted_apply_affine(1.0 / c, -b * c, phi) - kPi;
  }
  return phi;
}

/// Number of eigenvalues strictly below `lambda`, from the winding of the
/// final forward phase relative to a baseline below the spectrum.
inline std::size_t phase_count_below(const ConjugatedModel& m, double lambda) {
  if (m.size() == 0) return 0;
  const double low = std::min(gershgorin_bounds(m).first - 1.0, lambda);
  if (low == lambda) return 0;
  const double phi_low = wild_phase_final(m, low);
  const double phi = wild_phase_final(m, lambda);
  // #{k : phi_low < 2 pi k < phi}
  const double k_max = std::ceil(phi / kTwoPi) - 1.0;
  const double k_min = std::floor(phi_low / kTwoPi) + 1.0;
  const double count = k_max - k_min + 1.0;
  return count > 0.0 ? static_cast<std::size_t>(count) : 0;
}

/// Number of eigenvalues <= lambda.
inline std::size_t sturm_count_at_most(const TridiagonalSymmetric& m, double lambda) {
  return sturm_count_below(m, std::nextafter(lambda, std::numeric_limits<double>::infinity()));
}

inline double default_bisection_tol(const TridiagonalSymmetric& m) {
  const auto [lo, hi] = gershgorin_bounds(m);
  const double radius = 0.5 * (hi - lo);
  return 1e-10 * std::max(1.0, std::abs(radius));
}

/// Eigenvalues in [center - halfwidth, center + halfwidth] by Sturm bisection.
/// Each returned value is the midpoint of a bracket of width <= tol.
inline std::vector<double> eigenvalues_in_window(const TridiagonalSymmetric& m, double center, double halfwidth,
                                                 double tol) {
  if (!(halfwidth > 0.0)) throw std::invalid_argument("eigenvalues_in_window: halfwidth must be positive");
  if (!(tol > 0.0)) throw std::invalid_argument("eigenvalues_in_window: tol must be positive");
  const double lo = center - halfwidth;
  const double hi = std::nextafter(center + halfwidth, std::numeric_limits<double>::infinity());
  const std::size_t first = sturm_count_below(m, lo);
  const std::size_t last = sturm_count_below(m, hi);
  std::vector<double> out;
  out.reserve(last > first ? last - first : 0);
  for (std::size_t k = first; k < last; ++k) {
    // invariant: count_below(left) <= k < count_below(right)
    double left = out.empty() ? lo : std::max(lo, out.back() - tol);
    if (sturm_count_below(m, left) > k) left = lo;
    double right = hi;
    while (right - left > tol) {
      const double mid = 0.5 * (left + right);
      if (mid <= left || mid >= right) break;
      if (sturm_count_below(m, mid) > k) {
        right = mid;
      } else {
        left = mid;
      }
    }
    out.push_back(0.5 * (left + right));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scaled counting function

struct ScalingWindow {
  double mu = 0.0;
  double n0 = 0.0;
  double factor = 0.0;  ///< 2 sqrt(n0)

  static ScalingWindow from(const EnsembleParams& p) {
    return {p.mu, p.n0(), 2.0 * std::sqrt(p.n0())};
  }
  double spectral(double lambda) const { return mu + lambda / factor; }
};

struct CountingSample {
  std::vector<double> lambdas;
  std::vector<long> counts;
  ScalingWindow scaling;
};

/// N(lambda) = #eigenvalues in (Lambda(0), Lambda(lambda)], negated for
/// lambda < 0, on a sorted grid.
inline CountingSample scaled_counts(const TridiagonalSymmetric& m, const EnsembleParams& params,
                                    std::span<const double> lambdas) {
  params.validate_bulk();
  if (!std::is_sorted(lambdas.begin(), lambdas.end())) {
    throw std::invalid_argument("scaled_counts: lambda grid must be sorted");
  }
  CountingSample out;
  out.scaling = ScalingWindow::from(params);
  out.lambdas.assign(lambdas.begin(), lambdas.end());
  out.counts.reserve(lambdas.size());
  const long base = static_cast<long>(sturm_count_at_most(m, out.scaling.spectral(0.0)));
  for (double lam : lambdas) {
    const long c = static_cast<long>(sturm_count_at_most(m, out.scaling.spectral(lam)));
    out.counts.push_back(c - base);
  }
  return out;
}

inline CountingSample scaled_counting_sample(const EnsembleParams& params, mc::RngStream& rng,
                                             std::span<const double> lambdas) {
  params.validate_bulk();
  return scaled_counts(sample_ensemble(params, rng), params, lambdas);
}

// ---------------------------------------------------------------------------
// Regularized and relative phases

/// Unit-modulus root of the fixed-point quadratic in the closed upper half plane.
inline complex rho_ell(std::size_t ell, double n0, double mu) {
  const double l = static_cast<double>(ell);
  if (!(l <= n0)) throw std::domain_error("rho_ell: ell must not exceed n0");
  const double s2 = mu * mu / 4.0 + n0 - l;
  if (!(s2 > 0.0)) throw std::domain_error("rho_ell: degenerate scale (mu = 0 and ell = n0)");
  const double s = std::sqrt(s2);
  return {mu / (2.0 * s), std::sqrt(n0 - l) / s};
}

/// Last index of a regularized run: the largest integer strictly below n0.
/// (At ell = n0 the conjugating map T_ell degenerates.)
inline std::size_t regularized_last_index(double n0) {
  if (!(n0 > 0.0)) throw std::domain_error("regularized run needs n0 > 0");
  return static_cast<std::size_t>(std::ceil(n0) - 1.0);
}

struct RegularizedPhaseState {
  std::size_t ell = 0;
  complex rho;
  complex eta;       ///< rho_0^2 ... rho_ell^2
  double phi = 0.0;  ///< phi_{ell, lambda}
  double phi0 = 0.0; ///< phi_{ell, 0}
  double alpha = 0.0;
  double rotation_lift = 0.0;  ///< sum_{j < ell} (2 Arg rho_j - 2 pi), the lift of Q_{ell-1}
};

namespace detail {

/// T_ell = A(1/Im rho, -Re rho).
inline hyperbolic::MobiusMap regularizing_map(complex rho) {
  return hyperbolic::MobiusMap::affine(1.0 / rho.imag(), -rho.real());
}

/// S_{ell,lambda} = T_ell^{-1} L_{ell,lambda} W_ell T_{ell+1} (applied in that order).
inline hyperbolic::MobiusMap regularized_step_map(const ConjugatedModel& m, double n0, std::size_t l,
                                                  complex rho_l, complex rho_next, double lambda) {
  using hyperbolic::MobiusMap;
  const MobiusMap t_inv = regularizing_map(rho_l).inverse();
  const MobiusMap lmap = MobiusMap::affine(1.0, lambda / (2.0 * m.s[l] * std::sqrt(n0)));
  const MobiusMap w = MobiusMap::affine(step_scale(m, l), -m.x[l] / m.s[l]);
  return t_inv * lmap * w * regularizing_map(rho_next);
}

}  // namespace detail

/// Regularized phases phi_{ell,lambda}, phi_{ell,0} and alpha for ell = 0..last.
/// `last` defaults to the largest integer below n0; larger values are rejected.
inline std::vector<RegularizedPhaseState> regularized_phase_run(const ConjugatedModel& m,
                                                                const EnsembleParams& params, double lambda,
                                                                std::size_t last = static_cast<std::size_t>(-1)) {
  params.validate_bulk();
  if (!std::isfinite(lambda)) throw std::invalid_argument("regularized_phase_run: lambda must be finite");
  if (m.size() != params.n) throw std::invalid_argument("regularized_phase_run: model size differs from n");
  const double n0 = params.n0();
  const std::size_t max_last = regularized_last_index(n0);
  if (last == static_cast<std::size_t>(-1)) last = max_last;
  if (last > max_last) throw std::out_of_range("regularized_phase_run: ell beyond the rotation regime");

  std::vector<RegularizedPhaseState> out;
  out.reserve(last + 1);
  RegularizedPhaseState st;
  st.ell = 0;
  st.rho = rho_ell(0, n0, params.mu);
  st.eta = st.rho * st.rho;
  st.phi = kPi;
  st.phi0 = kPi;
  st.alpha = 0.0;
  st.rotation_lift = 0.0;
  out.push_back(st);

  const hyperbolic::DiskPoint minus_one(complex{-1.0, 0.0});
  for (std::size_t l = 0; l < last; ++l) {
    const complex rho_next = rho_ell(l + 1, n0, params.mu);
    const auto s_lam = detail::regularized_step_map(m, n0, l, st.rho, rho_next, lambda);
    const auto s_zero = detail::regularized_step_map(m, n0, l, st.rho, rho_next, 0.0);
    const complex eta_bar = std::conj(st.eta);
    const double d_lam =
        hyperbolic::ash(s_lam, minus_one, hyperbolic::DiskPoint(std::polar(1.0, st.phi) * eta_bar));
    const double d_zero =
        hyperbolic::ash(s_zero, minus_one, hyperbolic::DiskPoint(std::polar(1.0, st.phi0) * eta_bar));

    RegularizedPhaseState next;
    next.ell = l + 1;
    next.rho = rho_next;
    next.eta = st.eta * rho_next * rho_next;
    next.eta /= std::abs(next.eta);
    next.phi = st.phi + d_lam;
    next.phi0 = st.phi0 + d_zero;
    next.alpha = next.phi - next.phi0;
    next.rotation_lift = st.rotation_lift + 2.0 * std::arg(st.rho) - kTwoPi;
    out.push_back(next);
    st = next;
  }
  return out;
}

/// Wild phase recovered from a regularized one: phi_hat = (phi - Theta_{ell-1}) * T_ell^{-1}.
inline double wild_from_regularized(const RegularizedPhaseState& st, double phi) {
  const auto t_inv = detail::regularizing_map(st.rho).inverse();
  return hyperbolic::lifted_apply_affine(t_inv, phi - st.rotation_lift);
}

/// Regularized phase from a wild one: phi = phi_hat * T_ell + Theta_{ell-1}.
inline double regularized_from_wild(const RegularizedPhaseState& st, double phi_hat) {
  return hyperbolic::lifted_apply_affine(detail::regularizing_map(st.rho), phi_hat) + st.rotation_lift;
}

/// Regularized target phase at the state's index for scaled parameter lambda.
inline double regularized_target_phase(const ConjugatedModel& m, const EnsembleParams& params,
                                       const RegularizedPhaseState& st, double lambda) {
  const double spectral = ScalingWindow::from(params).spectral(lambda);
  return regularized_from_wild(st, target_phase_backward(m, spectral, st.ell));
}

/// 2 pi floor: 2 pi * floor(x / 2 pi).
inline double floor_2pi(double x) { return kTwoPi * std::floor(x / kTwoPi); }

/// True iff floor_2pi(alpha_ell) is nondecreasing in ell.
inline bool valve_check(std::span<const RegularizedPhaseState> states) {
  for (std::size_t i = 1; i < states.size(); ++i) {
    if (floor_2pi(states[i].alpha) < floor_2pi(states[i - 1].alpha)) return false;
  }
  return true;
}

}  // namespace sinebeta::ensemble
