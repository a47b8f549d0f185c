#pragma once

// Hyperbolic plane geometry used by the phase recursions.
//
// Points of the closed upper half-plane are kept in homogeneous
// coordinates so that the boundary point at infinity is an ordinary value.
// Mobius maps are stored as real 2x2 matrices with unit determinant.
//
// Composition convention: `t1 * t2` means "apply t1 first, then t2",
// matching the right action z.T.  Every lifted (universal cover) action in
// the project is built from the two generators below: the rotation shift
// `lifted_apply_rotation` and the affine lift `lifted_apply_affine`, which
// fixes the angle pi.

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sinebeta::hyperbolic {

using complex = std::complex<double>;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Distance from the unit circle below which a disk point counts as boundary.
inline constexpr double kBoundaryTol = 1e-9;

/// Point of the closed upper half-plane, or infinity.
///
/// Stored as a homogeneous pair (num : den).  The point is infinite exactly
/// when den == 0; no IEEE infinity ever enters the arithmetic.
class HalfPlanePoint {
 public:
  HalfPlanePoint() = default;

  static HalfPlanePoint finite(complex z) { return {z, complex{1.0, 0.0}}; }
  static HalfPlanePoint finite(double x) { return finite(complex{x, 0.0}); }
  static HalfPlanePoint infinity() { return {complex{1.0, 0.0}, complex{0.0, 0.0}}; }

  /// Homogeneous constructor; (0 : 0) is rejected.
  static HalfPlanePoint homogeneous(complex num, complex den) {
    if (num == complex{} && den == complex{}) {
      throw std::invalid_argument("HalfPlanePoint: (0 : 0) is not a point");
    }
    return normalized(num, den);
  }

  bool is_infinite() const { return den_ == complex{}; }

  /// Affine value; only meaningful when !is_infinite().
  complex value() const {
    if (is_infinite()) {
      throw std::domain_error("HalfPlanePoint: value() of the point at infinity");
    }
    return num_ / den_;
  }

  complex num() const { return num_; }
  complex den() const { return den_; }

  /// Projective closeness: compares the points as directions in C^2.
  bool approx_equal(const HalfPlanePoint& other, double tol) const {
    const complex cross = num_ * other.den_ - den_ * other.num_;
    return std::abs(cross) <= tol * norm2() * other.norm2();
  }

 private:
  HalfPlanePoint(complex num, complex den) : num_(num), den_(den) {}

  static HalfPlanePoint normalized(complex num, complex den) {
    const double scale = std::max(std::abs(num), std::abs(den));
    return {num / scale, den / scale};
  }

  double norm2() const { return std::sqrt(std::norm(num_) + std::norm(den_)); }

  complex num_{0.0, 0.0};
  complex den_{1.0, 0.0};
};

/// Point of the closed unit disk.
class DiskPoint {
 public:
  DiskPoint() = default;

  explicit DiskPoint(complex w) : w_(w) {
    if (!(std::abs(w) <= 1.0 + kBoundaryTol)) {
      throw std::invalid_argument("DiskPoint: |w| = " + std::to_string(std::abs(w)) +
                                  " lies outside the closed unit disk");
    }
  }
  DiskPoint(double re, double im) : DiskPoint(complex{re, im}) {}

  static DiskPoint from_angle(double theta) { return DiskPoint(std::polar(1.0, theta)); }

  complex value() const { return w_; }
  double re() const { return w_.real(); }
  double im() const { return w_.imag(); }
  double abs() const { return std::abs(w_); }

  bool on_boundary() const { return std::abs(std::abs(w_) - 1.0) <= kBoundaryTol; }
  bool interior() const { return std::abs(w_) < 1.0 - kBoundaryTol; }

 private:
  complex w_{0.0, 0.0};
};

/// Cayley map z -> (i - z)/(i + z) from the closed half-plane onto the closed disk.
inline DiskPoint cayley(const HalfPlanePoint& z) {
  const complex i{0.0, 1.0};
  if (z.is_infinite()) return DiskPoint(complex{-1.0, 0.0});
  // Homogeneous form: (i q - p)/(i q + p).
  const complex p = z.num();
  const complex q = z.den();
  return DiskPoint((i * q - p) / (i * q + p));
}

inline DiskPoint cayley(complex z) { return cayley(HalfPlanePoint::finite(z)); }

/// Inverse Cayley map w -> i(1 - w)/(1 + w); w = -1 maps to infinity.
inline HalfPlanePoint cayley_inverse(const DiskPoint& w) {
  const complex i{0.0, 1.0};
  const complex v = w.value();
  return HalfPlanePoint::homogeneous(i * (1.0 - v), 1.0 + v);
}

/// Orientation-preserving isometry z -> (a z + b)/(c z + d) of the half-plane.
class MobiusMap {
 public:
  /// Identity.
  MobiusMap() = default;

  /// Normalizes to ad - bc = 1; ad - bc <= 0 is rejected.
  MobiusMap(double a, double b, double c, double d) {
    const double det = a * d - b * c;
    if (!(det > 0.0) || !std::isfinite(det)) {
      throw std::invalid_argument("MobiusMap: ad - bc must be positive, got " + std::to_string(det));
    }
    const double s = 1.0 / std::sqrt(det);
    a_ = a * s;
    b_ = b * s;
    c_ = c * s;
    d_ = d * s;
  }

  static MobiusMap identity() { return {}; }

  /// Affine map A(a, b): z -> a (z + b), a > 0.  Fixes infinity (and -1 on the disk).
  static MobiusMap affine(double a, double b) {
    if (!(a > 0.0)) throw std::invalid_argument("MobiusMap::affine: scale must be positive");
    return MobiusMap(a, a * b, 0.0, 1.0);
  }

  /// Rotation of the disk about 0 by angle alpha, written as a half-plane map about i.
  static MobiusMap rotation(double alpha) {
    const double c = std::cos(0.5 * alpha);
    const double s = std::sin(0.5 * alpha);
    return MobiusMap(c, s, -s, c);
  }

  double a() const { return a_; }
  double b() const { return b_; }
  double c() const { return c_; }
  double d() const { return d_; }

  MobiusMap inverse() const { return MobiusMap(d_, -b_, -c_, a_); }

  /// Composition: (*this) applied first, then `next`.
  MobiusMap operator*(const MobiusMap& next) const {
    // Matrix of "this then next" is M_next * M_this.
    return MobiusMap(next.a_ * a_ + next.b_ * c_, next.a_ * b_ + next.b_ * d_,
                     next.c_ * a_ + next.d_ * c_, next.c_ * b_ + next.d_ * d_);
  }

  /// Projective evaluation on the closed half-plane.
  HalfPlanePoint apply(const HalfPlanePoint& z) const {
    const complex p = z.num();
    const complex q = z.den();
    return HalfPlanePoint::homogeneous(a_ * p + b_ * q, c_ * p + d_ * q);
  }

  /// Action on the closed disk, conjugated through the Cayley map.
  DiskPoint apply_disk(const DiskPoint& w) const {
    const complex v = w.value();
    const complex i{0.0, 1.0};
    // Half-plane homogeneous coordinates of cayley_inverse(w), then apply, then cayley.
    const complex p = i * (1.0 - v);
    const complex q = 1.0 + v;
    const complex p2 = a_ * p + b_ * q;
    const complex q2 = c_ * p + d_ * q;
    const complex num = i * q2 - p2;
    const complex den = i * q2 + p2;
    complex out = num / den;
    // Boundary stays on the boundary up to rounding.
    if (w.on_boundary()) out /= std::abs(out);
    return DiskPoint(out);
  }

  /// Disk preimage of the origin, sigma = 0 o T^{-1}.
  complex preimage_of_origin() const {
    const complex i{0.0, 1.0};
    const HalfPlanePoint z = inverse().apply(HalfPlanePoint::finite(i));
    return cayley(z).value();
  }

 private:
  double a_ = 1.0;
  double b_ = 0.0;
  double c_ = 0.0;
  double d_ = 1.0;
};

namespace detail {

inline void require_boundary(const DiskPoint& p, const char* what) {
  if (!p.on_boundary()) {
    throw std::invalid_argument(std::string(what) + ": expected a boundary point, |w| = " +
                                std::to_string(p.abs()));
  }
}

inline double ash_from_sigma(complex sigma, complex v, complex w) {
  // Both factors have positive real part when |sigma| < 1, so the difference of
  // principal arguments lies in (-pi, pi) and equals Arg of the ratio.
  return 2.0 * (std::arg(1.0 - sigma * std::conj(w)) - std::arg(1.0 - sigma * std::conj(v)));
}

}  // namespace detail

/// Angular shift: change of the signed boundary angle from v to w under T.
///
/// Uses the closed form 2 Arg((1 - sigma conj(w))/(1 - sigma conj(v))) with
/// sigma = 0 o T^{-1}.  The result lies in (-2 pi, 2 pi).
inline double ash(const MobiusMap& t, const DiskPoint& v, const DiskPoint& w) {
  detail::require_boundary(v, "ash");
  detail::require_boundary(w, "ash");
  const complex sigma = t.preimage_of_origin();
  if (!(std::abs(sigma) < 1.0)) {
    throw std::domain_error("ash: degenerate map, |0 o T^-1| >= 1");
  }
  return detail::ash_from_sigma(sigma, v.value(), w.value());
}

/// Second closed form 2 Arg((w - sigma) v / (w (v - sigma))), principal branch.
inline double ash_alternate(const MobiusMap& t, const DiskPoint& v, const DiskPoint& w) {
  detail::require_boundary(v, "ash_alternate");
  detail::require_boundary(w, "ash_alternate");
  const complex sigma = t.preimage_of_origin();
  if (!(std::abs(sigma) < 1.0)) {
    throw std::domain_error("ash_alternate: degenerate map, |0 o T^-1| >= 1");
  }
  const complex vv = v.value();
  const complex ww = w.value();
  return 2.0 * std::arg(((ww - sigma) * vv) / (ww * (vv - sigma)));
}

/// Truncated expansion of ash(T, v, w) in the displacement z with (i + z).T = i.
///
/// order 1 -> 0, order 2 -> -Re[(conj w - conj v) z],
/// order 3 -> Re[(conj w - conj v)(-z - i (2 + conj v + conj w) z^2 / 4)].
/// The error against ash is O(|w - v| |z|^order).
inline double ash_expansion(complex z, const DiskPoint& v, const DiskPoint& w, int order) {
  const complex vb = std::conj(v.value());
  const complex wb = std::conj(w.value());
  const complex i{0.0, 1.0};
  switch (order) {
    case 1:
      return 0.0;
    case 2:
      return -std::real((wb - vb) * z);
    case 3:
      return std::real((wb - vb) * (-z - i * (2.0 + vb + wb) * z * z / 4.0));
    default:
      throw std::invalid_argument("ash_expansion: order must be 1, 2 or 3");
  }
}

/// Displacement z with (i + z).T = i, i.e. z = i.T^{-1} - i.
inline complex displacement_to_i(const MobiusMap& t) {
  const complex i{0.0, 1.0};
  return t.inverse().apply(HalfPlanePoint::finite(i)).value() - i;
}

/// Lifted action of the affine map A(a, b) on the universal cover, fixing pi.
///
/// phi -> phi + ash(A(a, b), -1, e^{i phi}).  Strictly increasing and
/// quasiperiodic: f(phi + 2 pi) = f(phi) + 2 pi.
inline double lifted_apply_affine(double a, double b, double phi) {
  if (!(a > 0.0)) throw std::invalid_argument("lifted_apply_affine: scale must be positive");
  // sigma = cayley(i.A^{-1}) with i.A^{-1} = i/a - b.
  const complex i{0.0, 1.0};
  const complex zpre{-b, 1.0 / a};
  const complex sigma = (i - zpre) / (i + zpre);
  const complex w = std::polar(1.0, phi);
  return phi + detail::ash_from_sigma(sigma, complex{-1.0, 0.0}, w);
}

/// Same lift for an arbitrary affine MobiusMap (c == 0).
inline double lifted_apply_affine(const MobiusMap& t, double phi) {
  if (t.c() != 0.0) throw std::invalid_argument("lifted_apply_affine: map does not fix infinity");
  // z -> (a z + b)/d = (a/d)(z + b/a).
  const double scale = t.a() / t.d();
  return lifted_apply_affine(scale, t.b() / t.a(), phi);
}

/// Lifted rotation: phi -> phi + alpha.
inline double lifted_apply_rotation(double alpha, double phi) { return phi + alpha; }

/// Mobius automorphism of the disk taking w to 0 and z0 to 1:
/// S(w, z) / S(w, z0) with S(w, z) = (z - w)/(1 - conj(w) z).
inline complex disk_transport(complex w, complex z, complex z0 = complex{-1.0, 0.0}) {
  if (!(std::abs(w) < 1.0)) throw std::invalid_argument("disk_transport: w must be interior");
  const auto s = [w](complex x) { return (x - w) / (1.0 - std::conj(w) * x); };
  return s(z) / s(z0);
}

inline DiskPoint disk_transport(const DiskPoint& w, const DiskPoint& z,
                                const DiskPoint& z0 = DiskPoint(complex{-1.0, 0.0})) {
  complex out = disk_transport(w.value(), z.value(), z0.value());
  if (z.on_boundary()) out /= std::abs(out);
  return DiskPoint(out);
}

/// Principal argument in [0, 2 pi).
inline double arg_0_2pi(complex z) {
  double a = std::arg(z);
  if (a < 0.0) a += kTwoPi;
  if (a >= kTwoPi) a -= kTwoPi;
  return a;
}

}  // namespace sinebeta::hyperbolic
