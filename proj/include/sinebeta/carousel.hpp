#pragma once

// Integrators for the limiting objects: the coupled stochastic sine equation,
// its single-lambda marginal, the Brownian carousel, and the time-changed
// phase SDEs on [0, 1).
//
// Angles that converge to 2 pi Z are stored as 2 pi k + x with x in [-pi, pi).
// The diffusion coefficient then vanishes exactly on the lattice and keeps
// full relative precision as x -> 0.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sinebeta/hyperbolic.hpp"
#include "sinebeta/rng.hpp"

namespace sinebeta::carousel {

using hyperbolic::complex;
using hyperbolic::kPi;
using hyperbolic::kTwoPi;

// ---------------------------------------------------------------------------
// Intensity

/// Rotation-speed profile f(t).  Exponential: f(t) = (beta/4) e^{-beta t/4}.
/// Tabulated: piecewise linear on a grid starting at 0, zero beyond it.
class IntensitySpec {
 public:
  enum class Kind { exponential, tabulated };

  static IntensitySpec exponential(double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("IntensitySpec: beta must be > 0");
    IntensitySpec s;
    s.kind_ = Kind::exponential;
    s.beta_ = beta;
    return s;
  }

  static IntensitySpec tabulated(std::vector<double> grid, std::vector<double> values) {
    if (grid.size() < 2 || grid.size() != values.size()) {
      throw std::invalid_argument("IntensitySpec: tabulated grid needs >= 2 points and matching values");
    }
    if (grid.front() != 0.0) throw std::invalid_argument("IntensitySpec: tabulated grid must start at 0");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!std::isfinite(grid[i]) || !std::isfinite(values[i]) || values[i] < 0.0) {
        throw std::invalid_argument("IntensitySpec: tabulated values must be finite and nonnegative");
      }
      if (i > 0 && !(grid[i] > grid[i - 1])) throw std::invalid_argument("IntensitySpec: grid must increase");
    }
    IntensitySpec s;
    s.kind_ = Kind::tabulated;
    s.grid_ = std::move(grid);
    s.values_ = std::move(values);
    s.tails_.assign(s.grid_.size(), 0.0);
    for (std::size_t i = s.grid_.size() - 1; i-- > 0;) {
      s.tails_[i] = s.tails_[i + 1] + 0.5 * (s.values_[i] + s.values_[i + 1]) * (s.grid_[i + 1] - s.grid_[i]);
    }
    return s;
  }

  Kind kind() const { return kind_; }
  double beta() const { return beta_; }

  double operator()(double t) const {
    if (kind_ == Kind::exponential) return 0.25 * beta_ * std::exp(-0.25 * beta_ * t);
    if (t >= grid_.back()) return 0.0;
    const std::size_t i = segment(t);
    const double w = (t - grid_[i]) / (grid_[i + 1] - grid_[i]);
    return values_[i] + w * (values_[i + 1] - values_[i]);
  }

  /// Remaining mass: integral of f over [t, infinity).
  double tail(double t) const {
    if (kind_ == Kind::exponential) return std::exp(-0.25 * beta_ * t);
    if (t >= grid_.back()) return 0.0;
    const std::size_t i = segment(t);
    const double ft = (*this)(t);
    return tails_[i + 1] + 0.5 * (ft + values_[i + 1]) * (grid_[i + 1] - t);
  }

  double l1() const { return kind_ == Kind::exponential ? 1.0 : tails_.front(); }

  double l2_squared() const {
    if (kind_ == Kind::exponential) return beta_ / 8.0;
    // exact for piecewise linear f
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < grid_.size(); ++i) {
      const double a = values_[i];
      const double b = values_[i + 1];
      acc += (grid_[i + 1] - grid_[i]) * (a * a + a * b + b * b) / 3.0;
    }
    return acc;
  }

  /// sup f(t)(1 + t^2); finite for every admissible profile.
  double decay_constant() const {
    if (kind_ == Kind::exponential) {
      // maximize (1 + t^2) e^{-beta t/4} on t >= 0
      const double c = 0.25 * beta_;
      double best = 1.0;
      const double disc = 1.0 - c * c;
      if (disc >= 0.0) {
        const double t = (1.0 + std::sqrt(disc)) / c;
        best = std::max(best, (1.0 + t * t) * std::exp(-c * t));
      }
      return 0.25 * beta_ * best;
    }
    double best = 0.0;
    for (std::size_t i = 0; i < grid_.size(); ++i) best = std::max(best, values_[i] * (1.0 + grid_[i] * grid_[i]));
    return best;
  }

  double total_variation() const {
    if (kind_ == Kind::exponential) return 0.25 * beta_;
    double tv = values_.back();  // drop to zero after the grid
    for (std::size_t i = 0; i + 1 < values_.size(); ++i) tv += std::abs(values_[i + 1] - values_[i]);
    return tv;
  }

  /// Suggested horizon scale 4/beta (exponential) or the grid end.
  double time_scale() const { return kind_ == Kind::exponential ? 4.0 / beta_ : grid_.back(); }

 private:
  std::size_t segment(double t) const {
    const auto it = std::upper_bound(grid_.begin(), grid_.end(), t);
    std::size_t i = static_cast<std::size_t>(it - grid_.begin());
    return i == 0 ? 0 : std::min(i - 1, grid_.size() - 2);
  }

  Kind kind_ = Kind::exponential;
  double beta_ = 2.0;
  std::vector<double> grid_;
  std::vector<double> values_;
  std::vector<double> tails_;
};

// ---------------------------------------------------------------------------
// Solver configuration

struct SolverConfig {
  double dt_max = 1e-3;
  double drift_step_scale = 0.05;  ///< dt <= scale / (1 + lambda_max f(t))
  double tail_tol = 1e-4;          ///< stop once lambda_max * int_t^inf f < tail_tol
  double angle_tol = 0.05;         ///< delta: distance to 2 pi Z required at stop
  double t_hard_max = 0.0;         ///< 0 selects 40 (4/beta)(1 + log(1 + lambda_max))
  double below_margin = 1e-3;      ///< "below" needs alpha < level - margin at window start
  std::size_t approach_min_steps = 100;
  int max_split_depth = 30;

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string("SolverConfig: ") + name + " must be positive");
    };
    positive(dt_max, "dt_max");
    positive(drift_step_scale, "drift_step_scale");
    positive(tail_tol, "tail_tol");
    positive(angle_tol, "angle_tol");
    positive(below_margin, "below_margin");
    if (t_hard_max < 0.0 || !std::isfinite(t_hard_max)) throw std::invalid_argument("SolverConfig: t_hard_max must be >= 0");
    if (angle_tol >= kPi / 2) throw std::invalid_argument("SolverConfig: angle_tol must be below pi/2");
    if (!(tail_tol < 0.1 * kTwoPi * angle_tol)) {
      throw std::invalid_argument("SolverConfig: tail_tol must be small against the angle tolerance");
    }
    if (approach_min_steps < 1) throw std::invalid_argument("SolverConfig: approach_min_steps must be >= 1");
  }

  double hard_max(const IntensitySpec& spec, double lambda_max) const {
    if (t_hard_max > 0.0) return t_hard_max;
    return 40.0 * spec.time_scale() * (1.0 + std::log1p(std::abs(lambda_max)));
  }

  double step(double f_value, double lambda_max) const {
    return std::min(dt_max, drift_step_scale / (1.0 + std::abs(lambda_max) * f_value));
  }
};

// ---------------------------------------------------------------------------
// Lattice angles

/// alpha = 2 pi k + x with x in [-pi, pi).
struct LatticeAngle {
  long k = 0;
  double x = 0.0;

  double value() const { return kTwoPi * static_cast<double>(k) + x; }
  double distance_to_lattice() const { return std::abs(x); }

  void add(double delta) {
    x += delta;
    normalize();
  }

  void normalize() {
    if (x >= -kPi && x < kPi) return;
    const double shift = std::floor((x + kPi) / kTwoPi);
    k += static_cast<long>(shift);
    x -= kTwoPi * shift;
    if (x >= kPi) {
      x -= kTwoPi;
      ++k;
    } else if (x < -kPi) {
      x += kTwoPi;
      --k;
    }
  }

  static LatticeAngle from(double alpha) {
    LatticeAngle a;
    a.x = alpha;
    a.normalize();
    return a;
  }

  friend bool operator<(const LatticeAngle& a, const LatticeAngle& b) {
    return a.k < b.k || (a.k == b.k && a.x < b.x);
  }
};

// ---------------------------------------------------------------------------
// Stochastic sine equation

struct SsePathState {
  double t = 0.0;
  std::vector<double> lambdas;
  std::vector<LatticeAngle> alphas;
  complex last_noise{};
  complex previous_noise{};

  static SsePathState start(std::span<const double> lambdas) {
    SsePathState s;
    s.lambdas.assign(lambdas.begin(), lambdas.end());
    s.alphas.assign(lambdas.size(), LatticeAngle{});
    return s;
  }
};

/// Increment Re((e^{-i alpha} - 1) dZ) for alpha = 2 pi k + x.
inline double sse_noise(double x, complex dz) {
  const double s = std::sin(0.5 * x);
  const double c = std::cos(0.5 * x);
  return -2.0 * s * s * dz.real() + 2.0 * s * c * dz.imag();
}

/// One Euler-Maruyama step of the coupled equation with shared noise dZ
/// (real and imaginary parts each of variance dt).
inline void step_coupled_sse(SsePathState& state, double f_value, double dt, complex dz) {
  for (std::size_t j = 0; j < state.alphas.size(); ++j) {
    LatticeAngle& a = state.alphas[j];
    a.add(state.lambdas[j] * f_value * dt + sse_noise(a.x, dz));
  }
  state.t += dt;
  state.previous_noise = state.last_noise;
  state.last_noise = dz;
}

/// One step of d alpha = lambda f dt + 2 sin(alpha/2) dW.
inline double step_single_sse(double alpha, double lambda, double f_value, double dt, double dw) {
  return alpha + lambda * f_value * dt + 2.0 * std::sin(0.5 * alpha) * dw;
}

inline void step_single_sse(LatticeAngle& alpha, double lambda, double f_value, double dt, double dw) {
  const double sign = (alpha.k % 2 == 0) ? 1.0 : -1.0;
  alpha.add(lambda * f_value * dt + sign * 2.0 * std::sin(0.5 * alpha.x) * dw);
}

// ---------------------------------------------------------------------------
// Approach classification

enum class Approach { above, below, undecided };

inline const char* to_string(Approach a) {
  switch (a) {
    case Approach::above:
      return "above";
    case Approach::below:
      return "below";
    default:
      return "undecided";
  }
}

/// Online classifier.  The window starts at the latest entry into the
/// angle_tol tube around 2 pi Z and runs to the stop time; the level is the
/// lattice point the tube surrounds.
class ApproachTracker {
 public:
  void observe(const LatticeAngle& a, double angle_tol, double below_margin) {
    const bool inside = a.distance_to_lattice() < angle_tol;
    if (inside && !in_tube_) {
      level_ = a.k;
      start_below_ = a.x < -below_margin;
      reached_level_ = false;
      dipped_below_ = false;
      steps_ = 0;
    }
    in_tube_ = inside;
    if (inside) {
      ++steps_;
      if (a.x >= 0.0) {
        reached_level_ = true;
      } else {
        dipped_below_ = true;
      }
    }
  }

  Approach classify(bool converged, std::size_t min_steps) const {
    if (!converged || !in_tube_ || steps_ < min_steps) return Approach::undecided;
    if (!dipped_below_) return Approach::above;
    if (start_below_ && !reached_level_) return Approach::below;
    return Approach::undecided;
  }

  long level() const { return level_; }
  std::size_t window_steps() const { return steps_; }

 private:
  bool in_tube_ = false;
  long level_ = 0;
  bool start_below_ = false;
  bool reached_level_ = false;
  bool dipped_below_ = false;
  std::size_t steps_ = 0;
};

/// Classify a recorded single-lambda path (values of alpha in time order).
inline Approach classify_approach(std::span<const double> path, bool converged, const SolverConfig& config) {
  ApproachTracker tracker;
  for (double v : path) tracker.observe(LatticeAngle::from(v), config.angle_tol, config.below_margin);
  return tracker.classify(converged, config.approach_min_steps);
}

// ---------------------------------------------------------------------------
// Counting results

struct CountResult {
  std::vector<double> lambda_grid;
  std::vector<long> counts;
  std::vector<bool> converged;
  std::vector<Approach> approach;
  double stop_time = 0.0;
  bool clamped = false;
  bool hit_hard_max = false;
  std::size_t steps = 0;
  std::size_t coupling_violations = 0;

  bool all_converged() const { return std::all_of(converged.begin(), converged.end(), [](bool b) { return b; }); }
};

namespace detail {

inline void require_sorted_finite(std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("lambda grid must be nonempty");
  for (double v : grid) {
    if (!std::isfinite(v)) throw std::invalid_argument("lambda grid must be finite");
  }
  if (!std::is_sorted(grid.begin(), grid.end())) throw std::invalid_argument("lambda grid must be sorted");
}

/// Grid with 0 inserted; `index` maps user positions to augmented positions.
inline std::vector<double> augment_with_zero(std::span<const double> grid, std::vector<std::size_t>& index) {
  std::vector<double> out(grid.begin(), grid.end());
  const auto it = std::lower_bound(out.begin(), out.end(), 0.0);
  const bool present = it != out.end() && *it == 0.0;
  const std::size_t zero_pos = static_cast<std::size_t>(it - out.begin());
  if (!present) out.insert(out.begin() + static_cast<std::ptrdiff_t>(zero_pos), 0.0);
  index.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) index[i] = (!present && i >= zero_pos) ? i + 1 : i;
  return out;
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// Split a complex increment over dt into two halves via the Brownian bridge.
inline std::pair<complex, complex> bridge_split(mc::RngStream& rng, complex dz, double dt) {
  const complex mid = 0.5 * dz + rng.complex_normal(0.25 * dt);
  return {mid, dz - mid};
}

inline std::pair<double, double> bridge_split(mc::RngStream& rng, double dw, double dt) {
  const double mid = 0.5 * dw + std::sqrt(0.25 * dt) * rng.normal();
  return {mid, dw - mid};
}

inline bool coupling_ordered(const SsePathState& s) {
  for (std::size_t j = 1; j < s.alphas.size(); ++j) {
    if (s.alphas[j].value() < s.alphas[j - 1].value()) return false;
  }
  return true;
}

/// Coupled step; increments with |dZ| >= 1/2 are refined by bridge splitting,
/// since the Euler map can lose monotonicity only when |dZ| >= 1.
inline void coupled_step_refined(SsePathState& state, const IntensitySpec& spec, double dt, complex dz,
                                 mc::RngStream& rng, int depth) {
  if (std::abs(dz) >= 0.5 && depth > 0) {
    const auto [a, b] = bridge_split(rng, dz, dt);
    coupled_step_refined(state, spec, 0.5 * dt, a, rng, depth - 1);
    coupled_step_refined(state, spec, 0.5 * dt, b, rng, depth - 1);
    return;
  }
  step_coupled_sse(state, spec(state.t), dt, dz);
}

template <class Track>
CountResult finish_counts(std::span<const double> user_grid, const std::vector<std::size_t>& index,
                          const std::vector<LatticeAngle>& alphas, const std::vector<Track>& trackers,
                          bool tail_ok, const SolverConfig& config) {
  CountResult r;
  r.lambda_grid.assign(user_grid.begin(), user_grid.end());
  const std::size_t m = user_grid.size();
  r.counts.resize(m);
  r.converged.resize(m);
  r.approach.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const LatticeAngle& a = alphas[index[i]];
    r.counts[i] = a.k;  // nearest lattice point, x in [-pi, pi)
    r.converged[i] = tail_ok && a.distance_to_lattice() < config.angle_tol;
  }
  for (std::size_t i = 1; i < m; ++i) {
    if (r.counts[i] < r.counts[i - 1]) {
      r.converged[i] = false;
      r.converged[i - 1] = false;
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    r.approach[i] = trackers[index[i]].classify(r.converged[i], config.approach_min_steps);
  }
  return r;
}

}  // namespace detail

/// Integrate the coupled equation until the tail and lattice conditions hold,
/// then read N(lambda) = alpha_lambda / 2 pi at the nearest lattice point.
inline CountResult solve_counts(const IntensitySpec& spec, std::span<const double> lambda_grid,
                                const SolverConfig& config, mc::RngStream& rng) {
  config.validate();
  detail::require_sorted_finite(lambda_grid);
  std::vector<std::size_t> index;
  const std::vector<double> grid = detail::augment_with_zero(lambda_grid, index);
  const double lmax = detail::max_abs(grid);
  const double t_max = config.hard_max(spec, lmax);

  SsePathState state = SsePathState::start(grid);
  std::vector<ApproachTracker> trackers(grid.size());
  std::size_t steps = 0;
  std::size_t violations = 0;
  bool tail_ok = false;
  bool hit_max = false;
  for (;;) {
    const double f = spec(state.t);
    const double dt = config.step(f, lmax);
    const complex dz = rng.complex_normal(dt);
    detail::coupled_step_refined(state, spec, dt, dz, rng, config.max_split_depth);
    ++steps;
    if (!detail::coupling_ordered(state)) ++violations;
    bool inside = true;
    for (std::size_t j = 0; j < grid.size(); ++j) {
      trackers[j].observe(state.alphas[j], config.angle_tol, config.below_margin);
      inside = inside && state.alphas[j].distance_to_lattice() < config.angle_tol;
    }
    tail_ok = lmax * spec.tail(state.t) < config.tail_tol;
    if (tail_ok && inside) break;
    if (state.t >= t_max) {
      hit_max = true;
      break;
    }
  }
  CountResult r = detail::finish_counts(lambda_grid, index, state.alphas, trackers, tail_ok, config);
  r.stop_time = state.t;
  r.steps = steps;
  r.hit_hard_max = hit_max;
  r.coupling_violations = violations;
  return r;
}

/// Single-lambda equation driven by a real Brownian motion.
inline CountResult solve_single_counts(const IntensitySpec& spec, double lambda, const SolverConfig& config,
                                       mc::RngStream& rng) {
  config.validate();
  if (!std::isfinite(lambda)) throw std::invalid_argument("solve_single_counts: lambda must be finite");
  const double lmax = std::abs(lambda);
  const double t_max = config.hard_max(spec, lmax);
  LatticeAngle alpha;
  ApproachTracker tracker;
  double t = 0.0;
  std::size_t steps = 0;
  bool tail_ok = false;
  bool hit_max = false;
  for (;;) {
    const double f = spec(t);
    const double dt = config.step(f, lmax);
    step_single_sse(alpha, lambda, f, dt, std::sqrt(dt) * rng.normal());
    t += dt;
    ++steps;
    tracker.observe(alpha, config.angle_tol, config.below_margin);
    tail_ok = lmax * spec.tail(t) < config.tail_tol;
    if (tail_ok && alpha.distance_to_lattice() < config.angle_tol) break;
    if (t >= t_max) {
      hit_max = true;
      break;
    }
  }
  const double g[1] = {lambda};
  const std::vector<std::size_t> index{0};
  CountResult r = detail::finish_counts(std::span<const double>(g, 1), index, std::vector<LatticeAngle>{alpha},
                                        std::vector<ApproachTracker>{tracker}, tail_ok, config);
  r.stop_time = t;
  r.steps = steps;
  r.hit_hard_max = hit_max;
  return r;
}

// ---------------------------------------------------------------------------
// Brownian carousel

inline constexpr double kClampRadius = 1.0 - 1e-9;

/// Euler step of hyperbolic Brownian motion dB = (1 - |B|^2)/2 dZ.  Steps
/// landing at radius >= 1 - 1e-9 are pulled back radially and reported.
inline complex step_hyperbolic_bm(complex b, double /*dt*/, complex dz, bool* clamped = nullptr) {
  if (!(std::abs(b) < 1.0)) throw std::invalid_argument("step_hyperbolic_bm: B must be interior");
  complex out = b + 0.5 * (1.0 - std::norm(b)) * dz;
  const double r = std::abs(out);
  if (r >= kClampRadius) {
    out *= kClampRadius / r;
    if (clamped) *clamped = true;
  }
  return out;
}

inline hyperbolic::DiskPoint step_hyperbolic_bm(const hyperbolic::DiskPoint& b, double dt, complex dz,
                                                bool* clamped = nullptr) {
  return hyperbolic::DiskPoint(step_hyperbolic_bm(b.value(), dt, dz, clamped));
}

struct CarouselState {
  double t = 0.0;
  complex b{};
  std::vector<double> lambdas;
  std::vector<double> gammas;
  complex z0{-1.0, 0.0};
  bool clamped = false;

  static CarouselState start(std::span<const double> lambdas, complex z0) {
    if (std::abs(std::abs(z0) - 1.0) > hyperbolic::kBoundaryTol) {
      throw std::invalid_argument("CarouselState: z0 must lie on the unit circle");
    }
    CarouselState s;
    s.lambdas.assign(lambdas.begin(), lambdas.end());
    s.gammas.assign(lambdas.size(), std::arg(z0));
    s.z0 = z0;
    return s;
  }
};

/// Angular rate lambda f |e^{i gamma} - B|^2 / (1 - |B|^2).
inline double carousel_rate(double lambda, double f_value, double gamma, complex b) {
  return lambda * f_value * std::norm(std::polar(1.0, gamma) - b) / (1.0 - std::norm(b));
}

/// Rotate the boundary points first, then move the center.
inline void step_carousel(CarouselState& state, double f_value, double dt, complex dz) {
  for (std::size_t j = 0; j < state.gammas.size(); ++j) {
    state.gammas[j] += carousel_rate(state.lambdas[j], f_value, state.gammas[j], state.b) * dt;
  }
  state.b = step_hyperbolic_bm(state.b, dt, dz, &state.clamped);
  state.t += dt;
}

/// Principal angle of T(B, e^{i gamma}) mapped into [-pi, pi).
inline double carousel_principal_angle(const CarouselState& s, std::size_t j) {
  double a = std::arg(hyperbolic::disk_transport(s.b, std::polar(1.0, s.gammas[j]), s.z0));
  if (a >= kPi) a -= kTwoPi;
  return a;
}

namespace detail {

/// Carousel step with branch continuation of every alpha.  A step whose
/// principal angle jumps by more than pi/2 is redone as two bridge halves.
inline void carousel_step_tracked(CarouselState& state, std::vector<LatticeAngle>& alphas, const IntensitySpec& spec,
                                  double dt, complex dz, mc::RngStream& rng, int depth) {
  CarouselState trial = state;
  step_carousel(trial, spec(state.t), dt, dz);
  std::vector<LatticeAngle> next = alphas;
  bool ok = true;
  for (std::size_t j = 0; j < next.size(); ++j) {
    const double a = carousel_principal_angle(trial, j);
    double delta = a - next[j].x;
    long shift = 0;
    if (delta > kPi) {
      delta -= kTwoPi;
      shift = -1;
    } else if (delta < -kPi) {
      delta += kTwoPi;
      shift = 1;
    }
    if (std::abs(delta) > 0.5 * kPi) ok = false;
    next[j].k += shift;
    next[j].x = a;
  }
  if (!ok && depth > 0) {
    const auto [h1, h2] = bridge_split(rng, dz, dt);
    carousel_step_tracked(state, alphas, spec, 0.5 * dt, h1, rng, depth - 1);
    carousel_step_tracked(state, alphas, spec, 0.5 * dt, h2, rng, depth - 1);
    return;
  }
  state = std::move(trial);
  alphas = std::move(next);
}

}  // namespace detail

/// Counts from the winding of T(B_t, e^{i gamma_lambda(t)}), with the same
/// stopping and rounding rules as solve_counts.
inline CountResult carousel_counts(const IntensitySpec& spec, std::span<const double> lambda_grid,
                                   const SolverConfig& config, mc::RngStream& rng,
                                   complex z0 = complex{-1.0, 0.0}) {
  config.validate();
  detail::require_sorted_finite(lambda_grid);
  std::vector<std::size_t> index;
  const std::vector<double> grid = detail::augment_with_zero(lambda_grid, index);
  const double lmax = detail::max_abs(grid);
  const double t_max = config.hard_max(spec, lmax);

  CarouselState state = CarouselState::start(grid, z0);
  std::vector<LatticeAngle> alphas(grid.size());
  std::vector<ApproachTracker> trackers(grid.size());
  std::size_t steps = 0;
  bool tail_ok = false;
  bool hit_max = false;
  for (;;) {
    const double f = spec(state.t);
    const double dt = config.step(f, lmax);
    const complex dz = rng.complex_normal(dt);
    detail::carousel_step_tracked(state, alphas, spec, dt, dz, rng, config.max_split_depth);
    ++steps;
    bool inside = true;
    for (std::size_t j = 0; j < grid.size(); ++j) {
      trackers[j].observe(alphas[j], config.angle_tol, config.below_margin);
      inside = inside && alphas[j].distance_to_lattice() < config.angle_tol;
    }
    tail_ok = lmax * spec.tail(state.t) < config.tail_tol;
    if (tail_ok && inside) break;
    if (state.t >= t_max) {
      hit_max = true;
      break;
    }
  }
  CountResult r = detail::finish_counts(lambda_grid, index, alphas, trackers, tail_ok, config);
  r.stop_time = state.t;
  r.steps = steps;
  r.hit_hard_max = hit_max;
  r.clamped = state.clamped;
  return r;
}

// ---------------------------------------------------------------------------
// Time-changed equations on [0, 1)

/// tau(t) = -(2/beta) log(1 - t), the clock in which the [0, 1) equations
/// become equations with intensity (beta/4) e^{-beta tau/4}.
inline double tau_of_t(double beta, double t) { return -(2.0 / beta) * std::log1p(-t); }

namespace detail {

inline void require_time_grid(std::span<const double> t_grid) {
  if (t_grid.empty()) throw std::invalid_argument("time grid must be nonempty");
  double prev = 0.0;
  for (double t : t_grid) {
    if (!(t >= prev) || !(t < 1.0)) throw std::invalid_argument("time grid must be sorted within [0, 1)");
    prev = t;
  }
}

}  // namespace detail

/// sqrt(1 - t) d alpha = (lambda/2) dt + sqrt(2/beta) Re((e^{-i alpha} - 1) dW),
/// alpha(0) = 0, sampled at the requested times.  Integrated by Euler-Maruyama
/// in tau on steps chosen as in the sine equation.
inline std::vector<double> solve_relative_phase_limit(double beta, double lambda, std::span<const double> t_grid,
                                                      const SolverConfig& config, mc::RngStream& rng) {
  config.validate();
  if (!(beta > 0.0)) throw std::invalid_argument("solve_relative_phase_limit: beta must be > 0");
  detail::require_time_grid(t_grid);
  const IntensitySpec spec = IntensitySpec::exponential(beta);
  SsePathState state = SsePathState::start(std::span<const double>(&lambda, 1));
  std::vector<double> out;
  out.reserve(t_grid.size());
  for (double t_target : t_grid) {
    const double tau_target = tau_of_t(beta, t_target);
    while (state.t < tau_target) {
      double dt = config.step(spec(state.t), lambda);
      bool last = false;
      if (state.t + dt >= tau_target) {
        dt = tau_target - state.t;
        last = true;
      }
      detail::coupled_step_refined(state, spec, dt, rng.complex_normal(dt), rng, config.max_split_depth);
      if (last) state.t = tau_target;
    }
    out.push_back(state.alphas[0].value());
  }
  return out;
}

struct PhaseLimitCoefficients {
  double drift_extra = 0.0;  ///< (1/beta - 1/2) sqrt(nu)/(nu + 1 - t); 0 for nu = inf
  double z_coeff = 0.0;      ///< sqrt(2/beta)
  double b_coeff = 0.0;      ///< sqrt(2(2 nu + 1 - t)/(beta (nu + 1 - t))); 2/sqrt(beta) for nu = inf
};

/// Coefficients of sqrt(1-t) d phi = (lambda/2 + drift_extra) dt
///   + z_coeff Re(e^{-i phi} dZ) + b_coeff dB.
inline PhaseLimitCoefficients phase_limit_coefficients(double nu, double beta, double t) {
  if (!(nu >= 0.0)) throw std::invalid_argument("phase_limit_coefficients: nu must be in [0, inf]");
  if (!(beta > 0.0)) throw std::invalid_argument("phase_limit_coefficients: beta must be > 0");
  PhaseLimitCoefficients c;
  c.z_coeff = std::sqrt(2.0 / beta);
  if (std::isinf(nu)) {
    c.drift_extra = 0.0;
    c.b_coeff = 2.0 / std::sqrt(beta);
  } else {
    c.drift_extra = (1.0 / beta - 0.5) * std::sqrt(nu) / (nu + 1.0 - t);
    c.b_coeff = std::sqrt(2.0 * (2.0 * nu + 1.0 - t) / (beta * (nu + 1.0 - t)));
  }
  return c;
}

/// Limiting regularized phase, phi(0) = pi, sampled at the requested times.
/// In tau the equation reads
///   d phi = (beta/2) sqrt(1-t) (lambda/2 + drift_extra) d tau
///         + Re(e^{-i phi} dZ_tau) + b_coeff sqrt(beta/2) dB_tau.
inline std::vector<double> solve_phase_limit_sde(double nu, double beta, double lambda,
                                                 std::span<const double> t_grid, const SolverConfig& config,
                                                 mc::RngStream& rng) {
  config.validate();
  (void)phase_limit_coefficients(nu, beta, 0.0);
  detail::require_time_grid(t_grid);
  const IntensitySpec spec = IntensitySpec::exponential(beta);
  double phi = kPi;
  double tau = 0.0;
  std::vector<double> out;
  out.reserve(t_grid.size());
  for (double t_target : t_grid) {
    const double tau_target = tau_of_t(beta, t_target);
    while (tau < tau_target) {
      const double dtau = std::min(config.step(spec(tau), lambda), tau_target - tau);
      const double t = -std::expm1(-0.5 * beta * tau);
      const auto c = phase_limit_coefficients(nu, beta, t);
      const complex dz = rng.complex_normal(dtau);
      const double db = std::sqrt(dtau) * rng.normal();
      const double drift = 0.5 * beta * std::sqrt(1.0 - t) * (0.5 * lambda + c.drift_extra);
      phi += drift * dtau + std::real(std::polar(1.0, -phi) * dz) + c.b_coeff * std::sqrt(0.5 * beta) * db;
      tau = (tau + dtau >= tau_target) ? tau_target : tau + dtau;
    }
    out.push_back(phi);
  }
  return out;
}

}  // namespace sinebeta::carousel
