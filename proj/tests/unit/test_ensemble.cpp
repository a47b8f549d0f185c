#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include "sinebeta/ensemble.hpp"
#include "sinebeta/rng.hpp"

namespace en = sinebeta::ensemble;
namespace hb = sinebeta::hyperbolic;
using cd = std::complex<double>;
using hb::kPi;
using hb::kTwoPi;
using sinebeta::mc::RngStream;

namespace {

// Cyclic Jacobi rotations on the dense matrix; returns sorted eigenvalues.
std::vector<double> jacobi_eigenvalues(const en::TridiagonalSymmetric& t) {
  const std::size_t n = t.size();
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    a[i][i] = t.diag[i];
    if (i + 1 < n) a[i][i + 1] = a[i + 1][i] = t.offdiag[i];
  }
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-26) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double tt = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(tt * tt + 1.0), s = tt * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.begin(), ev.end());
  return ev;
}

double mod2pi_dist(double x) { return std::abs(std::remainder(x, kTwoPi)); }

long count_in(double a, double b) {  // #((a, b] ∩ 2πZ)
  return static_cast<long>(std::floor(b / kTwoPi) - std::floor(a / kTwoPi));
}

en::ConjugatedModel random_model(std::size_t n, double beta, std::uint64_t seed) {
  RngStream rng(seed, 0);
  return en::sample_conjugated({n, beta, 0.0, seed}, rng);
}

}  // namespace

TEST(SampleEnsemble, SizeOneHasNoOffdiagonal) {
  RngStream rng(1, 0);
  const auto m = en::sample_ensemble({1, 2.0, 0.0, 1}, rng);
  EXPECT_EQ(m.diag.size(), 1u);
  EXPECT_TRUE(m.offdiag.empty());
}

TEST(SampleEnsemble, DeterministicForFixedStream) {
  RngStream a(7, 3), b(7, 3);
  const auto m1 = en::sample_ensemble({50, 1.3, 0.0, 7}, a);
  const auto m2 = en::sample_ensemble({50, 1.3, 0.0, 7}, b);
  EXPECT_EQ(m1.diag, m2.diag);
  EXPECT_EQ(m1.offdiag, m2.offdiag);
}

TEST(SampleEnsemble, RejectsBadParameters) {
  RngStream rng(1, 0);
  EXPECT_THROW(en::sample_ensemble({0, 2.0, 0.0, 0}, rng), std::invalid_argument);
  EXPECT_THROW(en::sample_ensemble({3, 0.0, 0.0, 0}, rng), std::invalid_argument);
  EXPECT_THROW((en::EnsembleParams{4, 2.0, 4.0, 0}.validate_bulk()), std::invalid_argument);
}

TEST(SampleEnsemble, EntryMoments) {
  const std::size_t n = 5;
  const double beta = 1.7;
  const int draws = 100000;
  RngStream rng(2, 0);
  std::vector<double> s(n - 1, 0.0), s2(n - 1, 0.0);
  double dsum = 0.0, dsq = 0.0;
  for (int i = 0; i < draws; ++i) {
    const auto m = en::sample_ensemble({n, beta, 0.0, 2}, rng);
    dsum += m.diag[2];
    dsq += m.diag[2] * m.diag[2];
    for (std::size_t j = 0; j + 1 < n; ++j) {
      ASSERT_GT(m.offdiag[j], 0.0);
      const double v = m.offdiag[j] * m.offdiag[j] * beta;
      s[j] += v;
      s2[j] += v * v;
    }
  }
  for (std::size_t j = 0; j + 1 < n; ++j) {
    const double mean = s[j] / draws;
    const double se = std::sqrt((s2[j] / draws - mean * mean) / draws);
    EXPECT_NEAR(mean, static_cast<double>(n - 1 - j) * beta, 4.0 * se) << j;
  }
  EXPECT_NEAR(dsum / draws, 0.0, 4.0 * std::sqrt(2.0 / beta / draws));
  EXPECT_NEAR(dsq / draws, 2.0 / beta, 4.0 * (2.0 / beta) * std::sqrt(2.0 / draws));
}

TEST(SampleConjugated, ShapeAndMoments) {
  const std::size_t n = 8;
  const double beta = 2.0;
  const int draws = 100000;
  RngStream rng(3, 0);
  std::vector<double> s(n, 0.0), s2(n, 0.0);
  for (int i = 0; i < draws; ++i) {
    const auto c = en::sample_conjugated({n, beta, 0.0, 3}, rng);
    ASSERT_EQ(c.y[n - 1], 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      s[j] += c.y[j];
      s2[j] += c.y[j] * c.y[j];
    }
  }
  for (std::size_t j = 0; j + 1 < n; ++j) {
    const double m = static_cast<double>(n - j);
    // E chi^2_{(m-1) beta} / beta = m - 1
    const double expected = (m - 1.0) / std::sqrt(m - 1.5) - std::sqrt(m - 0.5);
    const double mean = s[j] / draws;
    const double se = std::sqrt((s2[j] / draws - mean * mean) / draws);
    EXPECT_NEAR(mean, expected, 4.0 * se) << j;
  }
  const auto c = random_model(n, beta, 4);
  for (std::size_t l = 0; l < n; ++l) {
    EXPECT_DOUBLE_EQ(c.s[l], std::sqrt(static_cast<double>(n - l) - 0.5));
    if (l) {
      EXPECT_LT(c.s[l], c.s[l - 1]);
    }
  }
}

TEST(SampleConjugated, SymmetrizeRoundTrip) {
  RngStream rng(5, 0);
  const auto m = en::sample_ensemble({30, 2.5, 0.0, 5}, rng);
  const auto back = en::symmetrize(en::conjugate(m));
  for (std::size_t i = 0; i + 1 < m.size(); ++i) EXPECT_NEAR(back.offdiag[i], m.offdiag[i], 1e-12 * m.offdiag[i]);
  EXPECT_EQ(back.diag, m.diag);
}

TEST(Sturm, SmallExamples) {
  const en::TridiagonalSymmetric one{{2.0}, {}};
  EXPECT_EQ(en::sturm_count_below(one, 2.5), 1u);
  EXPECT_EQ(en::sturm_count_below(one, 2.0), 0u);
  EXPECT_EQ(en::sturm_count_below(one, 1.0), 0u);
  const en::TridiagonalSymmetric two{{0.0, 0.0}, {1.0}};
  EXPECT_EQ(en::sturm_count_below(two, 0.0), 1u);
  EXPECT_EQ(en::sturm_count_below(two, -1.0), 0u);
  EXPECT_EQ(en::sturm_count_below(two, 1.0), 1u);
  EXPECT_EQ(en::sturm_count_at_most(two, 1.0), 2u);
  EXPECT_EQ(en::sturm_count_below(two, 1e300), 2u);
}

TEST(Sturm, MatchesDenseJacobiEigenvalues) {
  RngStream rng(6, 0);
  for (int rep = 0; rep < 60; ++rep) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 25.0);
    const double beta = 0.5 + 3.0 * rng.uniform();
    const auto m = en::sample_ensemble({n, beta, 0.0, 0}, rng);
    const auto ev = jacobi_eigenvalues(m);
    for (int k = 0; k < 30; ++k) {
      const double lam = ev.front() - 1.0 + (ev.back() - ev.front() + 2.0) * rng.uniform();
      bool near = false;
      for (double e : ev) near = near || std::abs(e - lam) < 1e-9;
      if (near) continue;
      const auto expected = static_cast<std::size_t>(std::lower_bound(ev.begin(), ev.end(), lam) - ev.begin());
      ASSERT_EQ(en::sturm_count_below(m, lam), expected) << "n=" << n;
    }
  }
}

TEST(Sturm, ZeroPivotIsHandled) {
  // diag (1, 1, 1), offdiag (1, 1): eigenvalues 1 - sqrt2, 1, 1 + sqrt2; the first pivot at 1 is zero.
  const en::TridiagonalSymmetric m{{1.0, 1.0, 1.0}, {1.0, 1.0}};
  EXPECT_EQ(en::sturm_count_below(m, 1.0), 1u);
  EXPECT_EQ(en::sturm_count_at_most(m, 1.0), 2u);
}

TEST(EigenvaluesInWindow, Examples) {
  const en::TridiagonalSymmetric two{{0.0, 0.0}, {1.0}};
  const auto ev = en::eigenvalues_in_window(two, 0.0, 2.0, 1e-10);
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_NEAR(ev[0], -1.0, 1e-10);
  EXPECT_NEAR(ev[1], 1.0, 1e-10);
  EXPECT_TRUE(en::eigenvalues_in_window(two, 0.0, 0.5, 1e-10).empty());
  EXPECT_THROW(en::eigenvalues_in_window(two, 0.0, 0.0, 1e-10), std::invalid_argument);
  EXPECT_THROW(en::eigenvalues_in_window(two, 0.0, 1.0, 0.0), std::invalid_argument);
}

TEST(EigenvaluesInWindow, FullSpectrumMatchesJacobi) {
  RngStream rng(7, 0);
  const auto m = en::sample_ensemble({40, 1.0, 0.0, 7}, rng);
  const auto [lo, hi] = en::gershgorin_bounds(m);
  const double tol = en::default_bisection_tol(m);
  const auto ev = en::eigenvalues_in_window(m, 0.5 * (lo + hi), 0.5 * (hi - lo), tol);
  const auto ref = jacobi_eigenvalues(m);
  ASSERT_EQ(ev.size(), ref.size());
  for (std::size_t i = 0; i < ev.size(); ++i) EXPECT_NEAR(ev[i], ref[i], tol + 1e-11);
}

TEST(WildPhase, ZeroModelAlternates) {
  const std::size_t n = 6;
  en::ConjugatedModel c;
  c.x.assign(n, 0.0);
  c.y.assign(n, 0.0);
  for (std::size_t l = 0; l < n; ++l) c.s.push_back(en::scale_s(n, l));
  const auto tr = en::wild_phase_forward(c, 0.0);
  for (std::size_t l = 0; l <= n; ++l) EXPECT_NEAR(tr.phases[l], kPi * static_cast<double>(l + 1), 1e-12);
  EXPECT_NEAR(en::wild_phase_final(c, 0.0), tr.phases[n], 1e-12);
}

TEST(WildPhase, MatchesProjectiveRecursion) {
  const auto c = random_model(10, 2.0, 8);
  for (double lam : {-3.0, 0.0, 0.7, 4.0}) {
    const auto tr = en::wild_phase_forward(c, lam);
    EXPECT_EQ(tr.phases[0], kPi);
    // r_{l+1} = c_l (b_l - 1/r_l) in homogeneous coordinates (p : q), r_0 = infinity
    double p = 1.0, q = 0.0;
    for (std::size_t l = 0; l < c.size(); ++l) {
      const double cl = 1.0 / (1.0 + c.y[l] / c.s[l]);
      const double bl = (lam - c.x[l]) / c.s[l];
      const double np = cl * (bl * p - q);
      const double nq = p;
      const double norm = std::hypot(np, nq);
      p = np / norm;
      q = nq / norm;
      const cd w = hb::cayley(hb::HalfPlanePoint::homogeneous(p, q)).value();
      EXPECT_LE(mod2pi_dist(tr.phases[l + 1] - std::arg(w)), 1e-9) << l;
    }
  }
}

TEST(WildPhase, SizeOneEigenvalueCriterion) {
  en::ConjugatedModel c{{0.8}, {0.0}, {std::sqrt(0.5)}};
  EXPECT_NEAR(en::wild_phase_final(c, 0.8), kTwoPi, 1e-12);
  EXPECT_LT(en::wild_phase_final(c, 0.7), kTwoPi);
  EXPECT_GT(en::wild_phase_final(c, 0.9), kTwoPi);
  EXPECT_EQ(en::phase_count_below(c, 0.7), 0u);
  EXPECT_EQ(en::phase_count_below(c, 0.9), 1u);
}

TEST(WildPhase, StrictlyIncreasingInSpectralParameter) {
  const auto c = random_model(25, 1.0, 9);
  std::vector<double> prev;
  for (int i = 0; i <= 200; ++i) {
    const double lam = -12.0 + 24.0 * i / 200.0;
    const auto tr = en::wild_phase_forward(c, lam);
    if (!prev.empty()) {
      for (std::size_t l = 1; l <= c.size(); ++l) ASSERT_GT(tr.phases[l], prev[l]) << lam;
    }
    prev = tr.phases;
  }
}

TEST(TargetPhase, BoundaryAndSingleStep) {
  const auto c = random_model(12, 2.0, 10);
  EXPECT_EQ(en::target_phase_backward(c, 0.3, 12), 0.0);
  EXPECT_THROW(en::target_phase_backward(c, 0.3, 13), std::out_of_range);

  const double x0 = -0.4, s0 = std::sqrt(0.5);
  const en::ConjugatedModel one{{x0}, {0.0}, {s0}};
  for (double lam : {-2.0, -0.1, 0.5, 3.0}) {
    const double b = (lam - x0) / s0;
    const double phi = en::target_phase_backward(one, lam, 0);
    // inverse step sends r = 0 to -1/(0 - b) = 1/b
    const cd w = hb::cayley(hb::HalfPlanePoint::homogeneous(1.0, b)).value();
    EXPECT_LE(mod2pi_dist(phi - std::arg(w)), 1e-12) << lam;
    EXPECT_GT(phi, -kTwoPi);
    EXPECT_LT(phi, 0.0);
  }
}

TEST(TargetPhase, TrajectoryMatchesProjectiveBackwardRecursion) {
  const auto c = random_model(10, 1.5, 11);
  const double lam = 0.9;
  const auto tr = en::target_phase_trajectory(c, lam);
  EXPECT_EQ(tr.phases[c.size()], 0.0);
  double p = 0.0, q = 1.0;  // r_n = 0
  for (std::size_t j = c.size(); j-- > 0;) {
    const double cl = 1.0 / (1.0 + c.y[j] / c.s[j]);
    const double bl = (lam - c.x[j]) / c.s[j];
    // r_j = -1/(r_{j+1}/c - b) = -q c/(p - b c q)
    const double np = -q * cl;
    const double nq = p - bl * cl * q;
    const double norm = std::hypot(np, nq);
    p = np / norm;
    q = nq / norm;
    const cd w = hb::cayley(hb::HalfPlanePoint::homogeneous(p, q)).value();
    EXPECT_LE(mod2pi_dist(tr.phases[j] - std::arg(w)), 1e-9) << j;
    EXPECT_NEAR(tr.phases[j], en::target_phase_backward(c, lam, j), 1e-12);
  }
}

TEST(TargetPhase, StrictlyDecreasingInSpectralParameter) {
  const auto c = random_model(20, 2.0, 12);
  for (std::size_t ell : {0u, 5u, 19u}) {
    double prev = 1e300;
    for (int i = 0; i <= 200; ++i) {
      const double lam = -10.0 + 20.0 * i / 200.0;
      const double v = en::target_phase_backward(c, lam, ell);
      ASSERT_LT(v, prev);
      prev = v;
    }
  }
}

TEST(PhaseCount, TotalCounts) {
  const auto c = random_model(50, 1.0, 13);
  const auto [lo, hi] = en::gershgorin_bounds(c);
  EXPECT_EQ(en::phase_count_below(c, lo - 1.0), 0u);
  EXPECT_EQ(en::phase_count_below(c, hi + 1.0), 50u);
  EXPECT_EQ(en::phase_count_below(c, lo - 100.0), 0u);
}

TEST(PhaseCount, AgreesWithSturmOnSamePair) {
  RngStream rng(14, 0);
  for (int rep = 0; rep < 60; ++rep) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 150.0);
    const double beta = 0.3 + 4.0 * rng.uniform();
    const auto m = en::sample_ensemble({n, beta, 0.0, 0}, rng);
    const auto c = en::conjugate(m);
    const auto [lo, hi] = en::gershgorin_bounds(m);
    for (int k = 0; k < 20; ++k) {
      const double lam = lo - 1.0 + (hi - lo + 2.0) * rng.uniform();
      ASSERT_EQ(en::phase_count_below(c, lam), en::sturm_count_below(m, lam)) << "n=" << n << " lam=" << lam;
    }
  }
}

TEST(PhaseCount, EigenvalueCriterionAtInteriorIndices) {
  RngStream rng(15, 0);
  const std::size_t n = 30;
  const auto m = en::sample_ensemble({n, 2.0, 0.0, 0}, rng);
  const auto c = en::conjugate(m);
  const auto [lo, hi] = en::gershgorin_bounds(m);
  const auto ev = en::eigenvalues_in_window(m, 0.5 * (lo + hi), 0.5 * (hi - lo), 1e-13);
  ASSERT_EQ(ev.size(), n);
  for (std::size_t idx : {2u, 14u, 27u}) {
    const double lam = ev[idx];
    for (std::size_t ell : {0u, 11u, 23u}) {
      const auto diff = [&](double x) {
        return en::wild_phase_forward(c, x).phases[ell] - en::target_phase_backward(c, x, ell);
      };
      const double h = 1e-7;
      const double slope = (diff(lam + h) - diff(lam - h)) / (2.0 * h);
      EXPECT_LE(mod2pi_dist(diff(lam)), 4e-13 * std::abs(slope) + 1e-9) << idx << " " << ell;
    }
  }
}

TEST(PhaseCount, IntervalIdentityInWildCoordinates) {
  RngStream rng(16, 0);
  const std::size_t n = 40;
  const auto m = en::sample_ensemble({n, 1.0, 0.0, 0}, rng);
  const auto c = en::conjugate(m);
  const auto [lo, hi] = en::gershgorin_bounds(m);
  for (int rep = 0; rep < 30; ++rep) {
    double a = lo + (hi - lo) * rng.uniform();
    double b = lo + (hi - lo) * rng.uniform();
    if (a > b) std::swap(a, b);
    const long expected = static_cast<long>(en::sturm_count_at_most(m, b)) - static_cast<long>(en::sturm_count_at_most(m, a));
    for (std::size_t ell : {0u, 7u, 20u, 39u, 40u}) {
      const double da = en::wild_phase_forward(c, a).phases[ell] - en::target_phase_backward(c, a, ell);
      const double db = en::wild_phase_forward(c, b).phases[ell] - en::target_phase_backward(c, b, ell);
      ASSERT_EQ(count_in(da, db), expected) << ell;
    }
  }
}

TEST(ScaledCounts, ConventionAndMonotonicity) {
  RngStream rng(17, 0);
  const en::EnsembleParams p{200, 2.0, 3.0, 0};
  const std::vector<double> grid{-10.0, -3.0, 0.0, 1.0, 5.0, 20.0};
  const auto s = en::scaled_counting_sample(p, rng, grid);
  EXPECT_EQ(s.counts[2], 0);
  EXPECT_TRUE(std::is_sorted(s.counts.begin(), s.counts.end()));
  EXPECT_LE(s.counts[0], 0);
  EXPECT_NEAR(s.scaling.factor, 2.0 * std::sqrt(p.n0()), 1e-15);
  const std::vector<double> bad{1.0, 0.0};
  EXPECT_THROW(en::scaled_counting_sample(p, rng, bad), std::invalid_argument);
}

TEST(ScaledCounts, MeanCountAtTwoPiIsOne) {
  const en::EnsembleParams p{4096, 2.0, 0.0, 0};
  const std::vector<double> grid{2.0 * kPi};
  const int samples = 2000;
  double s = 0, s2 = 0;
  for (int i = 0; i < samples; ++i) {
    RngStream rng(18, static_cast<std::uint64_t>(i));
    const double v = static_cast<double>(en::scaled_counting_sample(p, rng, grid).counts[0]);
    s += v;
    s2 += v * v;
  }
  const double mean = s / samples;
  const double se = std::sqrt((s2 / samples - mean * mean) / samples);
  EXPECT_NEAR(mean, 1.0, 3.0 * se);
}

TEST(Rho, Examples) {
  for (std::size_t ell : {0u, 3u, 9u}) EXPECT_NEAR(std::abs(en::rho_ell(ell, 10.0, 0.0) - cd(0.0, 1.0)), 0.0, 1e-15);
  EXPECT_NEAR(std::abs(en::rho_ell(10, 10.0, 2.0) - cd(1.0, 0.0)), 0.0, 1e-15);
  EXPECT_THROW(en::rho_ell(11, 10.5, 1.0), std::domain_error);
  EXPECT_THROW(en::rho_ell(10, 10.0, 0.0), std::domain_error);
}

TEST(Rho, SolvesFixedPointQuadratic) {
  RngStream rng(19, 0);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 500.0);
    const double mu = 1.9 * std::sqrt(static_cast<double>(n)) * rng.uniform_signed();
    const double n0 = static_cast<double>(n) - mu * mu / 4.0 - 0.5;
    if (n0 <= 0.0) continue;
    const auto ell = static_cast<std::size_t>(std::floor(n0 * rng.uniform()));
    const cd rho = en::rho_ell(ell, n0, mu);
    const double s = en::scale_s(n, ell);
    EXPECT_LE(std::abs(rho * rho - (mu / s) * rho + 1.0), 1e-12);
    EXPECT_NEAR(std::abs(rho), 1.0, 1e-14);
    EXPECT_GE(rho.imag(), 0.0);
  }
}

TEST(RegularizedPhase, BaselineAndInitialValues) {
  RngStream rng(20, 0);
  const en::EnsembleParams p{60, 2.0, 1.0, 0};
  const auto c = en::sample_conjugated(p, rng);
  const auto run0 = en::regularized_phase_run(c, p, 0.0);
  ASSERT_EQ(run0.size(), en::regularized_last_index(p.n0()) + 1);
  for (const auto& st : run0) {
    EXPECT_EQ(st.alpha, 0.0);
    EXPECT_NEAR(std::abs(st.eta), 1.0, 1e-12);
    EXPECT_NEAR(std::abs(st.rho), 1.0, 1e-12);
  }
  const auto run = en::regularized_phase_run(c, p, 3.0);
  EXPECT_EQ(run[0].phi, kPi);
  EXPECT_EQ(run[0].alpha, 0.0);
  EXPECT_THROW(en::regularized_phase_run(c, p, 3.0, run.size()), std::out_of_range);
  EXPECT_THROW(en::regularized_phase_run(c, p, std::nan("")), std::invalid_argument);
}

TEST(RegularizedPhase, LastIndexStaysBelowN0) {
  EXPECT_EQ(en::regularized_last_index(10.5), 10u);
  EXPECT_EQ(en::regularized_last_index(10.0), 9u);
  EXPECT_EQ(en::regularized_last_index(0.3), 0u);
}

TEST(RegularizedPhase, RecoversWildPhase) {
  RngStream rng(21, 0);
  for (double mu : {0.0, 4.0, -7.0}) {
    const en::EnsembleParams p{120, 1.0, mu, 0};
    const auto c = en::sample_conjugated(p, rng);
    const auto win = en::ScalingWindow::from(p);
    for (double lam : {0.0, 2.5, -6.0}) {
      const auto run = en::regularized_phase_run(c, p, lam);
      const auto wild = en::wild_phase_forward(c, win.spectral(lam));
      const auto wild0 = en::wild_phase_forward(c, win.spectral(0.0));
      for (std::size_t k = 0; k < 5; ++k) {
        const auto ell = static_cast<std::size_t>(rng.uniform() * static_cast<double>(run.size()));
        EXPECT_NEAR(en::wild_from_regularized(run[ell], run[ell].phi), wild.phases[ell], 1e-8) << mu << " " << ell;
        EXPECT_NEAR(en::wild_from_regularized(run[ell], run[ell].phi0), wild0.phases[ell], 1e-8);
        EXPECT_NEAR(en::regularized_from_wild(run[ell], wild.phases[ell]), run[ell].phi, 1e-8);
      }
    }
  }
}

TEST(RegularizedPhase, AlphaStrictlyIncreasingInLambda) {
  RngStream rng(22, 0);
  const en::EnsembleParams p{80, 2.0, 0.0, 0};
  const auto c = en::sample_conjugated(p, rng);
  std::vector<double> prev;
  for (int i = 1; i <= 40; ++i) {
    const auto run = en::regularized_phase_run(c, p, 0.5 * i);
    if (!prev.empty()) {
      for (std::size_t l = 1; l < run.size(); ++l) ASSERT_GT(run[l].alpha, prev[l]);
    }
    prev.clear();
    for (const auto& st : run) prev.push_back(st.alpha);
  }
}

TEST(RegularizedPhase, IntervalIdentityInRegularizedCoordinates) {
  RngStream rng(23, 0);
  const en::EnsembleParams p{100, 2.0, 2.0, 0};
  const auto m = en::sample_ensemble(p, rng);
  const auto c = en::conjugate(m);
  const auto win = en::ScalingWindow::from(p);
  const std::vector<double> lams{-9.0, -1.5, 0.0, 2.0, 7.5, 30.0};
  std::vector<std::vector<en::RegularizedPhaseState>> runs;
  for (double l : lams) runs.push_back(en::regularized_phase_run(c, p, l));
  for (std::size_t ell : {0u, 10u, 50u, 97u}) {
    ASSERT_LT(ell, runs[0].size());
    std::vector<double> d;
    for (std::size_t i = 0; i < lams.size(); ++i) {
      d.push_back(runs[i][ell].phi - en::regularized_target_phase(c, p, runs[i][ell], lams[i]));
    }
    for (std::size_t i = 0; i + 1 < lams.size(); ++i) {
      const long expected = static_cast<long>(en::sturm_count_at_most(m, win.spectral(lams[i + 1]))) -
                            static_cast<long>(en::sturm_count_at_most(m, win.spectral(lams[i])));
      EXPECT_EQ(count_in(d[i], d[i + 1]), expected) << ell << " " << i;
    }
  }
}

TEST(Valve, HoldsOnSampledRunsIncludingTinySizes) {
  RngStream rng(24, 0);
  for (std::size_t n : {2u, 3u, 5u, 40u, 150u}) {
    for (int rep = 0; rep < 10; ++rep) {
      const en::EnsembleParams p{n, 0.5 + 3.5 * rng.uniform(), 0.0, 0};
      const auto c = en::sample_conjugated(p, rng);
      EXPECT_TRUE(en::valve_check(en::regularized_phase_run(c, p, 3.0))) << n;
      EXPECT_TRUE(en::valve_check(en::regularized_phase_run(c, p, 0.0)));
    }
  }
}

TEST(Valve, DetectsDecrease) {
  std::vector<en::RegularizedPhaseState> s(2);
  s[0].alpha = 7.0;
  s[1].alpha = 6.0;
  EXPECT_FALSE(en::valve_check(s));
  s[1].alpha = 6.5;
  s[0].alpha = 6.4;
  EXPECT_TRUE(en::valve_check(s));
}
