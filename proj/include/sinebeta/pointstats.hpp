#pragma once

// Estimators over integer count samples: gap probabilities with Wilson
// intervals, slope fits of -log p against lambda^2, tail bounds, two-sample
// distances and the Wasserstein-Lipschitz check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sinebeta::pointstats {

inline constexpr double kZ95 = 1.959963984540054;

enum class Source { finite_n, sse, carousel };

inline const char* to_string(Source s) {
  switch (s) {
    case Source::finite_n:
      return "finite-n";
    case Source::sse:
      return "sse";
    default:
      return "carousel";
  }
}

struct EmpiricalCounts {
  double lambda = 0.0;
  std::vector<long> samples;
  Source source = Source::sse;
  std::string meta;
};

/// Integer histogram value -> multiplicity.
using Histogram = std::map<long, std::uint64_t>;

inline Histogram histogram_of(std::span<const long> samples) {
  Histogram h;
  for (long v : samples) ++h[v];
  return h;
}

inline std::uint64_t histogram_total(const Histogram& h) {
  std::uint64_t n = 0;
  for (const auto& [v, c] : h) n += c;
  return n;
}

struct Interval {
  double low = 0.0;
  double high = 1.0;
};

/// Wilson score interval for `successes` out of `n`.
inline Interval wilson_interval(std::uint64_t successes, std::uint64_t n, double z = kZ95) {
  if (n == 0) throw std::invalid_argument("wilson_interval: n must be positive");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  Interval iv{std::max(0.0, center - half), std::min(1.0, center + half)};
  // guard rounding at the endpoints
  iv.low = std::min(iv.low, p);
  iv.high = std::max(iv.high, p);
  return iv;
}

struct GapEstimate {
  double lambda = 0.0;
  long k = 0;
  std::uint64_t n = 0;
  std::uint64_t hits = 0;
  double p_hat = 0.0;
  double ci_low = 0.0;
  double ci_high = 1.0;
  std::optional<double> neg_log_p;

  /// Delta-method standard error of -log p_hat; absent when p_hat is 0.
  std::optional<double> neg_log_p_se() const {
    if (!neg_log_p || n == 0) return std::nullopt;
    return std::sqrt((1.0 - p_hat) / (static_cast<double>(n) * p_hat));
  }
};

/// Estimate from hit counts.  p_hat = 0 gets the one-sided upper bound 3/n.
inline GapEstimate gap_estimate_from_counts(double lambda, long k, std::uint64_t hits, std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("gap_probability: empty sample");
  if (k < 0) throw std::invalid_argument("gap_probability: k must be >= 0");
  GapEstimate g;
  g.lambda = lambda;
  g.k = k;
  g.n = n;
  g.hits = hits;
  g.p_hat = static_cast<double>(hits) / static_cast<double>(n);
  if (hits == 0) {
    g.ci_low = 0.0;
    g.ci_high = std::min(1.0, 3.0 / static_cast<double>(n));
  } else {
    const Interval iv = wilson_interval(hits, n);
    g.ci_low = iv.low;
    g.ci_high = iv.high;
    g.neg_log_p = -std::log(g.p_hat);
  }
  return g;
}

/// P(N <= k) from a histogram of counts on [0, lambda].
inline GapEstimate gap_probability(double lambda, const Histogram& h, long k) {
  std::uint64_t hits = 0;
  for (const auto& [v, c] : h) {
    if (v <= k) hits += c;
  }
  return gap_estimate_from_counts(lambda, k, hits, histogram_total(h));
}

inline GapEstimate gap_probability(const EmpiricalCounts& samples, long k) {
  if (samples.samples.empty()) throw std::invalid_argument("gap_probability: empty sample");
  return gap_probability(samples.lambda, histogram_of(samples.samples), k);
}

struct SlopeFit {
  double slope = 0.0;
  double slope_se = 0.0;
  double intercept = 0.0;
  double intercept_se = 0.0;
  std::size_t used = 0;
  std::vector<double> excluded_lambdas;  ///< points with p_hat = 0
  bool weighted = false;
};

/// Least-squares line neg_log_p = intercept + slope * lambda^2.  Points are
/// weighted by the inverse delta-method variance when every point has one.
inline SlopeFit gap_slope_fit(std::span<const GapEstimate> estimates) {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> w;
  SlopeFit fit;
  bool all_weighted = true;
  for (const GapEstimate& g : estimates) {
    if (!g.neg_log_p) {
      fit.excluded_lambdas.push_back(g.lambda);
      continue;
    }
    x.push_back(g.lambda * g.lambda);
    y.push_back(*g.neg_log_p);
    const auto se = g.neg_log_p_se();
    if (se && *se > 0.0) {
      w.push_back(1.0 / (*se * *se));
    } else {
      all_weighted = false;
      w.push_back(1.0);
    }
  }
  if (x.size() < 3) throw std::invalid_argument("gap_slope_fit: need at least 3 estimates with p_hat > 0");
  if (!all_weighted) std::fill(w.begin(), w.end(), 1.0);
  fit.weighted = all_weighted;
  fit.used = x.size();

  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sw += w[i];
    sx += w[i] * x[i];
    sy += w[i] * y[i];
  }
  const double xbar = sx / sw;
  const double ybar = sy / sw;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += w[i] * (x[i] - xbar) * (x[i] - xbar);
    sxy += w[i] * (x[i] - xbar) * (y[i] - ybar);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("gap_slope_fit: lambdas must be distinct");
  fit.slope = sxy / sxx;
  fit.intercept = ybar - fit.slope * xbar;
  if (all_weighted) {
    // known variances
    fit.slope_se = std::sqrt(1.0 / sxx);
    fit.intercept_se = std::sqrt(1.0 / sw + xbar * xbar / sxx);
  } else {
    double rss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = y[i] - fit.intercept - fit.slope * x[i];
      rss += r * r;
    }
    const double dof = static_cast<double>(x.size()) - 2.0;
    const double s2 = dof > 0.0 ? rss / dof : 0.0;
    fit.slope_se = std::sqrt(s2 / sxx);
    fit.intercept_se = std::sqrt(s2 * (1.0 / sw + xbar * xbar / sxx));
  }
  return fit;
}

struct TailCheck {
  bool pass = true;
  double empirical = 0.0;
  double bound = 0.0;
  double se = 0.0;
  double margin = 0.0;  ///< bound + 3 se - empirical
};

/// P(|N| >= a k) <= 2 (f_l1 / (2 pi a))^k, judged with 3 binomial standard errors.
inline TailCheck tail_bound_check(const Histogram& h, long a, long k, double f_l1) {
  if (a < 1 || k < 1) throw std::invalid_argument("tail_bound_check: a and k must be >= 1");
  const std::uint64_t n = histogram_total(h);
  if (n == 0) throw std::invalid_argument("tail_bound_check: empty sample");
  std::uint64_t hits = 0;
  for (const auto& [v, c] : h) {
    if (std::labs(v) >= a * k) hits += c;
  }
  TailCheck r;
  r.empirical = static_cast<double>(hits) / static_cast<double>(n);
  r.bound = 2.0 * std::pow(f_l1 / (2.0 * std::numbers::pi * static_cast<double>(a)), static_cast<double>(k));
  r.se = std::sqrt(r.empirical * (1.0 - r.empirical) / static_cast<double>(n));
  r.margin = r.bound + 3.0 * r.se - r.empirical;
  r.pass = r.margin >= 0.0;
  return r;
}

inline TailCheck tail_bound_check(std::span<const long> samples, long a, long k, double f_l1) {
  return tail_bound_check(histogram_of(samples), a, k, f_l1);
}

struct TwoSampleReport {
  double ks_stat = 0.0;
  double wasserstein1 = 0.0;
  std::uint64_t n1 = 0;
  std::uint64_t n2 = 0;
  double threshold = 0.0;

  bool passes() const { return ks_stat <= threshold; }
};

/// KS and W1 between two integer laws given as histograms.
inline TwoSampleReport ks_two_sample(const Histogram& a, const Histogram& b, double threshold = 0.0) {
  TwoSampleReport r;
  r.n1 = histogram_total(a);
  r.n2 = histogram_total(b);
  r.threshold = threshold;
  if (r.n1 == 0 || r.n2 == 0) throw std::invalid_argument("ks_two_sample: both samples must be nonempty");
  std::vector<long> support;
  for (const auto& [v, c] : a) support.push_back(v);
  for (const auto& [v, c] : b) support.push_back(v);
  std::sort(support.begin(), support.end());
  support.erase(std::unique(support.begin(), support.end()), support.end());
  std::uint64_t ca = 0, cb = 0;
  double w1 = 0.0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const long v = support[i];
    if (auto it = a.find(v); it != a.end()) ca += it->second;
    if (auto it = b.find(v); it != b.end()) cb += it->second;
    const double diff = std::abs(static_cast<double>(ca) / static_cast<double>(r.n1) -
                                 static_cast<double>(cb) / static_cast<double>(r.n2));
    r.ks_stat = std::max(r.ks_stat, diff);
    if (i + 1 < support.size()) w1 += diff * static_cast<double>(support[i + 1] - v);
  }
  r.wasserstein1 = w1;
  return r;
}

inline TwoSampleReport ks_two_sample(std::span<const long> a, std::span<const long> b, double threshold = 0.0) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: both samples must be nonempty");
  return ks_two_sample(histogram_of(a), histogram_of(b), threshold);
}

/// KS statistic for real-valued samples.
inline double ks_continuous(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_continuous: both samples must be nonempty");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

struct LipschitzReport {
  bool pass = true;
  double mean_abs_diff = 0.0;
  double mean_abs_diff_se = 0.0;
  double bound = 0.0;
  double mean_diff = 0.0;
  double mean_diff_se = 0.0;
  double expected_mean_diff = 0.0;
  double wasserstein1 = 0.0;
};

/// Coupled samples n1[i] = N(lambda1), n2[i] = N(lambda2) from one path each.
/// Passes iff E|N2 - N1| <= (lambda2 - lambda1) f_l1 + 3 se and the mean
/// increment is within 3 se of (lambda2 - lambda1) f_l1 / (2 pi).
inline LipschitzReport lipschitz_continuity_check(std::span<const long> n1, std::span<const long> n2, double lambda1,
                                                  double lambda2, double f_l1 = 1.0) {
  if (n1.size() != n2.size() || n1.empty()) {
    throw std::invalid_argument("lipschitz_continuity_check: coupled samples must be nonempty and paired");
  }
  if (lambda2 < lambda1) throw std::invalid_argument("lipschitz_continuity_check: need lambda1 <= lambda2");
  const double n = static_cast<double>(n1.size());
  double s_abs = 0.0, s_abs2 = 0.0, s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n1.size(); ++i) {
    const double d = static_cast<double>(n2[i] - n1[i]);
    s += d;
    s2 += d * d;
    s_abs += std::abs(d);
    s_abs2 += d * d;
  }
  LipschitzReport r;
  r.mean_abs_diff = s_abs / n;
  r.mean_diff = s / n;
  const double var_abs = n > 1 ? std::max(0.0, (s_abs2 - n * r.mean_abs_diff * r.mean_abs_diff) / (n - 1.0)) : 0.0;
  const double var = n > 1 ? std::max(0.0, (s2 - n * r.mean_diff * r.mean_diff) / (n - 1.0)) : 0.0;
  r.mean_abs_diff_se = std::sqrt(var_abs / n);
  r.mean_diff_se = std::sqrt(var / n);
  r.bound = (lambda2 - lambda1) * f_l1;
  r.expected_mean_diff = r.bound / (2.0 * std::numbers::pi);
  r.wasserstein1 = ks_two_sample(n1, n2).wasserstein1;
  const bool lipschitz_ok = r.mean_abs_diff <= r.bound + 3.0 * r.mean_abs_diff_se;
  const bool mean_ok = std::abs(r.mean_diff - r.expected_mean_diff) <= 3.0 * r.mean_diff_se ||
                       (r.mean_diff_se == 0.0 && r.mean_diff == r.expected_mean_diff);
  r.pass = lipschitz_ok && mean_ok && r.wasserstein1 <= r.mean_abs_diff + 1e-12;
  return r;
}

}  // namespace sinebeta::pointstats
