#ifndef SPEAR_ANALYSIS_HPP
#define SPEAR_ANALYSIS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "spear/common.hpp"
#include "spear/prob.hpp"

// Closed-form predictors for the sampling cost and failure probability of the
// kernel-sampling attack, plus Monte-Carlo validators that cross-check them
// under the i.i.d. half-Gaussian-times-Bernoulli gradient model.
namespace spear::analysis {

// Lower-bound constant for the probability that a random sign-pattern matrix
// is non-singular: 1 - kSingularityBase^{b-1}.
inline constexpr double kSingularityBase = 0.939;
inline constexpr double kEulerMascheroni = 0.5772156649015329;

// Lower bound on the probability that a random (b-1)-row submatrix of the
// pre-activation gradient has exactly one all-zero column and full rank:
// q = (b / 2^{b-1}) * (1 - 0.939^{b-1}).
inline double success_prob_lower(int b) {
  require(b >= 2, "success_prob_lower: defined for b >= 2 (b = 1 has a closed form)");
  return static_cast<double>(b) * std::exp2(-(b - 1)) *
         (-std::expm1((b - 1) * std::log(kSingularityBase)));
}

inline double harmonic(int b) {
  double h = 0.0;
  for (int i = 1; i <= b; ++i) h += 1.0 / static_cast<double>(i);
  return h;
}

// Expected number of sampled submatrices until all b correct directions have
// been seen: coupon collector over the b columns at per-sample success rate
// q, i.e. b * H_b / q with the exact harmonic sum.
inline double expected_samples(int b) {
  return static_cast<double>(b) * harmonic(b) / success_prob_lower(b);
}

// Number of samples sufficient to recover all b directions with probability
// 1 - p, from the normal approximation of the sampling process: solve
// Phi((c - n q) / sqrt(n q (1-q))) = p*/2 as a quadratic in sqrt(n), where
// c = b log(2b / p*) and p* = p - 1 + (1 - p_fr)^b discounts the chance that
// the sparsity filter permanently rejects a correct direction.
inline std::int64_t high_prob_samples(int b, double p, double p_fr) {
  require(b >= 5, "high_prob_samples: normal approximation needs b >= 5");
  require(p > 0.0 && p < 1.0, "high_prob_samples: p must be in (0,1)");
  require(p_fr >= 0.0 && p_fr < 1.0, "high_prob_samples: p_fr must be in [0,1)");
  const double p_star = p - 1.0 + std::pow(1.0 - p_fr, b);
  if (p_star <= 0.0)
    throw std::invalid_argument(
        "high_prob_samples: false-rejection floor exceeds the failure budget");
  const double q = success_prob_lower(b);
  const double c = static_cast<double>(b) * std::log(2.0 * b / p_star);
  const double z = prob::norm_quantile(p_star / 2.0);  // negative
  // u^2 + z sqrt(1-q) u - c = 0 with u = sqrt(n q); take the positive root.
  const double u = 0.5 * (-z * std::sqrt(1.0 - q) +
                          std::sqrt(z * z * (1.0 - q) + 4.0 * c));
  return static_cast<std::int64_t>(std::ceil(u * u / q));
}

// P[at least one full-rank all-zero-column submatrix exists for a fixed
// column] = sum_{k=b-1}^{m} C(m,k) 2^{-m} (1 - base^{(b-1) C(k,b-1)}).
// The exponent (b-1)*C(k,b-1) can be astronomically large, so base^E is
// evaluated as exp(E ln base) with E in the log domain; overflowing E
// cleanly underflows the power to zero.
inline double column_recovery_prob(int b, int m, double base) {
  const double log_base = std::log(base);
  double complement = std::exp(prob::log_binom_cdf(b - 2, m, 0.5));
  for (int k = b - 1; k <= m; ++k) {
    const double log_count = std::log(static_cast<double>(b - 1)) + prob::log_binom_coeff(k, b - 1);
    double log_pow;  // log(base^{(b-1) C(k,b-1)})
    if (log_count > 709.0) {
      log_pow = -std::numeric_limits<double>::infinity();
    } else {
      log_pow = std::exp(log_count) * log_base;
    }
    const double log_pmf = prob::log_binom_coeff(m, k) - m * M_LN2;
    complement += std::exp(log_pmf + log_pow);
  }
  return 1.0 - complement;
}

struct FailureEstimate {
  double upper_bound = 0.0;  // union bound over the b columns
  double approx = 0.0;       // independence approximation with base 1/2
  int b = 0;
  int m = 0;
  double p_fr = 0.0;
};

// Probability of the attack failing despite exhaustive submatrix sampling.
// Both estimates add the chance 1 - (1-p_fr)^b that the sparsity filter
// rejects some correct direction, and are clamped to [0,1].
inline FailureEstimate failure_prob_bounds(int b, int m, double p_fr) {
  require(b >= 2 && b <= m, "failure_prob_bounds: need 2 <= b <= m");
  require(p_fr >= 0.0 && p_fr <= 1.0, "failure_prob_bounds: p_fr in [0,1]");
  FailureEstimate est;
  est.b = b;
  est.m = m;
  est.p_fr = p_fr;
  const double filter_term =
      (p_fr >= 1.0) ? 1.0 : -std::expm1(b * std::log1p(-p_fr));
  const double s_ub = column_recovery_prob(b, m, kSingularityBase);
  est.upper_bound = std::clamp(b * (1.0 - s_ub) + filter_term, 0.0, 1.0);
  const double s_approx = column_recovery_prob(b, m, 0.5);
  double miss_all;  // 1 - s^b
  if (s_approx <= 0.0) {
    miss_all = 1.0;
  } else {
    miss_all = -std::expm1(b * std::log(s_approx));
  }
  est.approx = std::clamp(miss_all + filter_term, 0.0, 1.0);
  return est;
}

struct EmpiricalFailure {
  int failures = 0;
  int trials = 0;
  double rate = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 1.0;
};

namespace detail {

// Draws the model gradient: entries zeta * |eps| with zeta ~ Bernoulli(1/2)
// and eps ~ N(0,1); exact zeros with probability one half.
inline Matrix sample_model_gradient(int m, int b, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  Matrix g(m, b);
  for (int j = 0; j < b; ++j)
    for (int i = 0; i < m; ++i) g(i, j) = coin(rng) ? std::abs(gauss(rng)) : 0.0;
  return g;
}

// True when some (b-1)-subset of the given rows forms a full-rank submatrix
// of g restricted to the columns other than skip_col. Enumerates subsets in
// lexicographic order; generic draws succeed on the first one.
inline bool has_full_rank_submatrix(const Matrix& g, const std::vector<int>& zero_rows,
                                    int skip_col) {
  const int b = static_cast<int>(g.cols());
  const int r = b - 1;
  const int k = static_cast<int>(zero_rows.size());
  if (k < r) return false;
  std::vector<int> comb(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) comb[static_cast<std::size_t>(i)] = i;
  Matrix sub(r, r);
  for (;;) {
    for (int i = 0; i < r; ++i) {
      int c = 0;
      for (int j = 0; j < b; ++j) {
        if (j == skip_col) continue;
        sub(i, c++) = g(zero_rows[static_cast<std::size_t>(comb[static_cast<std::size_t>(i)])], j);
      }
    }
    if (r == 0) return true;
    Eigen::JacobiSVD<Matrix> svd(sub);
    const Vector& sv = svd.singularValues();
    if (sv(0) > 0.0 && sv(r - 1) > 1e-9 * sv(0)) return true;
    // next combination
    int i = r - 1;
    while (i >= 0 && comb[static_cast<std::size_t>(i)] == k - r + i) --i;
    if (i < 0) return false;
    ++comb[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < r; ++j)
      comb[static_cast<std::size_t>(j)] = comb[static_cast<std::size_t>(j - 1)] + 1;
  }
}

}  // namespace detail

// Empirical failure rate under exhaustive submatrix enumeration: a trial
// fails when some column of a model-drawn gradient has no full-rank all-zero-
// column submatrix, or falls below the tau sparsity threshold. Guarded to
// grids where C(m, b-1) stays enumerable.
inline EmpiricalFailure validate_failure_empirically(int b, int m, int trials,
                                                     std::uint64_t seed, double tau = 0.0) {
  require(b >= 2 && b <= m, "validate_failure_empirically: need 2 <= b <= m");
  require(trials >= 1, "validate_failure_empirically: empty experiment");
  require(prob::log_binom_coeff(m, b - 1) <= std::log(1e6),
          "validate_failure_empirically: C(m, b-1) exceeds the tractability guard");
  const int min_zeros = static_cast<int>(std::ceil(tau * m - 1e-9));

  std::vector<char> failed(static_cast<std::size_t>(trials), 0);
  parallel_for(trials, [&](std::int64_t t) {
    auto rng = make_rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
    const Matrix g = detail::sample_model_gradient(m, b, rng);
    for (int col = 0; col < b; ++col) {
      std::vector<int> zero_rows;
      for (int i = 0; i < m; ++i) {
        if (g(i, col) == 0.0) zero_rows.push_back(i);
      }
      const bool filtered = static_cast<int>(zero_rows.size()) < min_zeros;
      if (filtered || !detail::has_full_rank_submatrix(g, zero_rows, col)) {
        failed[static_cast<std::size_t>(t)] = 1;
        break;
      }
    }
  });

  EmpiricalFailure out;
  out.trials = trials;
  for (char f : failed) out.failures += f;
  out.rate = static_cast<double>(out.failures) / static_cast<double>(trials);
  const prob::Interval ci = prob::clopper_pearson(out.failures, trials, 0.95);
  out.ci_lo = ci.lo;
  out.ci_hi = ci.hi;
  return out;
}

}  // namespace spear::analysis

#endif  // SPEAR_ANALYSIS_HPP
