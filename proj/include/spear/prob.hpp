#ifndef SPEAR_PROB_HPP
#define SPEAR_PROB_HPP

#include <cmath>
#include <limits>
#include <stdexcept>

namespace spear::prob {

inline double log_binom_coeff(int n, int k) {
  if (k < 0 || k > n) return -std::numeric_limits<double>::infinity();
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// log P[X <= k] for X ~ Binomial(n, p), accumulated in the log domain so the
// deep lower tail stays accurate for n in the thousands.
inline double log_binom_cdf(int k, int n, double p) {
  if (k < 0) return -std::numeric_limits<double>::infinity();
  if (k >= n) return 0.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return -std::numeric_limits<double>::infinity();
  const double lp = std::log(p);
  const double lq = std::log1p(-p);
  double acc = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= k; ++i) {
    const double term = log_binom_coeff(n, i) + i * lp + (n - i) * lq;
    if (term > acc) {
      acc = term + std::log1p(std::exp(acc - term));
    } else {
      acc += std::log1p(std::exp(term - acc));
    }
  }
  return std::min(acc, 0.0);
}

inline double binom_cdf(int k, int n, double p) { return std::exp(log_binom_cdf(k, n, p)); }

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

// Inverse standard normal CDF, Wichura's PPND16 (algorithm AS 241).
// Accurate to ~1e-16 over the full double range of p in (0, 1).
inline double norm_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("norm_quantile: p must be in (0,1)");
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                 6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
               1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
             1.3314166789178437745e+2) * r + 3.3871328727963666080e+0) /
           (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                 3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
               5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
             4.2313330701600911252e+1) * r + 1.0);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double value;
  if (r <= 5.0) {
    r -= 1.6;
    value = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                  2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
                3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
              4.63033784615654529590e+0) * r + 1.42343711074968357734e+0) /
            (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                  1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
              2.05319162663775882187e+0) * r + 1.0);
  } else {
    r -= 5.0;
    value = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                  1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
              5.46378491116411436990e+0) * r + 6.65790464350110377720e+0) /
            (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                  1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
              5.99832206555887937690e-1) * r + 1.0);
  }
  return q < 0.0 ? -value : value;
}

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

// Exact (Clopper-Pearson) confidence interval for a binomial proportion,
// found by bisection on the binomial CDF.
inline Interval clopper_pearson(int successes, int trials, double confidence = 0.95) {
  if (trials <= 0) throw std::invalid_argument("clopper_pearson: trials must be positive");
  if (successes < 0 || successes > trials)
    throw std::invalid_argument("clopper_pearson: successes out of range");
  const double alpha = 1.0 - confidence;
  Interval iv;
  if (successes == 0) {
    iv.lo = 0.0;
  } else {
    // largest p with P[X >= successes] = alpha/2, i.e. CDF(successes-1) = 1 - alpha/2
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (binom_cdf(successes - 1, trials, mid) > 1.0 - alpha / 2.0) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    iv.lo = 0.5 * (lo + hi);
  }
  if (successes == trials) {
    iv.hi = 1.0;
  } else {
    // smallest p with P[X <= successes] = alpha/2
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (binom_cdf(successes, trials, mid) > alpha / 2.0) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    iv.hi = 0.5 * (lo + hi);
  }
  return iv;
}

}  // namespace spear::prob

#endif  // SPEAR_PROB_HPP
