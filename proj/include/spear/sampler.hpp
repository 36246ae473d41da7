#ifndef SPEAR_SAMPLER_HPP
#define SPEAR_SAMPLER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "spear/common.hpp"
#include "spear/prob.hpp"

// Direction-candidate generation: sample row-submatrices of L, take their
// kernels, and keep candidates whose image L*q̄ is sparse enough. A correct
// direction reproduces one sparse column of dZ; a wrong one mixes several
// columns and comes out dense.
namespace spear::sampler {

struct TauResult {
  double tau = 0.0;
  int threshold_count = 0;      // ceil(tau * m); candidates need >= this many zeros
  bool no_safe_threshold = false;
};

// Largest tau = k/m whose Binomial(m, 1/2) lower-tail mass at k stays within
// the false-rejection budget. A correct direction has ~Binomial(m, 1/2) zeros,
// so the filter rejects it with probability at most p_fr.
inline TauResult solve_tau(int m, double false_reject_target) {
  require(m >= 1, "solve_tau: m must be >= 1");
  require(false_reject_target > 0.0 && false_reject_target < 1.0,
          "solve_tau: target must be in (0,1)");
  const double log_target = std::log(false_reject_target);
  TauResult result;
  if (prob::log_binom_cdf(0, m, 0.5) > log_target) {
    // Even an all-dense column would be over budget; no threshold is safe.
    result.no_safe_threshold = true;
    return result;
  }
  int lo = 0, hi = m - 1;  // CDF(m) = 1 > target always
  while (lo < hi) {
    const int mid = lo + (hi - lo + 1) / 2;
    if (prob::log_binom_cdf(mid, m, 0.5) <= log_target) {
      lo = mid;
    } else {
      hi = mid - 1;
    }
  }
  result.tau = static_cast<double>(lo) / static_cast<double>(m);
  result.threshold_count = lo;
  return result;
}

// Exact binomial tail 2^{-m} * sum_{i<=floor(m tau)} C(m,i), log-domain.
inline double false_rejection_prob(double tau, int m) {
  require(m >= 1, "false_rejection_prob: m must be >= 1");
  require(tau >= 0.0 && tau <= 1.0, "false_rejection_prob: tau must be in [0,1]");
  const int k = static_cast<int>(std::floor(tau * m + 1e-12));
  return prob::binom_cdf(k, m, 0.5);
}

struct SamplerConfig {
  std::int64_t max_samples = 200000;
  int chunk_size = 10000;
  double tau = 0.0;
  double target_false_reject = 1e-5;  // used to derive tau when tau == 0
  double zero_rel_tol = 1e-9;
  bool robust_mode = false;
  int submatrix_rows = 0;        // 0 = auto: b-1 normal, b+1 robust
  double kernel_rank_tol = 1e-6;
  double robust_gap_ratio = 0.3;  // sv_b / sv_{b-1} accepted as "rank exactly b-1"
  double angle_tol = 1e-6;
  std::uint64_t seed = 0;

  int rows_for(int b) const {
    if (submatrix_rows > 0) return submatrix_rows;
    return robust_mode ? b + 1 : b - 1;
  }
};

struct DirectionCandidate {
  Vector direction;  // unit norm, sign-canonicalized
  int sparsity = 0;
  std::int64_t sample_index = -1;
  std::vector<int> source_rows;
};

// Largest-|entry| coordinate made positive; ties broken by lowest index.
inline Vector sign_canon(Vector v) {
  Index best = 0;
  double best_abs = -1.0;
  for (Index i = 0; i < v.size(); ++i) {
    const double a = std::abs(v(i));
    if (a > best_abs) {
      best_abs = a;
      best = i;
    }
  }
  if (v(best) < 0.0) v = -v;
  return v;
}

// Kernel of an r x b row-submatrix. Normal mode (r = b-1): the right singular
// vector of the smallest singular value, provided the kernel is
// one-dimensional. Robust mode (r = b+1): the least-squares kernel of the
// overdetermined system, kept only when the numerical rank is exactly b-1 --
// the smallest singular value must sit well below the second smallest.
inline std::optional<Vector> kernel_direction(const Matrix& submatrix, bool robust,
                                              double rank_tol = 1e-6,
                                              double gap_ratio = 0.3) {
  const Index b = submatrix.cols();
  Eigen::JacobiSVD<Matrix> svd(submatrix, Eigen::ComputeFullV);
  const Vector& sv = svd.singularValues();
  const Index nsv = sv.size();
  if (robust) {
    // need sv(b-1) << sv(b-2): rank b-1, one near-null direction
    if (nsv < b || b < 2) return std::nullopt;
    if (sv(b - 2) <= rank_tol * sv(0)) return std::nullopt;
    if (sv(b - 1) > gap_ratio * sv(b - 2)) return std::nullopt;
  } else {
    // r = b-1 rows: kernel is 1-dimensional iff the submatrix has full row rank
    if (nsv >= 1 && sv(0) <= 0.0) return std::nullopt;
    if (nsv >= b) return std::nullopt;  // not an underdetermined system
    if (sv(nsv - 1) <= rank_tol * sv(0)) return std::nullopt;
  }
  return sign_canon(svd.matrixV().col(b - 1));
}

// Entries of v = L * q̄ counted as zero when |v_j| <= zero_rel_tol * rms(v).
inline int sparsity_count(const Matrix& left, const Vector& direction, double zero_rel_tol) {
  const Vector v = left * direction;
  const double rms = v.norm() / std::sqrt(static_cast<double>(v.size()));
  const double threshold = zero_rel_tol * rms;
  int count = 0;
  for (Index i = 0; i < v.size(); ++i) {
    if (std::abs(v(i)) <= threshold) ++count;
  }
  return count;
}

namespace detail {

// r distinct rows of [0, m) via Floyd's sampling; order then sorted so the
// submatrix layout is deterministic.
inline std::vector<int> sample_rows(int m, int r, std::mt19937_64& rng) {
  std::unordered_set<int> chosen;
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(r));
  for (int j = m - r; j < m; ++j) {
    std::uniform_int_distribution<int> dist(0, j);
    const int t = dist(rng);
    if (chosen.insert(t).second) {
      rows.push_back(t);
    } else {
      chosen.insert(j);
      rows.push_back(j);
    }
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace detail

// One chunk of proposal directions. RNG streams are keyed by
// (seed, chunk_index, in-chunk index), so any parallel schedule over chunks
// or samples reproduces the same candidate list.
inline std::vector<DirectionCandidate> propose_chunk(const Matrix& left,
                                                     const SamplerConfig& cfg,
                                                     std::int64_t chunk_index) {
  const int m = static_cast<int>(left.rows());
  const int b = static_cast<int>(left.cols());
  const int r = cfg.rows_for(b);
  require(m >= r, "propose_chunk: network width smaller than submatrix rows");
  require(cfg.chunk_size >= 1, "propose_chunk: chunk_size must be positive");
  const int threshold = static_cast<int>(std::ceil(cfg.tau * m - 1e-9));

  std::vector<std::optional<DirectionCandidate>> slots(
      static_cast<std::size_t>(cfg.chunk_size));
  parallel_for(cfg.chunk_size, [&](std::int64_t s) {
    auto rng = make_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(chunk_index),
                                 static_cast<std::uint64_t>(s)));
    std::vector<int> rows = detail::sample_rows(m, r, rng);
    Matrix sub(r, b);
    for (int i = 0; i < r; ++i) sub.row(i) = left.row(rows[static_cast<std::size_t>(i)]);
    auto dir = kernel_direction(sub, cfg.robust_mode, cfg.kernel_rank_tol,
                                cfg.robust_gap_ratio);
    if (!dir) return;
    const int sparsity = sparsity_count(left, *dir, cfg.zero_rel_tol);
    if (sparsity < threshold) return;
    DirectionCandidate cand;
    cand.direction = std::move(*dir);
    cand.sparsity = sparsity;
    cand.sample_index = chunk_index * cfg.chunk_size + s;
    cand.source_rows = std::move(rows);
    slots[static_cast<std::size_t>(s)] = std::move(cand);
  });

  std::vector<DirectionCandidate> out;
  for (auto& slot : slots) {
    if (slot) out.push_back(std::move(*slot));
  }
  return out;
}

// Greedy dedup in arrival order: a candidate is kept iff its largest |dot|
// against all kept candidates stays below 1 - angle_tol. A duplicate bumps
// the kept candidate's sparsity to the max seen for that direction.
inline void dedup_into(std::vector<DirectionCandidate>& pool,
                       std::vector<DirectionCandidate> candidates, double angle_tol) {
  for (auto& cand : candidates) {
    bool duplicate = false;
    for (auto& kept : pool) {
      if (std::abs(kept.direction.dot(cand.direction)) >= 1.0 - angle_tol) {
        duplicate = true;
        if (cand.sparsity > kept.sparsity) kept.sparsity = cand.sparsity;
        break;
      }
    }
    if (!duplicate) pool.push_back(std::move(cand));
  }
}

inline std::vector<DirectionCandidate> dedup(std::vector<DirectionCandidate> candidates,
                                             double angle_tol) {
  std::vector<DirectionCandidate> pool;
  dedup_into(pool, std::move(candidates), angle_tol);
  return pool;
}

}  // namespace spear::sampler

#endif  // SPEAR_SAMPLER_HPP
