#ifndef SPEAR_SELECTOR_HPP
#define SPEAR_SELECTOR_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "spear/common.hpp"
#include "spear/lowrank.hpp"
#include "spear/sampler.hpp"

// Direction selection: pick the b correct candidates out of the pool by
// first greedily collecting the sparsest rank-increasing directions, then
// swapping pool members in while the sparsity-matching score improves.
namespace spear::selector {

struct LambdaScore {
  std::int64_t matched_nonpositive = 0;  // Z' <= 0 and dZ' == 0
  std::int64_t matched_positive = 0;     // Z' > 0 and dZ' != 0
  std::int64_t total_cells = 0;          // m * b

  double lambda() const {
    return total_cells == 0
               ? 0.0
               : static_cast<double>(matched_nonpositive + matched_positive) /
                     static_cast<double>(total_cells);
  }
  std::int64_t mismatches() const {
    return total_cells - matched_nonpositive - matched_positive;
  }
};

struct LambdaEvaluation {
  LambdaScore score;
  Matrix inputs;       // X'
  Matrix preact_grad;  // dZ'
  lowrank::DisaggregationMatrix disagg;
  bool ill_conditioned = false;
};

// Shared attack state: factors of the observed weight gradient plus the known
// layer parameters and bias gradient.
struct Problem {
  Matrix left;
  Matrix right;
  Matrix weight;
  Vector bias;
  Vector bias_grad;
  double zero_rel_tol = 1e-9;

  int m() const { return static_cast<int>(left.rows()); }
  int b() const { return static_cast<int>(left.cols()); }
};

// Scores a direction set: recover scales from the bias gradient, rebuild
// X' and dZ', and count the cells where the sign of the reconstructed
// pre-activation Z' = W X' + bias agrees with the zero pattern of dZ'.
// Zeroness of dZ' is judged per column against its RMS, with the same
// relative tolerance the sampler uses.
inline LambdaEvaluation compute_lambda(const Problem& problem, const Matrix& directions) {
  const int b = problem.b();
  require(directions.rows() == b && directions.cols() == b,
          "compute_lambda: need exactly b directions");

  LambdaEvaluation eval;
  const Vector scales = lowrank::recover_scales(directions, problem.left, problem.bias_grad);
  eval.disagg = lowrank::assemble_disaggregation(directions, scales);

  lowrank::LowRankFactors factors;
  factors.left = problem.left;
  factors.right = problem.right;
  factors.inferred_b = b;
  const lowrank::Reconstruction rec = lowrank::reconstruct(eval.disagg, factors);
  eval.inputs = rec.inputs;
  eval.preact_grad = rec.preact_grad;
  eval.ill_conditioned = rec.ill_conditioned;

  Matrix z = problem.weight * eval.inputs;
  z.colwise() += problem.bias;

  const int m = problem.m();
  LambdaScore score;
  score.total_cells = static_cast<std::int64_t>(m) * b;
  for (int j = 0; j < b; ++j) {
    const double rms = eval.preact_grad.col(j).norm() / std::sqrt(static_cast<double>(m));
    const double threshold = problem.zero_rel_tol * rms;
    for (int i = 0; i < m; ++i) {
      const bool grad_zero = std::abs(eval.preact_grad(i, j)) <= threshold;
      if (z(i, j) > 0.0) {
        if (!grad_zero) ++score.matched_positive;
      } else {
        if (grad_zero) ++score.matched_nonpositive;
      }
    }
  }
  eval.score = score;
  return eval;
}

namespace detail {

inline Matrix gather_directions(const std::vector<sampler::DirectionCandidate>& pool,
                                const std::vector<int>& selected) {
  Matrix dirs(pool.front().direction.size(), static_cast<Index>(selected.size()));
  for (std::size_t i = 0; i < selected.size(); ++i)
    dirs.col(static_cast<Index>(i)) = pool[static_cast<std::size_t>(selected[i])].direction;
  return dirs;
}

inline bool full_rank(const Matrix& dirs, double rank_tol) {
  Eigen::JacobiSVD<Matrix> svd(dirs);
  const Vector& sv = svd.singularValues();
  return sv(sv.size() - 1) > rank_tol * sv(0);
}

}  // namespace detail

// Candidates in descending sparsity order, admitted only while they raise the
// numerical rank of the selected set, until b are collected.
inline std::vector<int> greedy_init(const std::vector<sampler::DirectionCandidate>& pool,
                                    int b, double rank_tol = 1e-6) {
  require(b >= 1, "greedy_init: b must be positive");
  std::vector<int> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
    return pool[static_cast<std::size_t>(a)].sparsity >
           pool[static_cast<std::size_t>(c)].sparsity;
  });

  std::vector<int> selected;
  Matrix basis;  // orthonormal columns spanning the selected set
  for (int idx : order) {
    const Vector& q = pool[static_cast<std::size_t>(idx)].direction;
    Vector residual = q;
    if (basis.cols() > 0) residual -= basis * (basis.transpose() * q);
    if (residual.norm() > rank_tol) {
      basis.conservativeResize(q.size(), basis.cols() + 1);
      basis.col(basis.cols() - 1) = residual / residual.norm();
      selected.push_back(idx);
      if (static_cast<int>(selected.size()) == b) return selected;
    }
  }
  throw std::runtime_error("greedy_init: insufficient candidates, pool spans fewer than b dimensions");
}

struct SwapResult {
  std::vector<int> selected;
  LambdaEvaluation eval;
  int swaps = 0;
};

// Hill-climb on the sparsity-matching score: each round evaluates every
// (drop i, add j) exchange that keeps the set full rank and applies the single
// best strictly-improving one. Ties break toward the higher-sparsity incoming
// candidate, then the lower pool index. Scores compare as integer match
// counts, so "strictly improving" is exact.
inline SwapResult greedy_swap(const Problem& problem,
                              const std::vector<sampler::DirectionCandidate>& pool,
                              std::vector<int> selected, double rank_tol = 1e-6) {
  SwapResult result;
  result.eval = compute_lambda(problem, detail::gather_directions(pool, selected));
  std::int64_t current = result.eval.score.matched_nonpositive +
                         result.eval.score.matched_positive;
  const std::int64_t total = result.eval.score.total_cells;

  std::vector<char> in_set(pool.size(), 0);
  for (int idx : selected) in_set[static_cast<std::size_t>(idx)] = 1;

  while (current < total) {
    struct Best {
      std::int64_t matched;
      int sparsity;
      int pool_index;
      std::size_t slot;
      LambdaEvaluation eval;
    };
    std::optional<Best> best;
    for (std::size_t slot = 0; slot < selected.size(); ++slot) {
      std::vector<int> trial = selected;
      for (int j = 0; j < static_cast<int>(pool.size()); ++j) {
        if (in_set[static_cast<std::size_t>(j)]) continue;
        trial[slot] = j;
        const Matrix dirs = detail::gather_directions(pool, trial);
        if (!detail::full_rank(dirs, rank_tol)) continue;
        LambdaEvaluation eval = compute_lambda(problem, dirs);
        const std::int64_t matched =
            eval.score.matched_nonpositive + eval.score.matched_positive;
        if (matched <= current) continue;
        const int sparsity = pool[static_cast<std::size_t>(j)].sparsity;
        if (!best || matched > best->matched ||
            (matched == best->matched &&
             (sparsity > best->sparsity ||
              (sparsity == best->sparsity && j < best->pool_index)))) {
          best = Best{matched, sparsity, j, slot, std::move(eval)};
        }
      }
      trial[slot] = selected[slot];
    }
    if (!best) break;
    in_set[static_cast<std::size_t>(selected[best->slot])] = 0;
    in_set[static_cast<std::size_t>(best->pool_index)] = 1;
    selected[best->slot] = best->pool_index;
    current = best->matched;
    result.eval = std::move(best->eval);
    ++result.swaps;
  }
  result.selected = std::move(selected);
  return result;
}

struct ReconstructionResult {
  Matrix inputs;       // X', n x b (empty when nothing was reconstructed)
  Matrix preact_grad;  // dZ'
  lowrank::DisaggregationMatrix disagg;
  LambdaScore score;
  std::int64_t samples_used = 0;
  int pool_size = 0;
  int inferred_b = 0;
  bool converged = false;
  bool ill_conditioned = false;
  std::string status;
};

struct AttackOptions {
  double accept_lambda = 1.0 - 1e-12;  // zero mismatched cells by default
  double rank_rel_tol = 1e-6;          // batch-size inference threshold
};

// End-to-end attack on one linear layer: factorize the weight gradient, then
// alternate chunked direction sampling with the two-stage greedy selection
// until the score clears the acceptance level or the sample budget runs out.
inline ReconstructionResult run_attack(const Matrix& weight_grad, const Vector& bias_grad,
                                       const Matrix& weight, const Vector& bias,
                                       sampler::SamplerConfig cfg,
                                       const AttackOptions& options = {}) {
  const lowrank::LowRankFactors factors = lowrank::decompose(weight_grad, options.rank_rel_tol);
  const int b = factors.inferred_b;
  const int m = static_cast<int>(weight_grad.rows());

  Problem problem{factors.left, factors.right, weight, bias, bias_grad, cfg.zero_rel_tol};

  ReconstructionResult result;
  result.inferred_b = b;

  if (b == 1) {
    // Scalar Q: the scale alone disaggregates the batch.
    Matrix one = Matrix::Ones(1, 1);
    LambdaEvaluation eval = compute_lambda(problem, one);
    result.inputs = std::move(eval.inputs);
    result.preact_grad = std::move(eval.preact_grad);
    result.disagg = std::move(eval.disagg);
    result.score = eval.score;
    result.pool_size = 1;
    result.converged = true;
    result.status = "closed form (batch of one)";
    return result;
  }

  if (cfg.tau == 0.0 && cfg.target_false_reject > 0.0) {
    cfg.tau = sampler::solve_tau(m, cfg.target_false_reject).tau;
  }
  require(cfg.chunk_size >= 1, "run_attack: chunk_size must be positive");
  if (cfg.chunk_size > cfg.max_samples)
    cfg.chunk_size = static_cast<int>(cfg.max_samples);

  const std::int64_t allowed_mismatches = static_cast<std::int64_t>(std::floor(
      (1.0 - options.accept_lambda) * static_cast<double>(m) * b + 1e-9));

  std::vector<sampler::DirectionCandidate> pool;
  std::optional<SwapResult> best;
  std::int64_t samples = 0;
  std::int64_t chunk_index = 0;

  while (samples < cfg.max_samples) {
    sampler::dedup_into(pool, sampler::propose_chunk(factors.left, cfg, chunk_index),
                        cfg.angle_tol);
    ++chunk_index;
    samples += cfg.chunk_size;

    if (static_cast<int>(pool.size()) < b) continue;
    Matrix all(b, static_cast<Index>(pool.size()));
    for (std::size_t i = 0; i < pool.size(); ++i) all.col(static_cast<Index>(i)) = pool[i].direction;
    Eigen::JacobiSVD<Matrix> span(all);
    if (span.singularValues()(b - 1) <= 1e-6 * span.singularValues()(0)) continue;

    SwapResult swap = greedy_swap(problem, pool, greedy_init(pool, b));
    if (!best || swap.eval.score.mismatches() < best->eval.score.mismatches()) {
      best = std::move(swap);
    }
    if (best->eval.score.mismatches() <= allowed_mismatches) {
      result.converged = true;
      break;
    }
  }

  result.samples_used = samples;
  result.pool_size = static_cast<int>(pool.size());
  if (!best) {
    result.status = "insufficient candidates: pool never spanned the batch dimension";
    return result;
  }
  result.inputs = std::move(best->eval.inputs);
  result.preact_grad = std::move(best->eval.preact_grad);
  result.disagg = std::move(best->eval.disagg);
  result.score = best->eval.score;
  result.ill_conditioned = best->eval.ill_conditioned;
  result.status = result.converged ? "accepted" : "sample budget exhausted";
  return result;
}

}  // namespace spear::selector

#endif  // SPEAR_SELECTOR_HPP
