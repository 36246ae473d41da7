#include "spear/sampler.hpp"

#include <cstdint>
#include <cstdlib>

#include <gtest/gtest.h>

#include "spear/common.hpp"
#include "spear/lowrank.hpp"
#include "test_support.hpp"

using namespace spear;

namespace {

// exact lower-tail CDF of Binomial(m, 1/2) in integer arithmetic; m <= 62
long double exact_half_cdf(int k, int m) {
  unsigned long long coeff = 1;  // C(m, 0)
  unsigned long long sum = 0;
  for (int i = 0; i <= k; ++i) {
    sum += coeff;
    coeff = coeff * static_cast<unsigned long long>(m - i) / static_cast<unsigned long long>(i + 1);
  }
  return static_cast<long double>(sum) / std::pow(2.0L, static_cast<long double>(m));
}

}  // namespace

TEST(SolveTau, MatchesPaperScaleSetting) {
  // exact tail: CDF(157; 400) = 9.98e-6 <= 1e-5 < CDF(158) = 1.56e-5
  const auto result = sampler::solve_tau(400, 1e-5);
  EXPECT_FALSE(result.no_safe_threshold);
  EXPECT_EQ(result.threshold_count, 157);
  EXPECT_NEAR(result.tau, 0.3925, 1e-12);
  EXPECT_GE(result.tau, 0.39);
  EXPECT_LE(result.tau, 0.40);
}

TEST(SolveTau, SmallestCaseByHand) {
  const auto result = sampler::solve_tau(1, 0.6);
  EXPECT_FALSE(result.no_safe_threshold);
  EXPECT_EQ(result.threshold_count, 0);  // CDF(0) = 0.5 <= 0.6
  EXPECT_DOUBLE_EQ(result.tau, 0.0);
}

TEST(SolveTau, AgreesWithExactIntegerTail) {
  // largest k with sum_{i<=k} C(20,i)/2^20 <= 1e-3, by exhaustive summation
  int expected = -1;
  for (int k = 0; k <= 20; ++k) {
    if (exact_half_cdf(k, 20) <= 1e-3L) expected = k;
  }
  ASSERT_GE(expected, 0);
  const auto result = sampler::solve_tau(20, 1e-3);
  EXPECT_EQ(result.threshold_count, expected);
  EXPECT_EQ(expected, 2);
}

TEST(SolveTau, FlagsUnreachableBudget) {
  // p_fr below 2^-m: even a fully dense column would be over budget
  const auto result = sampler::solve_tau(10, 1e-4);
  EXPECT_TRUE(result.no_safe_threshold);
  EXPECT_DOUBLE_EQ(result.tau, 0.0);
}

TEST(LogDomainCdf, MatchesExactIntegerArithmetic) {
  // 10 significant digits against the exact rational value, m up to 60
  for (int m : {10, 25, 40, 60}) {
    for (int k = 0; k <= m; k += std::max(1, m / 7)) {
      const long double exact = exact_half_cdf(k, m);
      const double computed = prob::binom_cdf(k, m, 0.5);
      EXPECT_NEAR(computed / static_cast<double>(exact), 1.0, 1e-10)
          << "m=" << m << " k=" << k;
    }
  }
}

TEST(FalseRejection, WholeDistribution) {
  EXPECT_DOUBLE_EQ(sampler::false_rejection_prob(1.0, 17), 1.0);
}

TEST(FalseRejection, SingleTermTail) {
  EXPECT_NEAR(sampler::false_rejection_prob(0.0, 10), std::pow(2.0, -10), 1e-18);
}

TEST(FalseRejection, SolvedTauStaysWithinBudget) {
  const auto result = sampler::solve_tau(400, 1e-5);
  EXPECT_LT(sampler::false_rejection_prob(result.tau, 400), 1e-5);
  // one count higher crosses the budget: the solver sits on the boundary
  EXPECT_GT(sampler::false_rejection_prob((result.threshold_count + 1) / 400.0, 400), 1e-5);
}

TEST(SignCanon, LargestEntryMadePositive) {
  Vector v(3);
  v << 0.1, -0.9, 0.2;
  const Vector c = sampler::sign_canon(v);
  EXPECT_GT(c(1), 0.0);
  EXPECT_NEAR(c(0), -0.1, 1e-15);
  Vector tie(2);
  tie << -0.5, 0.5;  // tie broken by lowest index
  const Vector ct = sampler::sign_canon(tie);
  EXPECT_GT(ct(0), 0.0);
}

TEST(KernelDirection, AxisAlignedKernel) {
  Matrix la(2, 3);
  la << 1, 0, 0, 0, 1, 0;
  const auto dir = sampler::kernel_direction(la, false);
  ASSERT_TRUE(dir.has_value());
  EXPECT_NEAR(std::abs((*dir)(2)), 1.0, 1e-12);
  EXPECT_GT((*dir)(2), 0.0);
}

TEST(KernelDirection, RankDeficientSubmatrixRejected) {
  Matrix la(2, 3);
  la << 1, 2, 3, 1, 2, 3;  // two identical rows: kernel dimension 2
  EXPECT_FALSE(sampler::kernel_direction(la, false).has_value());
}

TEST(KernelDirection, ResidualVanishesOnRandomFullRank) {
  auto rng = make_rng(5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix la(4, 5);
  for (Index j = 0; j < 5; ++j)
    for (Index i = 0; i < 4; ++i) la(i, j) = gauss(rng);
  const auto dir = sampler::kernel_direction(la, false);
  ASSERT_TRUE(dir.has_value());
  EXPECT_LT((la * *dir).norm(), 1e-10);
  EXPECT_NEAR(dir->norm(), 1.0, 1e-12);
}

TEST(SparsityCount, ExactZeros) {
  Matrix left(4, 2);
  left << 1, 5, 0, 5, 0, 5, 1, 5;
  Vector q(2);
  q << 1, 0;
  EXPECT_EQ(sampler::sparsity_count(left, q, 1e-9), 2);  // v = (1,0,0,1)
}

TEST(SparsityCount, AllOnesHasNoZeros) {
  const Matrix left = Matrix::Ones(6, 2);
  Vector q(2);
  q << 1, 0;
  EXPECT_EQ(sampler::sparsity_count(left, q, 1e-9), 0);
}

TEST(SparsityCount, TrueDirectionMatchesColumnZeroCount) {
  const auto problem = testsupport::make_problem(16, 48, 3, 7);
  const auto factors = lowrank::decompose(problem.weight_grad);
  const Matrix dirs = testsupport::true_directions(factors, problem.preact_grad);
  for (Index j = 0; j < 3; ++j) {
    const int expected =
        static_cast<int>((problem.preact_grad.col(j).array() == 0.0).count());
    EXPECT_EQ(sampler::sparsity_count(factors.left, dirs.col(j), 1e-9), expected);
  }
}

TEST(ProposeChunk, FindsEveryTrueDirection) {
  const auto problem = testsupport::make_problem(32, 64, 3, 21);
  const auto factors = lowrank::decompose(problem.weight_grad);
  Matrix dirs = testsupport::true_directions(factors, problem.preact_grad);
  for (Index j = 0; j < dirs.cols(); ++j) dirs.col(j) = sampler::sign_canon(dirs.col(j));

  sampler::SamplerConfig cfg;
  cfg.seed = 90;
  cfg.chunk_size = 10000;
  cfg.tau = sampler::solve_tau(64, cfg.target_false_reject).tau;
  const auto cands = sampler::propose_chunk(factors.left, cfg, 0);
  ASSERT_FALSE(cands.empty());

  for (Index j = 0; j < dirs.cols(); ++j) {
    bool found = false;
    for (const auto& cand : cands) {
      if (std::abs(cand.direction.dot(dirs.col(j))) > 1.0 - 1e-6) {
        found = true;
        break;
      }
    }
    EXPECT_TRUE(found) << "true direction " << j << " missing from 1e4 proposals";
  }
}

TEST(ProposeChunk, DeterministicAcrossWorkerCounts) {
  const auto problem = testsupport::make_problem(16, 40, 3, 33);
  const auto factors = lowrank::decompose(problem.weight_grad);
  sampler::SamplerConfig cfg;
  cfg.seed = 4;
  cfg.chunk_size = 2000;
  cfg.tau = sampler::solve_tau(40, cfg.target_false_reject).tau;

  setenv("SPEAR_THREADS", "1", 1);
  const auto serial = sampler::propose_chunk(factors.left, cfg, 3);
  setenv("SPEAR_THREADS", "4", 1);
  const auto parallel = sampler::propose_chunk(factors.left, cfg, 3);
  unsetenv("SPEAR_THREADS");

  ASSERT_EQ(serial.size(), parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i].sample_index, parallel[i].sample_index);
    EXPECT_TRUE(serial[i].direction.isApprox(parallel[i].direction, 0.0));
    EXPECT_EQ(serial[i].sparsity, parallel[i].sparsity);
    EXPECT_EQ(serial[i].source_rows, parallel[i].source_rows);
  }
}

TEST(ProposeChunk, EmittedCandidatesHaveTinyKernelResidual) {
  const auto problem = testsupport::make_problem(20, 48, 4, 55);
  const auto factors = lowrank::decompose(problem.weight_grad);
  sampler::SamplerConfig cfg;
  cfg.seed = 8;
  cfg.chunk_size = 3000;
  cfg.tau = sampler::solve_tau(48, cfg.target_false_reject).tau;
  const auto cands = sampler::propose_chunk(factors.left, cfg, 0);
  ASSERT_FALSE(cands.empty());
  for (const auto& cand : cands) {
    Matrix sub(static_cast<Index>(cand.source_rows.size()), factors.left.cols());
    for (std::size_t i = 0; i < cand.source_rows.size(); ++i)
      sub.row(static_cast<Index>(i)) = factors.left.row(cand.source_rows[i]);
    EXPECT_LE((sub * cand.direction).norm(), 1e-9 * sub.norm());
  }
}

TEST(ProposeChunk, MixtureDirectionFailsFilterOnWideNetwork) {
  // a normalized sum of two true directions lands near the m/4 zero count,
  // far below the threshold near 0.39 m that a wide network supports
  const auto problem = testsupport::make_problem(32, 400, 4, 77);
  const auto factors = lowrank::decompose(problem.weight_grad);
  const Matrix dirs = testsupport::true_directions(factors, problem.preact_grad);
  const auto tau = sampler::solve_tau(400, 1e-5);
  Vector mixture = dirs.col(0) + dirs.col(1);
  mixture.normalize();
  const int sparsity = sampler::sparsity_count(factors.left, mixture, 1e-9);
  EXPECT_LT(sparsity, tau.threshold_count);
  // while the true directions clear it
  for (Index j = 0; j < dirs.cols(); ++j) {
    EXPECT_GE(sampler::sparsity_count(factors.left, dirs.col(j), 1e-9),
              tau.threshold_count);
  }
}

TEST(Dedup, ExactCopiesCollapse) {
  Vector q(3);
  q << 1, 0, 0;
  sampler::DirectionCandidate a{q, 10, 0, {0, 1}};
  sampler::DirectionCandidate b{q, 14, 5, {2, 3}};
  const auto pool = sampler::dedup({a, b}, 1e-6);
  ASSERT_EQ(pool.size(), 1u);
  EXPECT_EQ(pool[0].sparsity, 14);        // keeps the best sparsity seen
  EXPECT_EQ(pool[0].sample_index, 0);     // and the first arrival
}

TEST(Dedup, SignFlipsCollapseAfterCanon) {
  Vector q(3);
  q << 0.6, -0.8, 0.0;
  const Vector c1 = sampler::sign_canon(q);
  const Vector c2 = sampler::sign_canon(Vector(-q));
  EXPECT_TRUE(c1.isApprox(c2, 0.0));
  const auto pool = sampler::dedup({{c1, 5, 0, {}}, {c2, 5, 1, {}}}, 1e-6);
  EXPECT_EQ(pool.size(), 1u);
}

TEST(Dedup, GroundTruthPoolKeepsAllTrueDirections) {
  const auto problem = testsupport::make_problem(24, 64, 4, 91);
  const auto factors = lowrank::decompose(problem.weight_grad);
  Matrix dirs = testsupport::true_directions(factors, problem.preact_grad);
  for (Index j = 0; j < dirs.cols(); ++j) dirs.col(j) = sampler::sign_canon(dirs.col(j));

  sampler::SamplerConfig cfg;
  cfg.seed = 13;
  cfg.chunk_size = 10000;
  cfg.tau = sampler::solve_tau(64, cfg.target_false_reject).tau;
  const auto pool = sampler::dedup(sampler::propose_chunk(factors.left, cfg, 0), cfg.angle_tol);
  EXPECT_GE(pool.size(), 4u);
  for (Index j = 0; j < dirs.cols(); ++j) {
    bool found = false;
    for (const auto& cand : pool) {
      if (std::abs(cand.direction.dot(dirs.col(j))) > 1.0 - 1e-6) found = true;
    }
    EXPECT_TRUE(found);
  }
}
