#include "spear/fcnn.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "spear/common.hpp"

using namespace spear;
using fcnn::LayerSpec;

namespace {

std::vector<LayerSpec> chain(std::initializer_list<int> dims) {
  std::vector<LayerSpec> specs;
  auto it = dims.begin();
  int prev = *it++;
  for (; it != dims.end(); ++it) {
    specs.push_back({prev, *it, true});
    prev = *it;
  }
  if (!specs.empty()) specs.back().has_relu = false;
  return specs;
}

fcnn::Batch random_batch(int n, int b, int num_classes, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, num_classes - 1);
  fcnn::Batch batch;
  batch.inputs.resize(n, b);
  for (Index j = 0; j < b; ++j)
    for (Index i = 0; i < n; ++i) batch.inputs(i, j) = gauss(rng);
  batch.labels.resize(static_cast<std::size_t>(b));
  for (auto& l : batch.labels) l = label(rng);
  return batch;
}

// max over layers of max|analytic - numeric| / max|analytic| per layer
double grad_rel_error(const fcnn::GradientCapture& a, const fcnn::GradientCapture& f) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const double scale_w = std::max(a.layers[l].weight_grad.cwiseAbs().maxCoeff(), 1e-12);
    worst = std::max(worst,
                     (a.layers[l].weight_grad - f.layers[l].weight_grad).cwiseAbs().maxCoeff() /
                         scale_w);
    const double scale_b = std::max(a.layers[l].bias_grad.cwiseAbs().maxCoeff(), 1e-12);
    worst = std::max(worst,
                     (a.layers[l].bias_grad - f.layers[l].bias_grad).cwiseAbs().maxCoeff() /
                         scale_b);
  }
  return worst;
}

}  // namespace

TEST(InitNetwork, BoundsFollowFanIn) {
  const auto params = fcnn::init_network({{4, 3, true}}, 0);
  ASSERT_EQ(params.layers.size(), 1u);
  EXPECT_EQ(params.layers[0].weight.rows(), 3);
  EXPECT_EQ(params.layers[0].weight.cols(), 4);
  EXPECT_LE(params.layers[0].weight.cwiseAbs().maxCoeff(), 0.5);  // 1/sqrt(4)
  EXPECT_LE(params.layers[0].bias.cwiseAbs().maxCoeff(), 0.5);
}

TEST(InitNetwork, DeterministicUnderSeed) {
  const auto a = fcnn::init_network(chain({6, 5, 3}), 42);
  const auto b = fcnn::init_network(chain({6, 5, 3}), 42);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_TRUE((a.layers[l].weight.array() == b.layers[l].weight.array()).all());
    EXPECT_TRUE((a.layers[l].bias.array() == b.layers[l].bias.array()).all());
  }
  const auto c = fcnn::init_network(chain({6, 5, 3}), 43);
  EXPECT_FALSE((a.layers[0].weight.array() == c.layers[0].weight.array()).all());
}

TEST(InitNetwork, RejectsBrokenChain) {
  EXPECT_THROW(fcnn::init_network({{4, 3, true}, {5, 3, false}}, 0), std::invalid_argument);
  EXPECT_THROW(fcnn::init_network({{0, 3, true}}, 0), std::invalid_argument);
}

TEST(Forward, IdentityLayerClampsNegatives) {
  fcnn::NetworkParams params;
  params.layers.push_back({Matrix::Identity(2, 2), Vector::Zero(2)});
  params.layers.push_back({Matrix::Identity(2, 2), Vector::Zero(2)});  // head
  Matrix x(2, 2);
  x << 1, -1, 2, 3;
  const auto trace = fcnn::forward(params, x, {0, 1});
  EXPECT_TRUE(trace.preact[0].isApprox(x));
  Matrix expected(2, 2);
  expected << 1, 0, 2, 3;
  EXPECT_TRUE(trace.act[0].isApprox(expected));
}

TEST(Forward, ZeroColumnStaysZeroWithoutBias) {
  auto params = fcnn::init_network(chain({4, 5, 3}), 7);
  for (auto& layer : params.layers) layer.bias.setZero();
  Matrix x = Matrix::Random(4, 3);
  x.col(1).setZero();
  const auto trace = fcnn::forward(params, x, {0, 1, 2});
  EXPECT_LT(trace.preact[0].col(1).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Forward, ReluHoldsElementwise) {
  const auto params = fcnn::init_network(chain({8, 10, 9, 5}), 3);
  const auto batch = random_batch(8, 4, 5, 11);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  for (int l = 0; l + 1 < params.depth(); ++l) {
    const Matrix expected = trace.preact[static_cast<std::size_t>(l)].cwiseMax(0.0);
    EXPECT_TRUE(trace.act[static_cast<std::size_t>(l)].isApprox(expected));
  }
  EXPECT_TRUE(std::isfinite(trace.loss));
  EXPECT_GT(trace.loss, 0.0);
}

TEST(Forward, RejectsDimensionMismatch) {
  const auto params = fcnn::init_network(chain({4, 3}), 0);
  EXPECT_THROW(fcnn::forward(params, Matrix::Zero(5, 2), {0, 1}), std::invalid_argument);
}

TEST(Backward, BiasGradientEqualsPreactRowSums) {
  const auto params = fcnn::init_network(chain({6, 8, 7, 4}), 5);
  const auto batch = random_batch(6, 3, 4, 17);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  const auto capture = fcnn::backward(params, trace, batch.inputs, batch.labels);
  for (const auto& layer : capture.layers) {
    const Vector rowsum = layer.preact_grad.rowwise().sum();
    EXPECT_LT((layer.bias_grad - rowsum).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Backward, WeightGradientHasRankAtMostBatchSize) {
  const auto params = fcnn::init_network(chain({16, 32, 4}), 9);
  const auto batch = random_batch(16, 3, 4, 23);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  const auto capture = fcnn::backward(params, trace, batch.inputs, batch.labels);
  Eigen::BDCSVD<Matrix> svd(capture.layers[0].weight_grad);
  const Vector& sv = svd.singularValues();
  ASSERT_GT(sv(0), 0.0);
  for (Index i = 3; i < sv.size(); ++i) EXPECT_LT(sv(i), 1e-9 * sv(0));
}

TEST(Backward, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto params = fcnn::init_network(chain({6, 8, 5}), seed);
    const auto batch = random_batch(6, 3, 5, seed + 100);
    const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
    const auto analytic = fcnn::backward(params, trace, batch.inputs, batch.labels);
    const auto numeric = fcnn::finite_diff_grad(params, batch.inputs, batch.labels, 1e-6);
    EXPECT_LT(grad_rel_error(analytic, numeric), 1e-5) << "seed " << seed;
  }
}

TEST(FiniteDiff, MatchesHandComputedTwoClassGradient) {
  // single linear layer, scalar input, two logits; label 0:
  // loss = log(1 + exp(z1 - z0)), dL/dw_k = (p_k - [k==0]) * x
  fcnn::NetworkParams params;
  Matrix w(2, 1);
  w << 0.3, -0.2;
  Vector bias(2);
  bias << 0.1, 0.4;
  params.layers.push_back({w, bias});
  Matrix x(1, 1);
  x << 1.7;
  const auto numeric = fcnn::finite_diff_grad(params, x, {0}, 1e-6);
  const double z0 = 0.3 * 1.7 + 0.1, z1 = -0.2 * 1.7 + 0.4;
  const double p0 = std::exp(z0) / (std::exp(z0) + std::exp(z1));
  const double p1 = 1.0 - p0;
  EXPECT_NEAR(numeric.layers[0].weight_grad(0, 0), (p0 - 1.0) * 1.7, 1e-8);
  EXPECT_NEAR(numeric.layers[0].weight_grad(1, 0), p1 * 1.7, 1e-8);
  EXPECT_NEAR(numeric.layers[0].bias_grad(0), p0 - 1.0, 1e-8);
  EXPECT_NEAR(numeric.layers[0].bias_grad(1), p1, 1e-8);
}

TEST(FiniteDiff, SecondOrderConvergence) {
  const auto params = fcnn::init_network(chain({5, 6, 3}), 2);
  const auto batch = random_batch(5, 2, 3, 31);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  const auto analytic = fcnn::backward(params, trace, batch.inputs, batch.labels);
  const double coarse =
      grad_rel_error(analytic, fcnn::finite_diff_grad(params, batch.inputs, batch.labels, 2e-2));
  const double fine =
      grad_rel_error(analytic, fcnn::finite_diff_grad(params, batch.inputs, batch.labels, 1e-2));
  EXPECT_GT(coarse / fine, 2.5);  // ~4x for a halved central-difference step
  EXPECT_LT(coarse / fine, 6.0);
}

TEST(FiniteDiff, AgreesWithBackwardOnSingleExample) {
  const auto params = fcnn::init_network(chain({3, 4, 2}), 8);
  const auto batch = random_batch(3, 1, 2, 77);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  const auto analytic = fcnn::backward(params, trace, batch.inputs, batch.labels);
  const auto numeric = fcnn::finite_diff_grad(params, batch.inputs, batch.labels, 1e-6);
  EXPECT_LT(grad_rel_error(analytic, numeric), 1e-6);
}

TEST(ClipAndNoise, NoOpConfigurationIsMean) {
  const auto params = fcnn::init_network(chain({5, 6, 3}), 1);
  const auto batch = random_batch(5, 3, 3, 13);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  const auto capture = fcnn::backward(params, trace, batch.inputs, batch.labels, true);
  ASSERT_EQ(capture.per_example.size(), 3u);

  const auto out = fcnn::clip_and_noise(capture.per_example, {});
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    Matrix mean = Matrix::Zero(out.layers[l].weight_grad.rows(), out.layers[l].weight_grad.cols());
    for (const auto& g : capture.per_example) mean += g.layers[l].weight_grad;
    mean /= 3.0;
    EXPECT_LT((out.layers[l].weight_grad - mean).cwiseAbs().maxCoeff(), 1e-14);
    // per-example gradients of the mean loss average to the batch gradient
    EXPECT_LT((out.layers[l].weight_grad - capture.layers[l].weight_grad).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(ClipAndNoise, LargeClipNormLeavesMeanUntouched) {
  const auto params = fcnn::init_network(chain({4, 5, 2}), 6);
  const auto batch = random_batch(4, 2, 2, 19);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  const auto capture = fcnn::backward(params, trace, batch.inputs, batch.labels, true);
  double max_norm = 0.0;
  for (const auto& g : capture.per_example)
    max_norm = std::max(max_norm, fcnn::composite_norm(g));
  fcnn::DpConfig dp;
  dp.clip_norm = max_norm * 2.0;
  const auto clipped = fcnn::clip_and_noise(capture.per_example, dp);
  const auto plain = fcnn::clip_and_noise(capture.per_example, {});
  for (std::size_t l = 0; l < clipped.layers.size(); ++l) {
    EXPECT_LT((clipped.layers[l].weight_grad - plain.layers[l].weight_grad).cwiseAbs().maxCoeff(),
              1e-15);
  }
}

TEST(ClipAndNoise, ScalesOnlyOverBudgetExamples) {
  const auto params = fcnn::init_network(chain({4, 5, 2}), 21);
  const auto batch = random_batch(4, 2, 2, 22);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  auto capture = fcnn::backward(params, trace, batch.inputs, batch.labels, true);

  // rescale the two captures so their norms are exactly 2C and C/2
  const double C = 0.5;
  const double n0 = fcnn::composite_norm(capture.per_example[0]);
  const double n1 = fcnn::composite_norm(capture.per_example[1]);
  for (auto& layer : capture.per_example[0].layers) {
    layer.weight_grad *= 2.0 * C / n0;
    layer.bias_grad *= 2.0 * C / n0;
  }
  for (auto& layer : capture.per_example[1].layers) {
    layer.weight_grad *= 0.5 * C / n1;
    layer.bias_grad *= 0.5 * C / n1;
  }
  fcnn::DpConfig dp;
  dp.clip_norm = C;
  const auto out = fcnn::clip_and_noise(capture.per_example, dp);
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    const Matrix expected = 0.5 * (0.5 * capture.per_example[0].layers[l].weight_grad +
                                   capture.per_example[1].layers[l].weight_grad);
    EXPECT_LT((out.layers[l].weight_grad - expected).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(ClipAndNoise, NoiseIsSeededAndDeterministic) {
  const auto params = fcnn::init_network(chain({4, 5, 2}), 2);
  const auto batch = random_batch(4, 2, 2, 3);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  const auto capture = fcnn::backward(params, trace, batch.inputs, batch.labels, true);
  fcnn::DpConfig dp;
  dp.noise_sigma = 1e-3;
  dp.noise_seed = 99;
  const auto a = fcnn::clip_and_noise(capture.per_example, dp);
  const auto b = fcnn::clip_and_noise(capture.per_example, dp);
  dp.noise_seed = 100;
  const auto c = fcnn::clip_and_noise(capture.per_example, dp);
  EXPECT_TRUE(a.layers[0].weight_grad.isApprox(b.layers[0].weight_grad, 0.0));
  EXPECT_FALSE(a.layers[0].weight_grad.isApprox(c.layers[0].weight_grad, 1e-12));
}

TEST(ClipAndNoise, RequiresPerExampleCaptures) {
  EXPECT_THROW(fcnn::clip_and_noise({}, {}), std::invalid_argument);
}

TEST(FedAvg, SingleEpochTelescopesToPlainGradient) {
  const auto params = fcnn::init_network(chain({6, 8, 3}), 4);
  const auto batch = random_batch(6, 4, 3, 41);
  const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
  const auto grad = fcnn::backward(params, trace, batch.inputs, batch.labels);
  fcnn::FedAvgConfig fed;
  fed.epochs = 1;
  fed.learning_rate = 0.05;
  const auto delta = fcnn::fedavg_delta(params, batch, fed);
  for (std::size_t l = 0; l < grad.layers.size(); ++l) {
    EXPECT_LT((delta.layers[l].weight_grad - grad.layers[l].weight_grad).cwiseAbs().maxCoeff(),
              1e-12);
    EXPECT_LT((delta.layers[l].bias_grad - grad.layers[l].bias_grad).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(FedAvg, TwoEpochsMatchExplicitReplay) {
  const auto params = fcnn::init_network(chain({5, 7, 3}), 14);
  const auto batch = random_batch(5, 3, 3, 51);
  fcnn::FedAvgConfig fed;
  fed.epochs = 2;
  fed.learning_rate = 0.02;
  const auto delta = fcnn::fedavg_delta(params, batch, fed);

  // replay by hand
  auto current = params;
  std::vector<fcnn::GradientCapture> steps;
  for (int e = 0; e < 2; ++e) {
    const auto trace = fcnn::forward(current, batch.inputs, batch.labels);
    steps.push_back(fcnn::backward(current, trace, batch.inputs, batch.labels));
    for (int l = 0; l < current.depth(); ++l) {
      current.layers[static_cast<std::size_t>(l)].weight -=
          fed.learning_rate * steps.back().layers[static_cast<std::size_t>(l)].weight_grad;
      current.layers[static_cast<std::size_t>(l)].bias -=
          fed.learning_rate * steps.back().layers[static_cast<std::size_t>(l)].bias_grad;
    }
  }
  for (std::size_t l = 0; l < delta.layers.size(); ++l) {
    const Matrix expected = steps[0].layers[l].weight_grad + steps[1].layers[l].weight_grad;
    EXPECT_LT((delta.layers[l].weight_grad - expected).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(FedAvg, LearningRateCancelsInDelta) {
  const auto params = fcnn::init_network(chain({5, 6, 3}), 33);
  const auto batch = random_batch(5, 2, 3, 61);
  fcnn::FedAvgConfig fast, slow;
  fast.epochs = slow.epochs = 1;
  fast.learning_rate = 0.01;
  slow.learning_rate = 0.001;
  const auto a = fcnn::fedavg_delta(params, batch, fast);
  const auto b = fcnn::fedavg_delta(params, batch, slow);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_LT((a.layers[l].weight_grad - b.layers[l].weight_grad).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(FedAvg, MiniBatchesPartitionWithoutReplacement) {
  const auto params = fcnn::init_network(chain({4, 6, 3}), 71);
  const auto batch = random_batch(4, 5, 3, 72);
  fcnn::FedAvgConfig fed;
  fed.epochs = 3;
  fed.learning_rate = 0.01;
  fed.mini_batch_size = 2;  // 3 mini-batches of sizes 2,2,1 per epoch
  fed.shuffle_seed = 5;
  const auto a = fcnn::fedavg_delta(params, batch, fed);
  const auto b = fcnn::fedavg_delta(params, batch, fed);
  EXPECT_TRUE(a.layers[0].weight_grad.isApprox(b.layers[0].weight_grad, 0.0));
  // the delta still factors through the full batch: rank <= b
  Eigen::BDCSVD<Matrix> svd(a.layers[0].weight_grad);
  const Vector& sv = svd.singularValues();
  for (Index i = 5; i < sv.size(); ++i) EXPECT_LT(sv(i), 1e-9 * sv(0));
}

TEST(ReluSparsity, HalfTheGradientEntriesVanishAtInit) {
  double zero_fraction = 0.0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    const auto params = fcnn::init_network(chain({20, 32, 24, 5}),
                                           static_cast<std::uint64_t>(t));
    const auto batch = random_batch(20, 4, 5, static_cast<std::uint64_t>(t) + 1000);
    const auto trace = fcnn::forward(params, batch.inputs, batch.labels);
    const auto capture = fcnn::backward(params, trace, batch.inputs, batch.labels);
    const Matrix& dz = capture.layers[0].preact_grad;
    zero_fraction += static_cast<double>((dz.array() == 0.0).count()) /
                     static_cast<double>(dz.size());
  }
  zero_fraction /= trials;
  EXPECT_GT(zero_fraction, 0.4);
  EXPECT_LT(zero_fraction, 0.6);
}
