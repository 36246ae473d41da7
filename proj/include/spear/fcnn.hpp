#ifndef SPEAR_FCNN_HPP
#define SPEAR_FCNN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "spear/common.hpp"

// Federated-client simulator: fully connected ReLU networks with analytic
// batch gradients, a finite-difference oracle, per-example clipping with
// Gaussian noise, and multi-step local-update deltas.
namespace spear::fcnn {

struct LayerSpec {
  int input_dim = 0;
  int output_dim = 0;
  bool has_relu = true;
};

struct Layer {
  Matrix weight;  // output_dim x input_dim
  Vector bias;    // output_dim
};

struct NetworkParams {
  std::vector<Layer> layers;

  int depth() const { return static_cast<int>(layers.size()); }
  int input_dim() const { return static_cast<int>(layers.front().weight.cols()); }
  int output_dim() const { return static_cast<int>(layers.back().weight.rows()); }
  // ReLU after every layer except the last.
  bool has_relu(int layer) const { return layer + 1 < depth(); }
};

struct Batch {
  Matrix inputs;            // n x b, examples as columns
  std::vector<int> labels;  // length b, class indices

  int size() const { return static_cast<int>(inputs.cols()); }
};

struct ForwardTrace {
  std::vector<Matrix> preact;  // Z_l, one per layer
  std::vector<Matrix> act;     // post-activation per layer (last layer: logits)
  double loss = 0.0;

  const Matrix& logits() const { return preact.back(); }
};

struct LayerGradient {
  Matrix weight_grad;  // dL/dW
  Vector bias_grad;    // dL/db
  Matrix preact_grad;  // dL/dZ, kept as simulator-side ground truth
};

struct GradientCapture {
  std::vector<LayerGradient> layers;
  // Present when requested; entry i is the gradient of the loss restricted to
  // example i alone (batch of size one).
  std::vector<GradientCapture> per_example;
};

struct DpConfig {
  std::optional<double> clip_norm;  // C; absent = no clipping
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

struct FedAvgConfig {
  int epochs = 1;
  double learning_rate = 0.01;
  int mini_batch_size = 0;  // 0 or >= b means full batch
  std::uint64_t shuffle_seed = 0;
};

inline void validate_chain(const std::vector<LayerSpec>& specs) {
  require(!specs.empty(), "network needs at least one layer");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    require(specs[i].input_dim >= 1 && specs[i].output_dim >= 1,
            "layer dimensions must be positive");
    if (i > 0) {
      require(specs[i].input_dim == specs[i - 1].output_dim,
              "layer chain mismatch: output_dim of layer " + std::to_string(i - 1) +
                  " != input_dim of layer " + std::to_string(i));
    }
  }
}

// Weights and biases uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]; keeps
// pre-activations zero-mean so roughly half the ReLU units are active.
inline NetworkParams init_network(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
  validate_chain(specs);
  NetworkParams params;
  auto rng = make_rng(seed);
  for (const auto& spec : specs) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Layer layer;
    layer.weight.resize(spec.output_dim, spec.input_dim);
    for (Index j = 0; j < layer.weight.cols(); ++j)
      for (Index i = 0; i < layer.weight.rows(); ++i) layer.weight(i, j) = dist(rng);
    layer.bias.resize(spec.output_dim);
    for (Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = dist(rng);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

// Mean cross-entropy over the batch, with a log-sum-exp stabilized softmax.
inline double cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
  const Index b = logits.cols();
  require(static_cast<Index>(labels.size()) == b, "labels/batch size mismatch");
  double total = 0.0;
  for (Index j = 0; j < b; ++j) {
    require(labels[j] >= 0 && labels[j] < logits.rows(), "label out of range");
    const double m = logits.col(j).maxCoeff();
    const double lse = m + std::log((logits.col(j).array() - m).exp().sum());
    total += lse - logits(labels[j], j);
  }
  return total / static_cast<double>(b);
}

inline ForwardTrace forward(const NetworkParams& params, const Matrix& X,
                            const std::vector<int>& labels) {
  require(X.rows() == params.input_dim(), "input dimension mismatch");
  require(X.cols() >= 1, "empty batch");
  ForwardTrace trace;
  Matrix a = X;
  for (int l = 0; l < params.depth(); ++l) {
    Matrix z = params.layers[l].weight * a;
    z.colwise() += params.layers[l].bias;
    trace.preact.push_back(z);
    if (params.has_relu(l)) {
      trace.act.push_back(z.cwiseMax(0.0));
    } else {
      trace.act.push_back(z);
    }
    a = trace.act.back();
  }
  trace.loss = cross_entropy(trace.logits(), labels);
  return trace;
}

inline Matrix softmax_columns(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) {
    Eigen::ArrayXd e = (logits.col(j).array() - logits.col(j).maxCoeff()).exp();
    p.col(j) = (e / e.sum()).matrix();
  }
  return p;
}

namespace detail {

inline GradientCapture backward_impl(const NetworkParams& params, const ForwardTrace& trace,
                                     const Matrix& X, const std::vector<int>& labels) {
  const Index b = X.cols();
  const int depth = params.depth();
  GradientCapture capture;
  capture.layers.resize(depth);

  // dL/dlogits for mean cross-entropy: (softmax - onehot) / b
  Matrix dz = softmax_columns(trace.logits());
  for (Index j = 0; j < b; ++j) dz(labels[j], j) -= 1.0;
  dz /= static_cast<double>(b);

  for (int l = depth - 1; l >= 0; --l) {
    const Matrix& layer_input = (l == 0) ? X : trace.act[l - 1];
    LayerGradient& g = capture.layers[l];
    g.preact_grad = dz;
    g.weight_grad = dz * layer_input.transpose();
    g.bias_grad = dz.rowwise().sum();
    if (l > 0) {
      Matrix da = params.layers[l].weight.transpose() * dz;
      dz = da.cwiseProduct(
          (trace.preact[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return capture;
}

}  // namespace detail

// Analytic batch gradients via backprop. With with_per_example set, also runs
// b single-column passes so callers can clip per example.
inline GradientCapture backward(const NetworkParams& params, const ForwardTrace& trace,
                                const Matrix& X, const std::vector<int>& labels,
                                bool with_per_example = false) {
  require(!trace.preact.empty() && trace.preact.front().cols() == X.cols(),
          "trace does not match batch");
  GradientCapture capture = detail::backward_impl(params, trace, X, labels);
  if (with_per_example) {
    const Index b = X.cols();
    capture.per_example.resize(static_cast<std::size_t>(b));
    for (Index j = 0; j < b; ++j) {
      const Matrix xj = X.col(j);
      const std::vector<int> lj{labels[static_cast<std::size_t>(j)]};
      const ForwardTrace tj = forward(params, xj, lj);
      capture.per_example[static_cast<std::size_t>(j)] = detail::backward_impl(params, tj, xj, lj);
    }
  }
  return capture;
}

// Central-difference gradient oracle; O(parameter count) forward passes, so
// meant for small test networks only.
inline GradientCapture finite_diff_grad(const NetworkParams& params, const Matrix& X,
                                        const std::vector<int>& labels, double step) {
  require(step > 0.0, "finite difference step must be positive");
  GradientCapture capture;
  capture.layers.resize(params.depth());
  NetworkParams probe = params;
  const auto loss_at = [&]() { return forward(probe, X, labels).loss; };
  for (int l = 0; l < params.depth(); ++l) {
    Matrix& W = probe.layers[l].weight;
    LayerGradient& g = capture.layers[l];
    g.weight_grad.resize(W.rows(), W.cols());
    for (Index j = 0; j < W.cols(); ++j) {
      for (Index i = 0; i < W.rows(); ++i) {
        const double saved = W(i, j);
        W(i, j) = saved + step;
        const double up = loss_at();
        W(i, j) = saved - step;
        const double down = loss_at();
        W(i, j) = saved;
        g.weight_grad(i, j) = (up - down) / (2.0 * step);
      }
    }
    Vector& bias = probe.layers[l].bias;
    g.bias_grad.resize(bias.size());
    for (Index i = 0; i < bias.size(); ++i) {
      const double saved = bias(i);
      bias(i) = saved + step;
      const double up = loss_at();
      bias(i) = saved - step;
      const double down = loss_at();
      bias(i) = saved;
      g.bias_grad(i) = (up - down) / (2.0 * step);
    }
  }
  return capture;
}

inline double composite_norm(const GradientCapture& g) {
  double sq = 0.0;
  for (const auto& layer : g.layers) {
    sq += layer.weight_grad.squaredNorm();
    sq += layer.bias_grad.squaredNorm();
  }
  return std::sqrt(sq);
}

// Per-example clipping of the composite gradient vector (all layers
// concatenated) by c_i = min(1, C / ||g_i||), mean over examples, then i.i.d.
// Gaussian noise of std sigma on every entry. The same factor c_i touches
// every layer of example i, so column scales cancel later in scale recovery.
inline GradientCapture clip_and_noise(const std::vector<GradientCapture>& per_example,
                                      const DpConfig& dp) {
  require(!per_example.empty(), "clip_and_noise: no per-example gradients");
  if (dp.clip_norm) require(*dp.clip_norm > 0.0, "clip norm must be positive");
  require(dp.noise_sigma >= 0.0, "noise sigma must be non-negative");

  const std::size_t depth = per_example.front().layers.size();
  GradientCapture out;
  out.layers.resize(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    out.layers[l].weight_grad =
        Matrix::Zero(per_example.front().layers[l].weight_grad.rows(),
                     per_example.front().layers[l].weight_grad.cols());
    out.layers[l].bias_grad = Vector::Zero(per_example.front().layers[l].bias_grad.size());
  }
  for (const auto& g : per_example) {
    require(g.layers.size() == depth, "per-example capture depth mismatch");
    double factor = 1.0;
    if (dp.clip_norm) {
      const double norm = composite_norm(g);
      if (norm > *dp.clip_norm) factor = *dp.clip_norm / norm;
    }
    for (std::size_t l = 0; l < depth; ++l) {
      out.layers[l].weight_grad += factor * g.layers[l].weight_grad;
      out.layers[l].bias_grad += factor * g.layers[l].bias_grad;
    }
  }
  const double inv_b = 1.0 / static_cast<double>(per_example.size());
  for (auto& layer : out.layers) {
    layer.weight_grad *= inv_b;
    layer.bias_grad *= inv_b;
  }
  if (dp.noise_sigma > 0.0) {
    auto rng = make_rng(dp.noise_seed);
    std::normal_distribution<double> noise(0.0, dp.noise_sigma);
    for (auto& layer : out.layers) {
      double* w = layer.weight_grad.data();
      for (Index i = 0; i < layer.weight_grad.size(); ++i) w[i] += noise(rng);
      for (Index i = 0; i < layer.bias_grad.size(); ++i) layer.bias_grad(i) += noise(rng);
    }
  }
  return out;
}

// Runs E local epochs of plain gradient descent from params0 and returns
// (param0 - paramE) / eta per layer: the summed per-step gradients, which is
// what a server can reconstruct from a shared weight update. Each epoch
// partitions the batch into ceil(b / b_mini) mini-batches without
// replacement, shuffled under shuffle_seed.
inline GradientCapture fedavg_delta(const NetworkParams& params0, const Batch& batch,
                                    const FedAvgConfig& cfg) {
  require(cfg.epochs >= 1, "fedavg epochs must be >= 1");
  require(cfg.learning_rate > 0.0, "fedavg learning rate must be positive");
  const int b = batch.size();
  const int b_mini = (cfg.mini_batch_size <= 0 || cfg.mini_batch_size > b)
                         ? b
                         : cfg.mini_batch_size;

  NetworkParams params = params0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) order[static_cast<std::size_t>(i)] = i;
    if (b_mini < b) {
      auto rng = make_rng(mix_seed(cfg.shuffle_seed, static_cast<std::uint64_t>(epoch)));
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (int start = 0; start < b; start += b_mini) {
      const int count = std::min(b_mini, b - start);
      Matrix x(batch.inputs.rows(), count);
      std::vector<int> labels(static_cast<std::size_t>(count));
      for (int j = 0; j < count; ++j) {
        x.col(j) = batch.inputs.col(order[static_cast<std::size_t>(start + j)]);
        labels[static_cast<std::size_t>(j)] =
            batch.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(start + j)])];
      }
      const ForwardTrace trace = forward(params, x, labels);
      const GradientCapture g = backward(params, trace, x, labels);
      for (int l = 0; l < params.depth(); ++l) {
        params.layers[l].weight -= cfg.learning_rate * g.layers[l].weight_grad;
        params.layers[l].bias -= cfg.learning_rate * g.layers[l].bias_grad;
      }
    }
  }

  GradientCapture delta;
  delta.layers.resize(params0.depth());
  for (int l = 0; l < params0.depth(); ++l) {
    delta.layers[l].weight_grad =
        (params0.layers[l].weight - params.layers[l].weight) / cfg.learning_rate;
    delta.layers[l].bias_grad =
        (params0.layers[l].bias - params.layers[l].bias) / cfg.learning_rate;
  }
  return delta;
}

}  // namespace spear::fcnn

#endif  // SPEAR_FCNN_HPP
