#ifndef SPEAR_HARNESS_HPP
#define SPEAR_HARNESS_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spear/analysis.hpp"
#include "spear/common.hpp"
#include "spear/fcnn.hpp"
#include "spear/io.hpp"
#include "spear/sampler.hpp"
#include "spear/selector.hpp"

// Experiment engine behind the CLI: builds clients, runs the attack across
// seeded trials, scores reconstructions against ground truth, validates the
// theory module against sampler experiments, and writes reproducible reports.
namespace spear::harness {

struct ExperimentConfig {
  // network
  int depth = 4;
  int width = 128;
  int input_dim = 64;
  int num_classes = 10;
  // data
  int batch_size = 4;
  std::string data_source = "synthetic";  // synthetic | csv | raw
  std::string data_path;
  std::string sidecar_path;
  double range_lo = 0.0;
  double range_hi = 1.0;
  std::vector<int> labels;  // optional override for file-loaded batches
  // attack
  int attacked_layer = 1;  // 1-based; must be followed by a ReLU
  sampler::SamplerConfig sampler;
  double rank_rel_tol = 0.0;    // 0 = auto (1e-6, loosened under noise)
  double accept_lambda = -1.0;  // <0 = auto by mode
  // defenses / protocol
  double clip_norm = 0.0;     // 0 = off
  double noise_sigma = 0.0;   // std of Gaussian gradient noise
  bool noise_relative = true; // sigma is relative to the attacked layer's RMS gradient
  int fedavg_epochs = 0;      // 0 = plain gradient sharing
  double fedavg_lr = 0.01;
  int fedavg_mini_batch = 0;  // 0 = full batch
  // experiment
  std::uint64_t seed = 0;
  int trials = 1;
  std::string out_dir = "out";
};

struct TrialResult {
  int trial = 0;
  bool recovered = false;  // max abs error < 1e-6 and zero mismatched cells
  bool converged = false;
  bool has_ground_truth = true;
  double max_abs_err = 0.0;
  double abs_mae = 0.0;
  double rel_mae = 0.0;
  double psnr = 0.0;
  double lambda = 0.0;
  std::int64_t mismatches = 0;
  std::int64_t samples_used = 0;
  int pool_size = 0;
  int inferred_b = 0;
  double wall_seconds = 0.0;  // console only; kept out of report files
  Matrix inputs_matched;      // recovered inputs, columns aligned to ground truth
};

struct AttackReport {
  std::vector<TrialResult> trials;
  double accuracy = 0.0;
  double median_max_abs_err = 0.0;
  double median_rel_mae = 0.0;
  double median_rel_mae_recovered = 0.0;
  double median_psnr = 0.0;
  double median_samples = 0.0;
  double total_wall_seconds = 0.0;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double idx = p * (static_cast<double>(values.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(std::floor(idx));
  const std::size_t hi = static_cast<std::size_t>(std::ceil(idx));
  const double w = idx - static_cast<double>(lo);
  return values[lo] * (1.0 - w) + values[hi] * w;
}

}  // namespace detail

inline std::vector<fcnn::LayerSpec> network_specs(const ExperimentConfig& cfg) {
  require(cfg.depth >= 1, "depth must be >= 1");
  require(cfg.width >= 1 && cfg.input_dim >= 1 && cfg.num_classes >= 2,
          "invalid network dimensions");
  std::vector<fcnn::LayerSpec> specs;
  for (int l = 0; l < cfg.depth; ++l) {
    fcnn::LayerSpec spec;
    spec.input_dim = (l == 0) ? cfg.input_dim : cfg.width;
    spec.output_dim = (l == cfg.depth - 1) ? cfg.num_classes : cfg.width;
    spec.has_relu = (l != cfg.depth - 1);
    specs.push_back(spec);
  }
  return specs;
}

inline fcnn::Batch make_batch(const ExperimentConfig& cfg, std::uint64_t batch_seed) {
  fcnn::Batch batch;
  if (cfg.data_source == "synthetic") {
    auto rng = make_rng(batch_seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    batch.inputs.resize(cfg.input_dim, cfg.batch_size);
    for (Index j = 0; j < batch.inputs.cols(); ++j)
      for (Index i = 0; i < batch.inputs.rows(); ++i) batch.inputs(i, j) = gauss(rng);
    std::uniform_int_distribution<int> label(0, cfg.num_classes - 1);
    batch.labels.resize(static_cast<std::size_t>(cfg.batch_size));
    for (auto& l : batch.labels) l = label(rng);
    return batch;
  }
  io::BatchData data;
  if (cfg.data_source == "csv") {
    data = io::load_batch_csv(cfg.data_path);
  } else if (cfg.data_source == "raw") {
    data = io::load_batch_raw(cfg.data_path, cfg.sidecar_path);
  } else {
    throw std::invalid_argument("unknown data source: " + cfg.data_source);
  }
  require(data.inputs.rows() == cfg.input_dim,
          "batch file row count does not match the configured input dimension");
  batch.inputs = std::move(data.inputs);
  if (!cfg.labels.empty()) {
    batch.labels = cfg.labels;
  } else if (data.has_labels) {
    batch.labels = data.labels;
  } else {
    // no labels given: assign classes round-robin, they only steer gradients
    batch.labels.resize(static_cast<std::size_t>(batch.inputs.cols()));
    for (std::size_t j = 0; j < batch.labels.size(); ++j)
      batch.labels[j] = static_cast<int>(j) % cfg.num_classes;
  }
  require(static_cast<Index>(batch.labels.size()) == batch.inputs.cols(),
          "labels length does not match batch size");
  return batch;
}

// Greedy max-|cosine| assignment of recovered columns to ground-truth
// columns; recovered and true columns are either near-identical or unrelated,
// so a greedy matcher suffices.
inline Matrix match_columns(const Matrix& recovered, const Matrix& truth) {
  const Index b = truth.cols();
  require(recovered.cols() == b && recovered.rows() == truth.rows(),
          "match_columns: shape mismatch");
  Matrix cosines(b, b);
  for (Index i = 0; i < b; ++i) {
    for (Index j = 0; j < b; ++j) {
      const double denom = recovered.col(i).norm() * truth.col(j).norm();
      cosines(i, j) = denom > 0.0 ? std::abs(recovered.col(i).dot(truth.col(j))) / denom : -1.0;
    }
  }
  Matrix matched(truth.rows(), b);
  std::vector<char> used_rec(static_cast<std::size_t>(b), 0);
  std::vector<char> used_true(static_cast<std::size_t>(b), 0);
  for (Index step = 0; step < b; ++step) {
    Index best_i = -1, best_j = -1;
    double best = -2.0;
    for (Index i = 0; i < b; ++i) {
      if (used_rec[static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < b; ++j) {
        if (used_true[static_cast<std::size_t>(j)]) continue;
        if (cosines(i, j) > best) {
          best = cosines(i, j);
          best_i = i;
          best_j = j;
        }
      }
    }
    used_rec[static_cast<std::size_t>(best_i)] = 1;
    used_true[static_cast<std::size_t>(best_j)] = 1;
    matched.col(best_j) = recovered.col(best_i);
  }
  return matched;
}

struct ResolvedAttack {
  sampler::SamplerConfig sampler;
  selector::AttackOptions options;
};

// Fills the auto knobs. Noise pushes three tolerances up: the rank threshold
// separating signal from noise singular values, the zero tolerance for
// sparsity counting (3 sigma, in units of the per-column RMS), and the
// dedup angle. The acceptance level drops below "every cell matches" for
// noisy gradients and multi-step updates, where a perfect pattern match is
// not attainable.
inline ResolvedAttack resolve_attack_settings(const ExperimentConfig& cfg, double sigma_rel) {
  ResolvedAttack resolved;
  resolved.sampler = cfg.sampler;
  const bool noisy = cfg.noise_sigma > 0.0;
  if (resolved.sampler.robust_mode && noisy) {
    if (resolved.sampler.zero_rel_tol <= 1e-9) {
      resolved.sampler.zero_rel_tol = std::clamp(
          3.0 * sigma_rel * std::sqrt(2.0 * cfg.width), 1e-9, 0.45);
    }
    if (resolved.sampler.angle_tol <= 1e-6) resolved.sampler.angle_tol = 1e-4;
  }
  resolved.options.rank_rel_tol = cfg.rank_rel_tol;
  if (resolved.options.rank_rel_tol <= 0.0) {
    resolved.options.rank_rel_tol = noisy ? 1e-4 : 1e-6;
  }
  resolved.options.accept_lambda = cfg.accept_lambda;
  if (resolved.options.accept_lambda < 0.0) {
    if (noisy) {
      resolved.options.accept_lambda = 0.9;
    } else if (cfg.fedavg_epochs > 1) {
      resolved.options.accept_lambda = 0.98;
    } else {
      resolved.options.accept_lambda = 1.0 - 1e-12;
    }
  }
  return resolved;
}

struct TrialArtifacts {
  fcnn::NetworkParams params;
  fcnn::Batch batch;
  fcnn::GradientCapture capture;  // what the server observes
  Matrix attacked_input;          // ground-truth input of the attacked layer
  double gradient_scale = 0.0;    // RMS of the attacked layer's weight gradient
};

// One simulated client: init, forward/backward, then the configured
// defense/protocol transform on the shared gradients.
inline TrialArtifacts simulate_client(const ExperimentConfig& cfg, int trial) {
  require(cfg.attacked_layer >= 1, "attacked layer index is 1-based");
  require(cfg.attacked_layer < cfg.depth,
          "unsupported configuration: attacked layer needs a succeeding ReLU");

  const std::uint64_t trial_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(trial));
  TrialArtifacts art;
  art.params = fcnn::init_network(network_specs(cfg), mix_seed(trial_seed, 1));
  art.batch = make_batch(cfg, mix_seed(trial_seed, 2));

  const fcnn::ForwardTrace trace = fcnn::forward(art.params, art.batch.inputs, art.batch.labels);
  const int l = cfg.attacked_layer - 1;
  art.attacked_input = (l == 0) ? art.batch.inputs : trace.act[static_cast<std::size_t>(l - 1)];

  const bool needs_per_example = cfg.clip_norm > 0.0 || cfg.noise_sigma > 0.0;
  if (cfg.fedavg_epochs >= 1) {
    fcnn::FedAvgConfig fed;
    fed.epochs = cfg.fedavg_epochs;
    fed.learning_rate = cfg.fedavg_lr;
    fed.mini_batch_size = cfg.fedavg_mini_batch;
    fed.shuffle_seed = mix_seed(trial_seed, 5);
    art.capture = fcnn::fedavg_delta(art.params, art.batch, fed);
  } else if (needs_per_example) {
    fcnn::GradientCapture full =
        fcnn::backward(art.params, trace, art.batch.inputs, art.batch.labels, true);
    fcnn::DpConfig dp;
    if (cfg.clip_norm > 0.0) dp.clip_norm = cfg.clip_norm;
    dp.noise_seed = mix_seed(trial_seed, 4);
    if (cfg.noise_sigma > 0.0) {
      // scale reference: RMS entry of the attacked layer's clipped mean
      // weight gradient, before noise
      fcnn::DpConfig clip_only = dp;
      clip_only.noise_sigma = 0.0;
      const fcnn::GradientCapture clipped = fcnn::clip_and_noise(full.per_example, clip_only);
      const Matrix& dw = clipped.layers[static_cast<std::size_t>(l)].weight_grad;
      art.gradient_scale = std::sqrt(dw.squaredNorm() / static_cast<double>(dw.size()));
      dp.noise_sigma =
          cfg.noise_relative ? cfg.noise_sigma * art.gradient_scale : cfg.noise_sigma;
    }
    art.capture = fcnn::clip_and_noise(full.per_example, dp);
  } else {
    art.capture = fcnn::backward(art.params, trace, art.batch.inputs, art.batch.labels);
  }
  if (art.gradient_scale == 0.0) {
    const Matrix& dw = art.capture.layers[static_cast<std::size_t>(l)].weight_grad;
    art.gradient_scale = std::sqrt(dw.squaredNorm() / static_cast<double>(dw.size()));
  }
  return art;
}

inline TrialResult score_trial(const ExperimentConfig& cfg,
                               const selector::ReconstructionResult& rec,
                               const Matrix* truth, int trial) {
  TrialResult r;
  r.trial = trial;
  r.converged = rec.converged;
  r.lambda = rec.score.lambda();
  r.mismatches = rec.score.mismatches();
  r.samples_used = rec.samples_used;
  r.pool_size = rec.pool_size;
  r.inferred_b = rec.inferred_b;
  if (truth == nullptr || rec.inputs.size() == 0 || rec.inputs.cols() != truth->cols()) {
    r.has_ground_truth = false;
    r.inputs_matched = rec.inputs;
    return r;
  }
  r.inputs_matched = match_columns(rec.inputs, *truth);
  const Matrix diff = r.inputs_matched - *truth;
  r.max_abs_err = diff.cwiseAbs().maxCoeff();
  r.abs_mae = diff.cwiseAbs().mean();
  const double truth_mean = truth->cwiseAbs().mean();
  r.rel_mae = truth_mean > 0.0 ? r.abs_mae / truth_mean : r.abs_mae;
  const double mse = diff.squaredNorm() / static_cast<double>(diff.size());
  const double range = cfg.range_hi - cfg.range_lo;
  r.psnr = 10.0 * std::log10(range * range / std::max(mse, 1e-300));
  r.recovered = r.max_abs_err < 1e-6 && r.mismatches == 0;
  return r;
}

inline AttackReport aggregate(std::vector<TrialResult> trials) {
  AttackReport report;
  std::vector<double> maxerr, relmae, relmae_rec, psnr, samples;
  int recovered = 0;
  for (const auto& t : trials) {
    report.total_wall_seconds += t.wall_seconds;
    if (!t.has_ground_truth) continue;
    maxerr.push_back(t.max_abs_err);
    relmae.push_back(t.rel_mae);
    psnr.push_back(t.psnr);
    samples.push_back(static_cast<double>(t.samples_used));
    if (t.recovered) {
      ++recovered;
      relmae_rec.push_back(t.rel_mae);
    }
  }
  report.accuracy = trials.empty() ? 0.0
                                   : static_cast<double>(recovered) /
                                         static_cast<double>(trials.size());
  report.median_max_abs_err = detail::percentile(maxerr, 0.5);
  report.median_rel_mae = detail::percentile(relmae, 0.5);
  report.median_rel_mae_recovered = detail::percentile(relmae_rec, 0.5);
  report.median_psnr = detail::percentile(psnr, 0.5);
  report.median_samples = detail::percentile(samples, 0.5);
  report.trials = std::move(trials);
  return report;
}

// Full experiment: trials run in parallel by index into preallocated slots,
// so reports are identical for every worker count.
inline AttackReport run_attack_experiment(const ExperimentConfig& cfg) {
  require(cfg.trials >= 1, "trials must be >= 1");
  std::vector<TrialResult> results(static_cast<std::size_t>(cfg.trials));
  parallel_for(cfg.trials, [&](std::int64_t t) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrialArtifacts art = simulate_client(cfg, static_cast<int>(t));
    const int l = cfg.attacked_layer - 1;
    const double sigma_rel =
        cfg.noise_relative ? cfg.noise_sigma
                           : (art.gradient_scale > 0.0 ? cfg.noise_sigma / art.gradient_scale
                                                       : cfg.noise_sigma);
    ResolvedAttack resolved = resolve_attack_settings(cfg, sigma_rel);
    resolved.sampler.seed = mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(t)), 3);
    const selector::ReconstructionResult rec = selector::run_attack(
        art.capture.layers[static_cast<std::size_t>(l)].weight_grad,
        art.capture.layers[static_cast<std::size_t>(l)].bias_grad,
        art.params.layers[static_cast<std::size_t>(l)].weight,
        art.params.layers[static_cast<std::size_t>(l)].bias, resolved.sampler,
        resolved.options);
    results[static_cast<std::size_t>(t)] =
        score_trial(cfg, rec, &art.attacked_input, static_cast<int>(t));
    results[static_cast<std::size_t>(t)].wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
  return aggregate(std::move(results));
}

inline nlohmann::json config_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["depth"] = cfg.depth;
  j["width"] = cfg.width;
  j["input_dim"] = cfg.input_dim;
  j["num_classes"] = cfg.num_classes;
  j["batch_size"] = cfg.batch_size;
  j["data_source"] = cfg.data_source;
  j["attacked_layer"] = cfg.attacked_layer;
  j["seed"] = cfg.seed;
  j["trials"] = cfg.trials;
  j["clip_norm"] = cfg.clip_norm;
  j["noise_sigma"] = cfg.noise_sigma;
  j["noise_relative"] = cfg.noise_relative;
  j["fedavg_epochs"] = cfg.fedavg_epochs;
  j["fedavg_lr"] = cfg.fedavg_lr;
  j["fedavg_mini_batch"] = cfg.fedavg_mini_batch;
  j["robust_mode"] = cfg.sampler.robust_mode;
  j["max_samples"] = cfg.sampler.max_samples;
  j["chunk_size"] = cfg.sampler.chunk_size;
  j["target_false_reject"] = cfg.sampler.target_false_reject;
  j["range"] = {cfg.range_lo, cfg.range_hi};
  j["recovered_threshold_max_abs_err"] = 1e-6;
  return j;
}

// report.json + trials.csv under out_dir. Per-trial wall times are printed by
// the CLI instead of written, keeping files byte-identical across reruns and
// worker counts.
inline void write_report(const AttackReport& report, const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  std::ofstream csv(fs::path(cfg.out_dir) / "trials.csv");
  csv << "trial,recovered,converged,max_abs_err,abs_mae,rel_mae,psnr,lambda,mismatches,"
         "samples_used,pool_size,inferred_b\n";
  for (const auto& t : report.trials) {
    csv << t.trial << ',' << (t.recovered ? 1 : 0) << ',' << (t.converged ? 1 : 0) << ','
        << detail::fmt(t.max_abs_err) << ',' << detail::fmt(t.abs_mae) << ','
        << detail::fmt(t.rel_mae) << ','
        << detail::fmt(t.psnr) << ',' << detail::fmt(t.lambda) << ',' << t.mismatches << ','
        << t.samples_used << ',' << t.pool_size << ',' << t.inferred_b << '\n';
  }

  nlohmann::json j;
  j["config"] = config_json(cfg);
  j["aggregate"] = {{"trials", static_cast<int>(report.trials.size())},
                    {"accuracy", report.accuracy},
                    {"median_max_abs_err", report.median_max_abs_err},
                    {"median_rel_mae", report.median_rel_mae},
                    {"median_rel_mae_recovered", report.median_rel_mae_recovered},
                    {"median_psnr", report.median_psnr},
                    {"median_samples", report.median_samples}};
  std::ofstream out(fs::path(cfg.out_dir) / "report.json");
  out << j.dump(2) << "\n";
}

// ---- theory validation ----

struct SamplingCostRow {
  int b = 0;
  int m = 0;
  int trials = 0;
  double predicted = 0.0;         // b H_b / q
  double empirical_median = 0.0;  // samples until every true direction pooled
  double ratio = 0.0;
  int incomplete = 0;  // trials that exhausted the budget
};

// Samples-to-complete-pool experiment under the model the predictors assume:
// gradient entries drawn as Bernoulli(1/2) x |N(0,1)|, factor directions a
// random rotation. Counts the first sample index at which every true
// direction has appeared among the filtered candidates.
inline SamplingCostRow sampling_cost_experiment(int b, int m, int trials, std::uint64_t seed,
                                                std::int64_t budget = 2'000'000) {
  require(b >= 2, "sampling_cost_experiment: b >= 2");
  require(m >= b, "sampling_cost_experiment: m >= b");
  SamplingCostRow row;
  row.b = b;
  row.m = m;
  row.trials = trials;
  row.predicted = analysis::expected_samples(b);

  std::vector<double> counts(static_cast<std::size_t>(trials));
  std::vector<char> incomplete(static_cast<std::size_t>(trials), 0);
  parallel_for(trials, [&](std::int64_t t) {
    auto rng = make_rng(mix_seed(seed, static_cast<std::uint64_t>(t), 11));
    const Matrix dz = analysis::detail::sample_model_gradient(m, b, rng);
    // random rotation as the unknown mixing
    Matrix gauss(b, b);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int j = 0; j < b; ++j)
      for (int i = 0; i < b; ++i) gauss(i, j) = g(rng);
    const Matrix q = Eigen::HouseholderQR<Matrix>(gauss).householderQ();
    const Matrix left = dz * q.transpose();  // dz = left * q

    std::vector<Vector> true_dirs;
    for (int i = 0; i < b; ++i) true_dirs.push_back(sampler::sign_canon(q.col(i)));

    sampler::SamplerConfig cfg;
    cfg.seed = mix_seed(seed, static_cast<std::uint64_t>(t), 12);
    cfg.chunk_size = 2000;
    cfg.max_samples = budget;
    cfg.tau = sampler::solve_tau(m, cfg.target_false_reject).tau;

    std::vector<std::int64_t> first_hit(static_cast<std::size_t>(b), -1);
    int found = 0;
    std::int64_t samples_needed = -1;
    for (std::int64_t chunk = 0; chunk * cfg.chunk_size < budget && found < b; ++chunk) {
      const auto cands = sampler::propose_chunk(left, cfg, chunk);
      for (const auto& cand : cands) {
        for (int i = 0; i < b; ++i) {
          if (first_hit[static_cast<std::size_t>(i)] >= 0) continue;
          if (std::abs(cand.direction.dot(true_dirs[static_cast<std::size_t>(i)])) >
              1.0 - 1e-6) {
            first_hit[static_cast<std::size_t>(i)] = cand.sample_index;
            ++found;
          }
        }
        if (found == b) {
          samples_needed = cand.sample_index + 1;
          break;
        }
      }
    }
    if (samples_needed < 0) {
      incomplete[static_cast<std::size_t>(t)] = 1;
      samples_needed = budget;
    }
    counts[static_cast<std::size_t>(t)] = static_cast<double>(samples_needed);
  });

  for (char c : incomplete) row.incomplete += c;
  row.empirical_median = detail::percentile(counts, 0.5);
  row.ratio = row.empirical_median / row.predicted;
  return row;
}

struct FailureRow {
  int b = 0;
  int m = 0;
  int trials = 0;
  double p_ub = 0.0;
  double p_approx = 0.0;
  double empirical = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 1.0;
};

inline FailureRow failure_validation_row(int b, int m, int trials, std::uint64_t seed,
                                         double tau = 0.0, double p_fr = 0.0) {
  const analysis::FailureEstimate est = analysis::failure_prob_bounds(b, m, p_fr);
  const analysis::EmpiricalFailure emp =
      analysis::validate_failure_empirically(b, m, trials, seed, tau);
  FailureRow row;
  row.b = b;
  row.m = m;
  row.trials = trials;
  row.p_ub = est.upper_bound;
  row.p_approx = est.approx;
  row.empirical = emp.rate;
  row.ci_lo = emp.ci_lo;
  row.ci_hi = emp.ci_hi;
  return row;
}

inline void write_theory_csv(const std::vector<SamplingCostRow>& cost_rows,
                             const std::vector<FailureRow>& failure_rows,
                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  {
    std::ofstream csv(fs::path(out_dir) / "sampling_cost.csv");
    csv << "b,m,trials,predicted,empirical_median,ratio,incomplete\n";
    for (const auto& r : cost_rows) {
      csv << r.b << ',' << r.m << ',' << r.trials << ',' << detail::fmt(r.predicted) << ','
          << detail::fmt(r.empirical_median) << ',' << detail::fmt(r.ratio) << ','
          << r.incomplete << '\n';
    }
  }
  {
    std::ofstream csv(fs::path(out_dir) / "failure_rate.csv");
    csv << "b,m,trials,p_ub,p_approx,empirical,ci_lo,ci_hi\n";
    for (const auto& r : failure_rows) {
      csv << r.b << ',' << r.m << ',' << r.trials << ',' << detail::fmt(r.p_ub) << ','
          << detail::fmt(r.p_approx) << ',' << detail::fmt(r.empirical) << ','
          << detail::fmt(r.ci_lo) << ',' << detail::fmt(r.ci_hi) << '\n';
    }
  }
}

// ---- offline gradient dumps ----

inline void simulate_to_dump(const ExperimentConfig& cfg, const std::string& dir) {
  const TrialArtifacts art = simulate_client(cfg, 0);
  io::GradientDump dump;
  dump.params = art.params;
  for (const auto& g : art.capture.layers) {
    fcnn::LayerGradient slim;
    slim.weight_grad = g.weight_grad;
    slim.bias_grad = g.bias_grad;
    dump.gradients.push_back(std::move(slim));
  }
  io::BatchData batch;
  batch.inputs = art.batch.inputs;
  batch.labels = art.batch.labels;
  batch.has_labels = true;
  batch.range_lo = cfg.range_lo;
  batch.range_hi = cfg.range_hi;
  dump.batch = batch;
  io::save_gradient_dump(dump, dir);
}

// Attack a stored dump. Ground truth is recomputed from the bundled batch
// when present; otherwise the reconstruction is written out unscored.
inline AttackReport attack_from_dump(const std::string& dir, ExperimentConfig cfg) {
  const io::GradientDump dump = io::load_gradient_dump(dir);
  const int depth = static_cast<int>(dump.params.layers.size());
  require(cfg.attacked_layer >= 1 && cfg.attacked_layer < depth,
          "unsupported configuration: attacked layer needs a succeeding ReLU");
  const int l = cfg.attacked_layer - 1;

  const Matrix& dw = dump.gradients[static_cast<std::size_t>(l)].weight_grad;
  const double scale = std::sqrt(dw.squaredNorm() / static_cast<double>(dw.size()));
  const double sigma_rel =
      cfg.noise_relative ? cfg.noise_sigma
                         : (scale > 0.0 ? cfg.noise_sigma / scale : cfg.noise_sigma);
  cfg.width = static_cast<int>(dw.rows());
  ResolvedAttack resolved = resolve_attack_settings(cfg, sigma_rel);
  resolved.sampler.seed = mix_seed(cfg.seed, 3);

  const selector::ReconstructionResult rec = selector::run_attack(
      dw, dump.gradients[static_cast<std::size_t>(l)].bias_grad,
      dump.params.layers[static_cast<std::size_t>(l)].weight,
      dump.params.layers[static_cast<std::size_t>(l)].bias, resolved.sampler,
      resolved.options);

  std::optional<Matrix> truth;
  if (dump.batch) {
    cfg.range_lo = dump.batch->range_lo;
    cfg.range_hi = dump.batch->range_hi;
    if (l == 0) {
      truth = dump.batch->inputs;
    } else {
      std::vector<int> labels = dump.batch->has_labels
                                    ? dump.batch->labels
                                    : std::vector<int>(static_cast<std::size_t>(
                                                           dump.batch->inputs.cols()),
                                                       0);
      const fcnn::ForwardTrace trace = fcnn::forward(dump.params, dump.batch->inputs, labels);
      truth = trace.act[static_cast<std::size_t>(l - 1)];
    }
  }
  std::vector<TrialResult> results{
      score_trial(cfg, rec, truth ? &*truth : nullptr, 0)};

  if (rec.inputs.size() > 0) {
    io::BatchData out;
    out.inputs = results.front().inputs_matched;
    out.range_lo = cfg.range_lo;
    out.range_hi = cfg.range_hi;
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    io::save_batch_raw(out, (fs::path(cfg.out_dir) / "recovered.bin").string(),
                       (fs::path(cfg.out_dir) / "recovered.json").string());
  }
  return aggregate(std::move(results));
}

}  // namespace spear::harness

#endif  // SPEAR_HARNESS_HPP
