// Command-line front end: simulate federated clients, attack their shared
// gradients, and validate the sampling-cost and failure-probability
// predictors against experiments.
//
// Subcommands: attack, attack-layer, validate-theory, simulate, analyze.
// Settings come from a flat key=value config file (--config) with
// command-line overrides; SPEAR_THREADS caps the worker count.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spear/analysis.hpp"
#include "spear/harness.hpp"
#include "spear/sampler.hpp"

namespace {

using spear::harness::AttackReport;
using spear::harness::ExperimentConfig;

void add_experiment_options(CLI::App* cmd, ExperimentConfig& cfg) {
  cmd->set_config("--config", "", "flat key=value config file");
  cmd->add_option("--depth", cfg.depth, "number of linear layers");
  cmd->add_option("--width", cfg.width, "hidden width m");
  cmd->add_option("--input-dim", cfg.input_dim, "input dimension n");
  cmd->add_option("--num-classes", cfg.num_classes, "output classes");
  cmd->add_option("--batch-size", cfg.batch_size, "batch size b");
  cmd->add_option("--data-source", cfg.data_source, "synthetic | csv | raw");
  cmd->add_option("--data-path", cfg.data_path, "batch file (csv or raw binary)");
  cmd->add_option("--sidecar", cfg.sidecar_path, "JSON sidecar for raw batches");
  cmd->add_option("--range-lo", cfg.range_lo, "declared data range (PSNR)");
  cmd->add_option("--range-hi", cfg.range_hi, "declared data range (PSNR)");
  cmd->add_option("--labels", cfg.labels, "label override for file batches");
  cmd->add_option("--layer", cfg.attacked_layer, "attacked layer (1-based)");
  cmd->add_option("--max-samples", cfg.sampler.max_samples, "sampling budget N");
  cmd->add_option("--chunk-size", cfg.sampler.chunk_size, "samples per chunk");
  cmd->add_option("--tau", cfg.sampler.tau, "sparsity threshold (0 = derive from p-fr)");
  cmd->add_option("--p-fr", cfg.sampler.target_false_reject, "false-rejection budget");
  cmd->add_option("--zero-tol", cfg.sampler.zero_rel_tol, "relative zero tolerance");
  cmd->add_flag("--robust", cfg.sampler.robust_mode, "noise-robust sampling");
  cmd->add_option("--rank-tol", cfg.rank_rel_tol, "rank threshold (0 = auto)");
  cmd->add_option("--accept-lambda", cfg.accept_lambda, "early-stop score (<0 = auto)");
  cmd->add_option("--clip-norm", cfg.clip_norm, "per-example clip norm C (0 = off)");
  cmd->add_option("--noise-sigma", cfg.noise_sigma, "gradient noise std");
  cmd->add_option("--noise-absolute", [&cfg](const std::vector<std::string>&) {
    cfg.noise_relative = false;
    return true;
  }, "treat --noise-sigma as absolute, not relative to gradient scale")
      ->expected(0);
  cmd->add_option("--fedavg-epochs", cfg.fedavg_epochs, "local epochs (0 = plain gradients)");
  cmd->add_option("--fedavg-lr", cfg.fedavg_lr, "local learning rate");
  cmd->add_option("--fedavg-mini-batch", cfg.fedavg_mini_batch, "local mini-batch size (0 = full)");
  cmd->add_option("--seed", cfg.seed, "master seed");
  cmd->add_option("--trials", cfg.trials, "number of trials");
  cmd->add_option("--out", cfg.out_dir, "output directory");
}

void print_report(const AttackReport& report, const ExperimentConfig& cfg) {
  std::fprintf(stderr, "trial  recovered  max_abs_err   rel_mae       lambda    samples   wall_s\n");
  for (const auto& t : report.trials) {
    std::fprintf(stderr, "%5d  %9s  %.4e  %.4e  %8.6f  %8lld  %7.3f\n", t.trial,
                 t.recovered ? "yes" : "no", t.max_abs_err, t.rel_mae, t.lambda,
                 static_cast<long long>(t.samples_used), t.wall_seconds);
  }
  std::fprintf(stderr,
               "accuracy %.3f  median max_abs_err %.3e  median rel_mae %.3e  total wall %.2fs\n",
               report.accuracy, report.median_max_abs_err, report.median_rel_mae,
               report.total_wall_seconds);
  std::fprintf(stderr, "report written to %s\n", cfg.out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"exact gradient inversion for fully connected ReLU layers"};
  app.require_subcommand(1);

  ExperimentConfig cfg;
  std::string dump_dir;

  auto* attack = app.add_subcommand("attack", "simulate clients and attack the first layer");
  add_experiment_options(attack, cfg);
  attack->add_option("--from", dump_dir, "attack a stored gradient dump instead of simulating");

  auto* attack_layer =
      app.add_subcommand("attack-layer", "attack an inner layer (set --layer)");
  add_experiment_options(attack_layer, cfg);

  auto* validate = app.add_subcommand("validate-theory",
                                      "sampling-cost and failure-probability experiments");
  add_experiment_options(validate, cfg);
  std::vector<int> cost_bs{3, 4, 5, 6};
  int cost_m = 1000;
  int cost_trials = 50;
  std::vector<int> fail_ms{10, 20, 30, 40};
  int fail_b = 2;
  int fail_trials = 500;
  validate->add_option("--cost-b", cost_bs, "batch sizes for sampling-cost rows");
  validate->add_option("--cost-m", cost_m, "width for sampling-cost rows");
  validate->add_option("--cost-trials", cost_trials, "trials per sampling-cost row");
  validate->add_option("--fail-b", fail_b, "batch size for failure rows");
  validate->add_option("--fail-m", fail_ms, "widths for failure rows");
  validate->add_option("--fail-trials", fail_trials, "trials per failure row");

  auto* simulate = app.add_subcommand("simulate", "write gradients to a raw-binary dump");
  add_experiment_options(simulate, cfg);

  auto* analyze = app.add_subcommand("analyze", "print theory tables, no experiments");
  std::vector<int> analyze_bs{2, 4, 8, 16};
  int analyze_m = 200;
  double analyze_pfr = 1e-5;
  double analyze_p = 1e-8;
  std::string analyze_out;
  analyze->add_option("--b", analyze_bs, "batch sizes");
  analyze->add_option("--m", analyze_m, "network width");
  analyze->add_option("--p-fr", analyze_pfr, "false-rejection budget");
  analyze->add_option("--p", analyze_p, "target failure probability for sample bounds");
  analyze->add_option("--out", analyze_out, "also write the table as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (attack->parsed() || attack_layer->parsed()) {
      AttackReport report;
      if (!dump_dir.empty()) {
        report = spear::harness::attack_from_dump(dump_dir, cfg);
      } else {
        report = spear::harness::run_attack_experiment(cfg);
      }
      spear::harness::write_report(report, cfg);
      print_report(report, cfg);
      return 0;  // recovery failure is data, not an error
    }
    if (validate->parsed()) {
      std::vector<spear::harness::SamplingCostRow> cost_rows;
      for (int b : cost_bs) {
        cost_rows.push_back(spear::harness::sampling_cost_experiment(
            b, cost_m, cost_trials, cfg.seed));
        const auto& r = cost_rows.back();
        std::fprintf(stderr, "sampling cost b=%d m=%d: median %.0f predicted %.0f ratio %.3f\n",
                     r.b, r.m, r.empirical_median, r.predicted, r.ratio);
      }
      std::vector<spear::harness::FailureRow> failure_rows;
      for (int m : fail_ms) {
        failure_rows.push_back(
            spear::harness::failure_validation_row(fail_b, m, fail_trials, cfg.seed));
        const auto& r = failure_rows.back();
        std::fprintf(stderr, "failure b=%d m=%d: empirical %.4f [%.4f, %.4f]  ub %.4f approx %.4f\n",
                     r.b, r.m, r.empirical, r.ci_lo, r.ci_hi, r.p_ub, r.p_approx);
      }
      spear::harness::write_theory_csv(cost_rows, failure_rows, cfg.out_dir);
      std::fprintf(stderr, "CSV written to %s\n", cfg.out_dir.c_str());
      return 0;
    }
    if (simulate->parsed()) {
      spear::harness::simulate_to_dump(cfg, cfg.out_dir);
      std::fprintf(stderr, "gradient dump written to %s\n", cfg.out_dir.c_str());
      return 0;
    }
    if (analyze->parsed()) {
      std::printf("b,q_lower,expected_samples,high_prob_samples,p_ub,p_approx,tau\n");
      std::string csv = "b,q_lower,expected_samples,high_prob_samples,p_ub,p_approx,tau\n";
      for (int b : analyze_bs) {
        const double q = spear::analysis::success_prob_lower(b);
        const double exp_samples = spear::analysis::expected_samples(b);
        std::string hps = "";
        if (b >= 5) {
          try {
            hps = std::to_string(
                spear::analysis::high_prob_samples(b, analyze_p, analyze_pfr));
          } catch (const std::exception&) {
            hps = "";
          }
        }
        const auto est = spear::analysis::failure_prob_bounds(b, analyze_m, analyze_pfr);
        const auto tau = spear::sampler::solve_tau(analyze_m, analyze_pfr);
        char line[256];
        std::snprintf(line, sizeof(line), "%d,%.6g,%.6g,%s,%.6g,%.6g,%.6g\n", b, q,
                      exp_samples, hps.c_str(), est.upper_bound, est.approx, tau.tau);
        std::fputs(line, stdout);
        csv += line;
      }
      if (!analyze_out.empty()) {
        std::filesystem::create_directories(
            std::filesystem::path(analyze_out).parent_path().string().empty()
                ? "."
                : std::filesystem::path(analyze_out).parent_path().string());
        std::ofstream out(analyze_out);
        out << csv;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
