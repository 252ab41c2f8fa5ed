#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "eptq/pipeline.hpp"

namespace {

// Config file first, then command-line flags on top (flag wins).
void add_common_options(CLI::App* cmd, eptq::RunConfig& cfg, std::string& config_path) {
  cmd->add_option("--config", config_path, "flat key = value config file");
  cmd->add_option("--model", cfg.model_path, "model manifest (.eptq.json)");
  cmd->add_option("--data", cfg.data_path, "dataset (.eptqd)");
  cmd->add_option("--out", cfg.out_dir, "output directory");
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&cfg](std::uint64_t v) { cfg.eptq.seed = v; }, "RNG seed");
}

void merge_config_file(eptq::RunConfig& cfg, const std::string& config_path) {
  if (config_path.empty()) return;
  // Values from the file fill in anything the flags did not set; flags win
  // because they are applied after this merge by CLI11 callbacks running
  // again is not possible, so instead: parse file into cfg first, then let
  // the parsed flag values (already captured) overwrite below.
  cfg = eptq::parse_config_file(config_path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EPTQ post-training quantization engine"};
  app.require_subcommand(1);

  eptq::RunConfig cfg;
  std::string config_path;

  // quantize
  auto* quantize = app.add_subcommand("quantize", "calibrate and optimize a quantized model");
  std::string q_config;
  eptq::RunConfig q_flags;
  bool q_has_bits_w = false, q_has_bits_a = false;
  int q_bits_w = 0, q_bits_a = 0;
  std::string q_metric, q_sla, q_gradual;
  int q_iterations = -1;
  double q_lambda = -1.0;
  add_common_options(quantize, q_flags, q_config);
  quantize->add_option("--bits-w", q_bits_w, "weight bit-width for interior layers")
      ->each([&](const std::string&) { q_has_bits_w = true; });
  quantize->add_option("--bits-a", q_bits_a, "activation bit-width for comparison points")
      ->each([&](const std::string&) { q_has_bits_a = true; });
  quantize->add_option("--iterations", q_iterations, "optimization iterations");
  quantize->add_option("--lambda-reg", q_lambda, "rounding regularizer weight");
  quantize->add_option("--metric", q_metric, "threshold metric: mse | hmse");
  quantize->add_option("--sla", q_sla, "loss weighting: sla | average");
  quantize->add_option("--gradual", q_gradual, "activation schedule: none | stochastic | linear");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "run a model over a dataset and report metrics");
  std::string e_config;
  eptq::RunConfig e_flags;
  std::string e_reference, e_loss;
  std::size_t e_limit = 0;
  add_common_options(evaluate, e_flags, e_config);
  evaluate->add_option("--reference", e_reference, "float reference model for per-point errors");
  evaluate->add_option("--loss", e_loss, "loss kind (auto, none, mse, ce_softmax, ...)");
  evaluate->add_option("--limit", e_limit, "evaluate at most N samples");

  // hessian-report
  auto* report = app.add_subcommand("hessian-report", "per-layer label-free Hessian scores");
  std::string r_config;
  eptq::RunConfig r_flags;
  bool r_oracle = false;
  int r_probes = -1;
  add_common_options(report, r_flags, r_config);
  report->add_flag("--with-oracle", r_oracle, "add finite-difference oracle scores");
  report->add_option("--m", r_probes, "Hutchinson probe count");

  CLI11_PARSE(app, argc, argv);

  try {
    if (quantize->parsed()) {
      merge_config_file(cfg, q_config);
      if (!q_flags.model_path.empty()) cfg.model_path = q_flags.model_path;
      if (!q_flags.data_path.empty()) cfg.data_path = q_flags.data_path;
      if (quantize->count("--out")) cfg.out_dir = q_flags.out_dir;
      if (quantize->count("--seed")) cfg.eptq.seed = q_flags.eptq.seed;
      if (q_has_bits_w) cfg.bits_w = q_bits_w;
      if (q_has_bits_a) cfg.bits_a = q_bits_a;
      if (q_iterations >= 0) cfg.eptq.iterations = q_iterations;
      if (q_lambda >= 0.0) cfg.eptq.lambda_reg = q_lambda;
      if (!q_metric.empty()) eptq::apply_config_line(cfg, "metric", q_metric);
      if (!q_sla.empty()) eptq::apply_config_line(cfg, "sla", q_sla);
      if (!q_gradual.empty()) eptq::apply_config_line(cfg, "gradual", q_gradual);
      if (cfg.model_path.empty() || cfg.data_path.empty()) {
        std::cerr << "quantize needs --model and --data (or a config file)\n";
        return 2;
      }
      const auto artifacts = eptq::run_quantize(cfg);
      std::cout << "quantized model: " << artifacts.model_json << "\n"
                << "metrics:         " << artifacts.metrics_json << "\n"
                << "training log:    " << artifacts.train_log << "\n"
                << "distill loss:    " << artifacts.initial_distill_loss << " -> "
                << artifacts.final_distill_loss << "\n";
      return 0;
    }
    if (evaluate->parsed()) {
      merge_config_file(cfg, e_config);
      if (!e_flags.model_path.empty()) cfg.model_path = e_flags.model_path;
      if (!e_flags.data_path.empty()) cfg.data_path = e_flags.data_path;
      if (evaluate->count("--out")) cfg.out_dir = e_flags.out_dir;
      if (!e_reference.empty()) cfg.reference_path = e_reference;
      if (!e_loss.empty()) cfg.eval_loss = e_loss;
      if (e_limit > 0) cfg.eval_limit = e_limit;
      if (cfg.eval_loss.empty()) cfg.eval_loss = "auto";
      if (cfg.model_path.empty() || cfg.data_path.empty()) {
        std::cerr << "evaluate needs --model and --data (or a config file)\n";
        return 2;
      }
      const auto report_out = eptq::run_evaluate(cfg);
      std::cout << report_out.to_json() << "\n";
      return 0;
    }
    if (report->parsed()) {
      merge_config_file(cfg, r_config);
      if (!r_flags.model_path.empty()) cfg.model_path = r_flags.model_path;
      if (!r_flags.data_path.empty()) cfg.data_path = r_flags.data_path;
      if (report->count("--seed")) cfg.eptq.seed = r_flags.eptq.seed;
      if (r_oracle) cfg.with_oracle = true;
      if (r_probes > 0) cfg.eptq.hessian_probes = r_probes;
      if (cfg.model_path.empty() || cfg.data_path.empty()) {
        std::cerr << "hessian-report needs --model and --data (or a config file)\n";
        return 2;
      }
      const auto hreport = eptq::run_hessian_report(cfg);
      std::cout << hreport.to_json() << "\n";
      return 0;
    }
  } catch (const eptq::StageError& e) {
    std::cerr << "error " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
