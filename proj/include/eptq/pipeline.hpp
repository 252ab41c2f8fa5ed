#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "eptq/calibration.hpp"
#include "eptq/model_io.hpp"
#include "eptq/optimizer.hpp"

namespace eptq {

// Module errors surface with the pipeline stage that raised them.
struct StageError : std::runtime_error {
  std::string stage;
  StageError(std::string stage_name, const std::string& msg)
      : std::runtime_error("[" + stage_name + "] " + msg), stage(std::move(stage_name)) {}
};

struct RunConfig {
  std::string model_path;
  std::string data_path;
  std::string eval_data_path;
  std::string reference_path;  // evaluate: float reference model
  std::string out_dir = "eptq-out";
  EptqConfig eptq;
  ThresholdMetric metric = ThresholdMetric::HMSE;
  std::optional<int> bits_w;  // interior weighted layers; first/last floor at 8
  std::optional<int> bits_a;  // comparison points; output point floors at 8
  std::map<std::string, int> bits_w_overrides;  // by layer name, beats everything
  bool with_oracle = false;
  std::string eval_loss = "ce_softmax";
  std::size_t eval_limit = 0;  // 0 = all

  std::string canonical_text() const;  // sorted key=value lines
  std::string config_hash() const;     // FNV-1a of canonical_text
};

// key = value lines, '#' comments; unknown keys rejected.
RunConfig parse_config_file(const std::string& path);
void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value);

struct QuantizeArtifacts {
  std::string model_json;
  std::string metrics_json;
  std::string train_log;
  double initial_distill_loss = 0.0;
  double final_distill_loss = 0.0;
  bool diverged = false;
};

// Algorithm steps 1-6 end to end: load, fold, Hessian scores, HMSE/MSE
// thresholds, activation ranges, SLA scores, rounding optimization, artifact
// write-out. Partial artifacts are removed when a stage fails.
QuantizeArtifacts run_quantize(const RunConfig& cfg);

struct EvaluateReport {
  std::size_t samples = 0;
  std::optional<double> accuracy;
  std::optional<double> mean_loss;
  std::map<int, double> per_point_mse;  // comparison layer -> mean ||z_ref - z_model||^2
  std::string to_json() const;
};

EvaluateReport run_evaluate(const RunConfig& cfg);

struct HessianReport {
  std::map<int, std::vector<double>> lfh_diag;        // weighted layer -> h
  std::map<int, std::vector<double>> oracle_diag;     // with_oracle only
  std::map<int, double> per_layer_spearman;           // elementwise, with_oracle only
  std::vector<int> layer_order;
  std::vector<double> layer_scores;                   // mean h per layer
  std::vector<double> layer_scores_log;               // log-normalized
  std::vector<double> oracle_layer_scores;
  std::vector<double> oracle_layer_scores_log;
  std::optional<double> cross_layer_spearman;
  std::string to_json() const;
};

HessianReport run_hessian_report(const RunConfig& cfg);

}  // namespace eptq
