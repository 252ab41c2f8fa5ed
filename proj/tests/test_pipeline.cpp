#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "eptq/bn_fold.hpp"
#include "eptq/calibration.hpp"
#include "eptq/pipeline.hpp"
#include "test_support.hpp"

using namespace eptq;
using eptq::testing::fixture_dir;
using eptq::testing::temp_dir;

namespace {

namespace fs = std::filesystem;

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

CliResult run_cli(const std::string& args, const std::string& tag) {
  const std::string out_file = temp_dir("cli") + "/" + tag + ".out";
  const std::string err_file = temp_dir("cli") + "/" + tag + ".err";
  const std::string cmd =
      std::string(EPTQ_CLI_PATH) + " " + args + " > " + out_file + " 2> " + err_file;
  const int status = std::system(cmd.c_str());
  CliResult result;
  result.exit_code = WEXITSTATUS(status);
  result.out = slurp(out_file);
  result.err = slurp(err_file);
  return result;
}

RunConfig toy_config(const std::string& out_tag) {
  RunConfig cfg;
  cfg.model_path = fixture_dir() + "/toy_classifier.eptq.json";
  cfg.data_path = fixture_dir() + "/toy_train.eptqd";
  cfg.out_dir = temp_dir(out_tag);
  cfg.bits_w = 4;
  cfg.bits_a = 8;
  cfg.eptq.iterations = 120;
  cfg.eptq.batch_size = 8;
  cfg.eptq.calibration_samples = 48;
  cfg.eptq.hmse_samples = 24;
  cfg.eptq.hessian_probes = 16;
  cfg.eptq.seed = 9;
  return cfg;
}

}  // namespace

TEST_CASE("config files parse, flag-style overrides apply, unknown keys fail") {
  const std::string path = temp_dir("cfg") + "/run.cfg";
  std::ofstream(path) << "# comment line\n"
                      << "model = m.eptq.json\n"
                      << "iterations = 77\n"
                      << "lambda_reg = 2.5\n"
                      << "sla = average\n"
                      << "gradual = stochastic\n"
                      << "bits_w = 3\n"
                      << "bits_w.head = 8\n";
  RunConfig cfg = parse_config_file(path);
  CHECK(cfg.model_path == "m.eptq.json");
  CHECK(cfg.eptq.iterations == 77);
  CHECK(cfg.eptq.lambda_reg == 2.5);
  CHECK(cfg.eptq.weighting == SlaWeighting::Average);
  CHECK(cfg.eptq.gradual == GradualMode::Stochastic);
  CHECK(cfg.bits_w == 3);
  CHECK(cfg.bits_w_overrides.at("head") == 8);

  apply_config_line(cfg, "metric", "mse");
  CHECK(cfg.metric == ThresholdMetric::MSE);
  CHECK_THROWS(apply_config_line(cfg, "not_a_key", "1"));
  CHECK_THROWS(apply_config_line(cfg, "metric", "cosine"));

  std::ofstream(path) << "iterations 77\n";
  CHECK_THROWS(parse_config_file(path));
}

TEST_CASE("config hash is stable and sensitive") {
  RunConfig a = toy_config("hash_a");
  RunConfig b = a;
  CHECK(a.config_hash() == b.config_hash());
  b.eptq.seed = 10;
  CHECK(a.config_hash() != b.config_hash());
}

TEST_CASE("quantize pipeline produces a reloadable artifact and metrics") {
  RunConfig cfg = toy_config("quantize_api");
  const auto artifacts = run_quantize(cfg);
  CHECK(fs::exists(artifacts.model_json));
  CHECK(fs::exists(artifacts.metrics_json));
  CHECK(fs::exists(artifacts.train_log));
  CHECK(artifacts.final_distill_loss <= artifacts.initial_distill_loss);

  LoadedModel quantized = load_model(artifacts.model_json);
  REQUIRE(quantized.quant.has_value());
  CHECK(quantized.quant->weights_baked);

  // First and last weighted layers stay at 8 bits, interior drops to 4.
  const auto weighted = quantized.graph.weighted_layers();
  CHECK(quantized.graph.layers[static_cast<std::size_t>(weighted.front())].bits_weight == 8);
  CHECK(quantized.graph.layers[static_cast<std::size_t>(weighted[1])].bits_weight == 4);
  CHECK(quantized.graph.layers[static_cast<std::size_t>(weighted.back())].bits_weight == 8);

  // Evaluate the artifact against the float reference.
  RunConfig eval_cfg;
  eval_cfg.model_path = artifacts.model_json;
  eval_cfg.reference_path = cfg.model_path;
  eval_cfg.data_path = fixture_dir() + "/toy_heldout.eptqd";
  eval_cfg.eval_loss = "auto";
  const auto report = run_evaluate(eval_cfg);
  CHECK(report.samples == 256);
  REQUIRE(report.accuracy.has_value());
  CHECK(*report.accuracy > 0.5);
  REQUIRE(report.mean_loss.has_value());
  CHECK(report.per_point_mse.size() == quantized.graph.comparison_points.size());
  for (const auto& [layer, d] : report.per_point_mse) CHECK(d >= 0.0);

  // The metrics file records the config hash.
  const std::string metrics = slurp(artifacts.metrics_json);
  CHECK(metrics.find(cfg.config_hash()) != std::string::npos);
}

TEST_CASE("quantize is deterministic: same config and seed give identical bytes") {
  RunConfig a = toy_config("det_a");
  RunConfig b = toy_config("det_b");
  const auto ra = run_quantize(a);
  const auto rb = run_quantize(b);
  CHECK(slurp(ra.model_json) == slurp(rb.model_json));
  CHECK(slurp(fs::path(ra.model_json).replace_extension(".bin").string()) ==
        slurp(fs::path(rb.model_json).replace_extension(".bin").string()));
  // metrics differ only in the out-dir-independent content; out dir is not
  // part of the metrics, so the files must match byte for byte.
  CHECK(slurp(ra.metrics_json) == slurp(rb.metrics_json));
  CHECK(slurp(ra.train_log) == slurp(rb.train_log));

  RunConfig c = toy_config("det_c");
  c.eptq.seed = 1234;
  const auto rc = run_quantize(c);
  CHECK(slurp(ra.model_json) != slurp(rc.model_json));
}

TEST_CASE("zero-iteration quantize equals the calibration baseline") {
  RunConfig cfg = toy_config("noopt");
  cfg.eptq.iterations = 0;
  const auto artifacts = run_quantize(cfg);

  LoadedModel quantized = load_model(artifacts.model_json);
  LoadedModel fl = load_model(cfg.model_path);
  NetworkGraph folded = fold_batchnorm(fl.graph);

  // Reproduce the calibration path independently and compare the baked
  // weights against nearest rounding at the selected thresholds.
  Dataset calib = load_dataset(cfg.data_path, 48);
  Dataset hess = calib;
  hess.inputs.resize(24);
  ThresholdSearchSpec spec;
  const auto weighted = folded.weighted_layers();
  for (std::size_t pos = 0; pos < weighted.size(); ++pos) {
    const int layer = weighted[pos];
    const int bits = (pos == 0 || pos + 1 == weighted.size()) ? 8 : 4;
    const auto h = lfh_weight_diag(folded, hess, layer, 16, 9);
    const Tensor& w = *folded.layers[static_cast<std::size_t>(layer)].weights;
    const auto sel = select_threshold(w, &h, bits, spec);
    WeightQuantParams p;
    p.bits = bits;
    p.thresholds = sel.thresholds;
    const Tensor expect = quantize_weights_nearest(w, p);
    const Tensor& got = *quantized.graph.layers[static_cast<std::size_t>(layer)].weights;
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("pipeline failures name the stage and leave no partial artifacts") {
  RunConfig cfg = toy_config("fail");
  cfg.data_path = fixture_dir() + "/does_not_exist.eptqd";
  try {
    run_quantize(cfg);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage == "load_dataset");
  }
  CHECK(!fs::exists(cfg.out_dir + "/quantized.eptq.json"));
  CHECK(!fs::exists(cfg.out_dir + "/metrics.json"));
}

TEST_CASE("evaluate: float model against itself has zero distances") {
  RunConfig cfg;
  cfg.model_path = fixture_dir() + "/toy_classifier.eptq.json";
  cfg.data_path = fixture_dir() + "/toy_heldout.eptqd";
  cfg.eval_loss = "auto";
  const auto report = run_evaluate(cfg);
  for (const auto& [layer, d] : report.per_point_mse) CHECK(d == 0.0);
  REQUIRE(report.accuracy.has_value());
  CHECK(*report.accuracy == doctest::Approx(0.93359375));  // committed fixture accuracy
}

TEST_CASE("evaluate: explicit loss kind on an unlabeled dataset is an error") {
  RunConfig cfg;
  cfg.model_path = fixture_dir() + "/conv_bn.eptq.json";
  cfg.data_path = fixture_dir() + "/conv_inputs.eptqd";
  cfg.eval_loss = "ce_softmax";
  CHECK_THROWS_WITH_AS(run_evaluate(cfg), doctest::Contains("labels"), std::exception);
  cfg.eval_loss = "auto";  // silently skips label metrics instead
  const auto report = run_evaluate(cfg);
  CHECK(!report.accuracy.has_value());
  CHECK(!report.mean_loss.has_value());
}

TEST_CASE("evaluate: shape mismatch between model and dataset is explicit") {
  RunConfig cfg;
  cfg.model_path = fixture_dir() + "/conv_bn.eptq.json";
  cfg.data_path = fixture_dir() + "/toy_train.eptqd";
  CHECK_THROWS_WITH_AS(run_evaluate(cfg), doctest::Contains("shape"), std::exception);
}

TEST_CASE("hessian report: deterministic, log-normalized, oracle-backed") {
  RunConfig cfg;
  cfg.model_path = fixture_dir() + "/conv_bn.eptq.json";
  cfg.data_path = fixture_dir() + "/conv_inputs.eptqd";
  cfg.eptq.calibration_samples = 6;
  cfg.eptq.hessian_probes = 2000;
  cfg.eptq.seed = 21;
  cfg.with_oracle = true;
  const auto report = run_hessian_report(cfg);
  const auto report2 = run_hessian_report(cfg);
  CHECK(report.to_json() == report2.to_json());

  for (const auto& [layer, rho] : report.per_layer_spearman) CHECK(rho > 0.95);
  REQUIRE(!report.layer_scores_log.empty());
  for (double v : report.layer_scores_log) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("hessian report refuses the oracle on oversized layers") {
  Rng rng(555);
  NetworkGraph big = eptq::testing::make_dense_net({40, 26, 3}, rng);  // 1040-element layer
  const std::string dir = temp_dir("big_model");
  save_model(big, dir + "/big.eptq.json");
  Dataset data;
  for (int i = 0; i < 2; ++i) data.inputs.push_back(eptq::testing::random_tensor({40}, rng));
  save_dataset(data, {40}, dir + "/big.eptqd");

  RunConfig cfg;
  cfg.model_path = dir + "/big.eptq.json";
  cfg.data_path = dir + "/big.eptqd";
  cfg.with_oracle = true;
  CHECK_THROWS_WITH_AS(run_hessian_report(cfg), doctest::Contains("oracle limit"),
                       std::exception);
  cfg.with_oracle = false;
  CHECK_NOTHROW(run_hessian_report(cfg));
}

TEST_CASE("cli: quantize, evaluate, and hessian-report round trip") {
  const std::string out = temp_dir("cli_q");
  const auto quantize = run_cli("quantize --model " + fixture_dir() +
                                    "/toy_classifier.eptq.json --data " + fixture_dir() +
                                    "/toy_train.eptqd --bits-w 4 --bits-a 8 --iterations 60"
                                    " --seed 3 --out " + out,
                                "quantize");
  CHECK(quantize.exit_code == 0);
  CHECK(quantize.out.find("quantized model:") != std::string::npos);
  CHECK(fs::exists(out + "/quantized.eptq.json"));
  CHECK(fs::exists(out + "/metrics.json"));
  CHECK(fs::exists(out + "/train_log.jsonl"));

  // train log lines carry the documented keys
  std::ifstream log(out + "/train_log.jsonl");
  std::string first_line;
  std::getline(log, first_line);
  for (const char* key : {"\"iter\"", "\"distill_loss\"", "\"reg_loss\"", "\"P_mean\"", "\"lr\""}) {
    CHECK(first_line.find(key) != std::string::npos);
  }

  const auto evaluate = run_cli("evaluate --model " + out + "/quantized.eptq.json --reference " +
                                    fixture_dir() + "/toy_classifier.eptq.json --data " +
                                    fixture_dir() + "/toy_heldout.eptqd",
                                "evaluate");
  CHECK(evaluate.exit_code == 0);
  CHECK(evaluate.out.find("accuracy") != std::string::npos);
  CHECK(evaluate.out.find("per_point_mse") != std::string::npos);

  const auto report = run_cli("hessian-report --model " + fixture_dir() +
                                  "/conv_bn.eptq.json --data " + fixture_dir() +
                                  "/conv_inputs.eptqd --m 64 --seed 4",
                              "report");
  CHECK(report.exit_code == 0);
  CHECK(report.out.find("lfh_mean") != std::string::npos);
}

TEST_CASE("cli: missing dataset fails with the stage name") {
  const auto result = run_cli("quantize --model " + fixture_dir() +
                                  "/toy_classifier.eptq.json --data /nowhere.eptqd --out " +
                                  temp_dir("cli_fail"),
                              "fail");
  CHECK(result.exit_code != 0);
  CHECK(result.err.find("load_dataset") != std::string::npos);
}

TEST_CASE("cli: config file drives the run and flags win over it") {
  const std::string out = temp_dir("cli_cfg");
  const std::string cfg_path = out + "/run.cfg";
  std::ofstream(cfg_path) << "model = " << fixture_dir() << "/toy_classifier.eptq.json\n"
                          << "data = " << fixture_dir() << "/toy_train.eptqd\n"
                          << "out = " << out << "\n"
                          << "bits_w = 4\nbits_a = 8\niterations = 500\nseed = 3\n"
                          << "calibration_samples = 32\nhmse_samples = 16\nm = 8\n";
  const auto result =
      run_cli("quantize --config " + cfg_path + " --iterations 10", "cfg_run");
  CHECK(result.exit_code == 0);
  std::istringstream log(slurp(out + "/train_log.jsonl"));
  std::size_t lines = 0;
  std::string line;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 10);  // the flag, not the file value
}
