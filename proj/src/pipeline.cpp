#include "eptq/pipeline.hpp"

#include <cstdint>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "eptq/bn_fold.hpp"
#include "json.hpp"

namespace eptq {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename F>
auto stage(const std::string& name, F&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

Dataset head(const Dataset& data, std::size_t n) {
  Dataset out;
  const std::size_t take = std::min(n, data.size());
  out.inputs.assign(data.inputs.begin(), data.inputs.begin() + static_cast<long>(take));
  if (data.has_labels()) {
    out.labels.assign(data.labels.begin(), data.labels.begin() + static_cast<long>(take));
  }
  return out;
}

}  // namespace

std::string RunConfig::canonical_text() const {
  std::vector<std::pair<std::string, std::string>> kv;
  auto put = [&](const std::string& k, const std::string& v) { kv.emplace_back(k, v); };
  auto put_d = [&](const std::string& k, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    put(k, os.str());
  };
  // The output directory is deliberately excluded: the hash identifies the
  // computation, and runs differing only in artifact placement must match.
  put("model", model_path);
  put("data", data_path);
  put("eval_data", eval_data_path);
  put("reference", reference_path);
  put("metric", metric == ThresholdMetric::HMSE ? "hmse" : "mse");
  put("sla", sla_weighting_name(eptq.weighting));
  put("gradual", gradual_mode_name(eptq.gradual));
  put("iterations", std::to_string(eptq.iterations));
  put("batch_size", std::to_string(eptq.batch_size));
  put_d("learning_rate", eptq.learning_rate);
  put_d("lambda_reg", eptq.lambda_reg);
  put_d("beta_start", eptq.beta_start);
  put_d("beta_end", eptq.beta_end);
  put_d("warmup_fraction", eptq.warmup_fraction);
  put_d("anneal_fraction", eptq.anneal_fraction);
  put_d("p0", eptq.p0);
  put("n_decay", std::to_string(eptq.n_decay));
  put("m", std::to_string(eptq.hessian_probes));
  put("hmse_samples", std::to_string(eptq.hmse_samples));
  put("calibration_samples", std::to_string(eptq.calibration_samples));
  put("seed", std::to_string(eptq.seed));
  put("optimize_scale", eptq.optimize_scale ? "true" : "false");
  put("optimize_bias", eptq.optimize_bias ? "true" : "false");
  put("bits_w", bits_w ? std::to_string(*bits_w) : "");
  put("bits_a", bits_a ? std::to_string(*bits_a) : "");
  for (const auto& [name, bits] : bits_w_overrides) {
    put("bits_w." + name, std::to_string(bits));
  }
  put("with_oracle", with_oracle ? "true" : "false");
  put("eval_loss", eval_loss);
  put("eval_limit", std::to_string(eval_limit));
  std::sort(kv.begin(), kv.end());
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  return os.str();
}

std::string RunConfig::config_hash() const { return fnv1a_hex(canonical_text()); }

void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto to_int = [&](const std::string& v) { return std::stoi(v); };
  auto to_u64 = [&](const std::string& v) { return static_cast<std::uint64_t>(std::stoull(v)); };
  auto to_double = [&](const std::string& v) { return std::stod(v); };
  auto to_bool = [&](const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("expected a boolean, got '" + v + "'");
  };

  if (key == "model") cfg.model_path = value;
  else if (key == "data") cfg.data_path = value;
  else if (key == "eval_data") cfg.eval_data_path = value;
  else if (key == "reference") cfg.reference_path = value;
  else if (key == "out") cfg.out_dir = value;
  else if (key == "metric") {
    if (value == "hmse") cfg.metric = ThresholdMetric::HMSE;
    else if (value == "mse") cfg.metric = ThresholdMetric::MSE;
    else throw std::invalid_argument("metric must be 'mse' or 'hmse'");
  } else if (key == "sla") cfg.eptq.weighting = sla_weighting_from_name(value);
  else if (key == "gradual") cfg.eptq.gradual = gradual_mode_from_name(value);
  else if (key == "iterations") cfg.eptq.iterations = to_int(value);
  else if (key == "batch_size") cfg.eptq.batch_size = to_int(value);
  else if (key == "learning_rate") cfg.eptq.learning_rate = to_double(value);
  else if (key == "lambda_reg") cfg.eptq.lambda_reg = to_double(value);
  else if (key == "beta_start") cfg.eptq.beta_start = to_double(value);
  else if (key == "beta_end") cfg.eptq.beta_end = to_double(value);
  else if (key == "warmup_fraction") cfg.eptq.warmup_fraction = to_double(value);
  else if (key == "anneal_fraction") cfg.eptq.anneal_fraction = to_double(value);
  else if (key == "p0") cfg.eptq.p0 = to_double(value);
  else if (key == "n_decay") cfg.eptq.n_decay = to_int(value);
  else if (key == "m") cfg.eptq.hessian_probes = to_int(value);
  else if (key == "hmse_samples") cfg.eptq.hmse_samples = to_int(value);
  else if (key == "calibration_samples") cfg.eptq.calibration_samples = to_int(value);
  else if (key == "seed") cfg.eptq.seed = to_u64(value);
  else if (key == "optimize_scale") cfg.eptq.optimize_scale = to_bool(value);
  else if (key == "optimize_bias") cfg.eptq.optimize_bias = to_bool(value);
  else if (key == "bits_w") cfg.bits_w = to_int(value);
  else if (key == "bits_a") cfg.bits_a = to_int(value);
  else if (key.rfind("bits_w.", 0) == 0) cfg.bits_w_overrides[key.substr(7)] = to_int(value);
  else if (key == "with_oracle") cfg.with_oracle = to_bool(value);
  else if (key == "eval_loss") cfg.eval_loss = value;
  else if (key == "eval_limit") cfg.eval_limit = static_cast<std::size_t>(to_int(value));
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(line_no) +
                               ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      apply_config_line(cfg, key, value);
    } catch (const std::exception& e) {
      throw std::runtime_error("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

namespace {

// Applies the bit-width policy onto the graph: CLI widths override manifest
// widths; the first/last weighted layers and the output comparison point
// never drop below 8 bits; explicit per-layer overrides win outright.
void assign_bit_widths(NetworkGraph& graph, const RunConfig& cfg) {
  const auto weighted = graph.weighted_layers();
  for (std::size_t pos = 0; pos < weighted.size(); ++pos) {
    LayerSpec& layer = graph.layers[static_cast<std::size_t>(weighted[pos])];
    int bits = cfg.bits_w ? *cfg.bits_w : layer.bits_weight;
    const bool edge = pos == 0 || pos + 1 == weighted.size();
    if (edge && bits < 8) bits = 8;
    auto ov = cfg.bits_w_overrides.find(layer.name);
    if (ov != cfg.bits_w_overrides.end()) bits = ov->second;
    if (!valid_bit_width(bits)) {
      throw std::invalid_argument("invalid weight bit-width " + std::to_string(bits) +
                                  " for layer '" + layer.name + "'");
    }
    layer.bits_weight = bits;
  }
  for (int cp : graph.comparison_points) {
    LayerSpec& layer = graph.layers[static_cast<std::size_t>(cp)];
    int bits = cfg.bits_a ? *cfg.bits_a : layer.bits_activation;
    if (cp == graph.output_layer() && bits < 8) bits = 8;
    if (!valid_bit_width(bits)) {
      throw std::invalid_argument("invalid activation bit-width " + std::to_string(bits) +
                                  " for layer '" + layer.name + "'");
    }
    layer.bits_activation = bits;
  }
}

}  // namespace

QuantizeArtifacts run_quantize(const RunConfig& cfg) {
  LoadedModel loaded = stage("load_model", [&] { return load_model(cfg.model_path); });

  NetworkGraph graph = stage("fold_batchnorm", [&] { return fold_batchnorm(loaded.graph); });
  stage("assign_bits", [&] {
    assign_bit_widths(graph, cfg);
    return 0;
  });

  Dataset calib = stage("load_dataset", [&] {
    return load_dataset(cfg.data_path, static_cast<std::size_t>(cfg.eptq.calibration_samples));
  });
  stage("load_dataset", [&] {
    if (!calib.inputs.empty() && calib.inputs.front().shape() != graph.input_shape) {
      throw std::invalid_argument("dataset sample shape " +
                                  shape_to_string(calib.inputs.front().shape()) +
                                  " does not match model input " +
                                  shape_to_string(graph.input_shape));
    }
    return 0;
  });

  const Dataset hessian_set = head(calib, static_cast<std::size_t>(cfg.eptq.hmse_samples));

  HessianScores scores;
  scores.probes = cfg.eptq.hessian_probes;
  scores.seed = cfg.eptq.seed;
  stage("hessian_weights", [&] {
    for (int layer : graph.weighted_layers()) {
      if (graph.layers[static_cast<std::size_t>(layer)].bits_weight == 32) continue;
      if (cfg.metric == ThresholdMetric::HMSE) {
        scores.weight_diag[layer] = lfh_weight_diag(graph, hessian_set, layer,
                                                    cfg.eptq.hessian_probes, cfg.eptq.seed);
      }
    }
    return 0;
  });

  QuantState state;
  state.gradual = cfg.eptq.gradual;
  state.n_decay = cfg.eptq.effective_n_decay();
  std::map<int, std::vector<int>> degenerate_channels;
  stage("calibrate_thresholds", [&] {
    ThresholdSearchSpec spec;
    spec.metric = cfg.metric;
    for (int layer : graph.weighted_layers()) {
      const LayerSpec& ls = graph.layers[static_cast<std::size_t>(layer)];
      WeightQuantParams params;
      params.bits = ls.bits_weight;
      if (params.bits != 32) {
        const std::vector<double>* h = nullptr;
        auto hit = scores.weight_diag.find(layer);
        if (cfg.metric == ThresholdMetric::HMSE && hit != scores.weight_diag.end()) {
          h = &hit->second;
        }
        ThresholdResult sel = select_threshold(*ls.weights, h, params.bits, spec);
        params.thresholds = std::move(sel.thresholds);
        if (!sel.degenerate_channels.empty()) {
          degenerate_channels[layer] = std::move(sel.degenerate_channels);
        }
        params.rounding = init_rounding_from_weights(*ls.weights, params);
        params.log_scale.assign(params.channels(), 0.0);
      }
      state.weights.emplace(layer, std::move(params));
    }
    return 0;
  });

  std::map<int, bool> act_degenerate;
  stage("calibrate_activations", [&] {
    // Float activations of the calibration head drive the MSE range search.
    std::vector<std::map<int, Tensor>> acts;
    for (const Tensor& x : hessian_set.inputs) {
      acts.push_back(forward_record(graph, x).activations);
    }
    for (int cp : graph.comparison_points) {
      const int bits = graph.layers[static_cast<std::size_t>(cp)].bits_activation;
      if (bits == 32) continue;
      std::vector<Tensor> samples;
      for (const auto& a : acts) samples.push_back(a.at(cp));
      ActRangeResult sel = select_activation_range(samples, bits, 96);
      state.activations[cp] = sel.params;
      if (sel.degenerate) act_degenerate[cp] = true;
      state.p0[cp] = cfg.eptq.p0;
    }
    return 0;
  });

  stage("sla_scores", [&] {
    if (cfg.eptq.weighting == SlaWeighting::Sla) {
      scores.sla = sla_scores(graph, calib, cfg.eptq.hessian_probes, cfg.eptq.seed);
    }
    return 0;
  });

  OptimizeResult opt = stage("optimize", [&] {
    return optimize(graph, calib, state, scores, cfg.eptq);
  });

  QuantizeArtifacts artifacts;
  artifacts.initial_distill_loss = opt.initial_distill_loss;
  artifacts.final_distill_loss = opt.final_distill_loss;
  artifacts.diverged = opt.diverged;

  const fs::path out_dir(cfg.out_dir);
  artifacts.model_json = (out_dir / "quantized.eptq.json").string();
  artifacts.metrics_json = (out_dir / "metrics.json").string();
  artifacts.train_log = (out_dir / "train_log.jsonl").string();

  try {
    stage("write_artifacts", [&] {
      fs::create_directories(out_dir);
      save_quantized_model(graph, opt.state, artifacts.model_json, cfg.config_hash());

      json metrics;
      metrics["config_hash"] = cfg.config_hash();
      metrics["seed"] = cfg.eptq.seed;
      metrics["metric"] = cfg.metric == ThresholdMetric::HMSE ? "hmse" : "mse";
      metrics["sla"] = sla_weighting_name(cfg.eptq.weighting);
      metrics["gradual"] = gradual_mode_name(cfg.eptq.gradual);
      metrics["iterations"] = cfg.eptq.iterations;
      metrics["initial_distill_loss"] = opt.initial_distill_loss;
      metrics["final_distill_loss"] = opt.final_distill_loss;
      metrics["diverged"] = opt.diverged;
      if (!opt.error.empty()) metrics["error"] = opt.error;
      json layers = json::array();
      for (const auto& [layer, params] : opt.state.weights) {
        json jl;
        jl["layer"] = layer;
        jl["name"] = graph.layers[static_cast<std::size_t>(layer)].name;
        jl["bits_weight"] = params.bits;
        if (params.bits != 32) {
          jl["thresholds"] = params.thresholds;
          if (!params.log_scale.empty()) jl["log_scale"] = params.log_scale;
          auto dit = degenerate_channels.find(layer);
          if (dit != degenerate_channels.end()) jl["degenerate_channels"] = dit->second;
        }
        layers.push_back(std::move(jl));
      }
      metrics["layers"] = std::move(layers);
      json points = json::array();
      for (const auto& [cp, params] : opt.state.activations) {
        json jp;
        jp["layer"] = cp;
        jp["bits"] = params.bits;
        jp["lo"] = params.lo;
        jp["hi"] = params.hi;
        if (act_degenerate.count(cp)) jp["degenerate"] = true;
        points.push_back(std::move(jp));
      }
      metrics["activation_points"] = std::move(points);

      std::ofstream mf(artifacts.metrics_json);
      if (!mf) throw std::runtime_error("cannot write " + artifacts.metrics_json);
      mf << metrics.dump(2) << "\n";

      std::ofstream lf(artifacts.train_log);
      if (!lf) throw std::runtime_error("cannot write " + artifacts.train_log);
      for (const auto& entry : opt.log) {
        json jl;
        jl["iter"] = entry.iter;
        jl["distill_loss"] = entry.distill_loss;
        jl["reg_loss"] = entry.reg_loss;
        jl["P_mean"] = entry.p_mean;
        jl["lr"] = entry.lr;
        lf << jl.dump() << "\n";
      }
      return 0;
    });
  } catch (...) {
    std::error_code ec;
    fs::remove(artifacts.model_json, ec);
    fs::remove(fs::path(artifacts.model_json).replace_extension(".bin"), ec);
    fs::remove(artifacts.metrics_json, ec);
    fs::remove(artifacts.train_log, ec);
    throw;
  }

  if (opt.diverged) {
    throw StageError("optimize", "optimization diverged: " + opt.error +
                                     " (last finite state written to " + artifacts.model_json + ")");
  }
  return artifacts;
}

std::string EvaluateReport::to_json() const {
  json j;
  j["samples"] = samples;
  if (accuracy) j["accuracy"] = *accuracy;
  if (mean_loss) j["mean_loss"] = *mean_loss;
  json pp = json::object();
  for (const auto& [layer, d] : per_point_mse) pp[std::to_string(layer)] = d;
  j["per_point_mse"] = std::move(pp);
  return j.dump(2);
}

EvaluateReport run_evaluate(const RunConfig& cfg) {
  LoadedModel model = stage("load_model", [&] { return load_model(cfg.model_path); });
  std::optional<LoadedModel> reference;
  if (!cfg.reference_path.empty()) {
    reference = stage("load_reference", [&] { return load_model(cfg.reference_path); });
    if (reference->graph.comparison_points != model.graph.comparison_points) {
      throw StageError("load_reference", "reference comparison points differ from the model");
    }
  }

  const std::string data_path = cfg.eval_data_path.empty() ? cfg.data_path : cfg.eval_data_path;
  Dataset data = stage("load_dataset", [&] {
    return load_dataset(data_path, cfg.eval_limit == 0 ? SIZE_MAX : cfg.eval_limit);
  });
  if (data.size() == 0) throw StageError("load_dataset", "dataset is empty");
  if (data.inputs.front().shape() != model.graph.input_shape) {
    throw StageError("load_dataset", "dataset sample shape " +
                                         shape_to_string(data.inputs.front().shape()) +
                                         " does not match model input " +
                                         shape_to_string(model.graph.input_shape));
  }

  std::optional<LossHessianModel> loss_model;
  if (cfg.eval_loss == "auto") {
    if (data.has_labels()) loss_model = LossHessianModel{LossKind::CESoftmax, 1.0};
  } else if (!cfg.eval_loss.empty() && cfg.eval_loss != "none") {
    if (!data.has_labels()) {
      throw StageError("evaluate", "loss metric '" + cfg.eval_loss +
                                       "' requires labels but the dataset has none");
    }
    loss_model = LossHessianModel{loss_kind_from_name(cfg.eval_loss), 1.0};
  }

  EvaluateReport report;
  report.samples = data.size();
  std::size_t correct = 0;
  double loss_sum = 0.0;
  std::map<int, double> point_sum;

  const QuantState* quant = model.quant ? &*model.quant : nullptr;
  for (std::size_t s = 0; s < data.size(); ++s) {
    ForwardResult model_fwd = forward_record(model.graph, data.inputs[s], quant);
    ForwardResult ref_fwd = reference ? forward_record(reference->graph, data.inputs[s])
                                      : forward_record(model.graph, data.inputs[s]);
    for (const auto& [layer, zq] : model_fwd.activations) {
      const Tensor& zf = ref_fwd.activations.at(layer);
      double d2 = 0.0;
      for (std::size_t i = 0; i < zq.size(); ++i) {
        const double d = zq[i] - zf[i];
        d2 += d * d;
      }
      point_sum[layer] += d2;
    }
    if (data.has_labels()) {
      const Tensor& out = model_fwd.output;
      std::size_t arg = 0;
      for (std::size_t i = 1; i < out.size(); ++i) {
        if (out[i] > out[arg]) arg = i;
      }
      if (arg == data.labels[s]) ++correct;
      if (loss_model) {
        Tensor one_hot(out.shape());
        if (data.labels[s] >= out.size()) {
          throw StageError("evaluate", "label " + std::to_string(data.labels[s]) +
                                           " out of range for output size " +
                                           std::to_string(out.size()));
        }
        one_hot[data.labels[s]] = 1.0;
        loss_sum += loss_value(*loss_model, one_hot, out);
      }
    }
  }

  if (data.has_labels()) {
    report.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    if (loss_model) report.mean_loss = loss_sum / static_cast<double>(data.size());
  }
  for (const auto& [layer, total] : point_sum) {
    report.per_point_mse[layer] = total / static_cast<double>(data.size());
  }
  return report;
}

std::string HessianReport::to_json() const {
  json j;
  json layers = json::array();
  for (std::size_t i = 0; i < layer_order.size(); ++i) {
    json jl;
    jl["layer"] = layer_order[i];
    jl["lfh_mean"] = layer_scores[i];
    if (!layer_scores_log.empty()) jl["lfh_mean_logn"] = layer_scores_log[i];
    if (!oracle_layer_scores.empty()) {
      jl["oracle_mean"] = oracle_layer_scores[i];
      if (!oracle_layer_scores_log.empty()) jl["oracle_mean_logn"] = oracle_layer_scores_log[i];
    }
    auto sit = per_layer_spearman.find(layer_order[i]);
    if (sit != per_layer_spearman.end()) jl["spearman_vs_oracle"] = sit->second;
    json diag = json::array();
    for (double x : lfh_diag.at(layer_order[i])) diag.push_back(x);
    jl["lfh_diag"] = std::move(diag);
    auto oit = oracle_diag.find(layer_order[i]);
    if (oit != oracle_diag.end()) {
      json od = json::array();
      for (double x : oit->second) od.push_back(x);
      jl["oracle_diag"] = std::move(od);
    }
    layers.push_back(std::move(jl));
  }
  j["layers"] = std::move(layers);
  if (cross_layer_spearman) j["cross_layer_spearman"] = *cross_layer_spearman;
  return j.dump(2);
}

HessianReport run_hessian_report(const RunConfig& cfg) {
  LoadedModel loaded = stage("load_model", [&] { return load_model(cfg.model_path); });
  NetworkGraph graph = stage("fold_batchnorm", [&] { return fold_batchnorm(loaded.graph); });
  Dataset data = stage("load_dataset", [&] {
    return load_dataset(cfg.data_path, static_cast<std::size_t>(cfg.eptq.calibration_samples));
  });

  const auto weighted = graph.weighted_layers();
  if (cfg.with_oracle) {
    for (int layer : weighted) {
      const std::size_t n = graph.layers[static_cast<std::size_t>(layer)].weights->size();
      if (n > kFiniteDiffMaxElements) {
        throw StageError("hessian_report",
                         "layer '" + graph.layers[static_cast<std::size_t>(layer)].name +
                             "' has " + std::to_string(n) +
                             " weight elements, above the oracle limit of " +
                             std::to_string(kFiniteDiffMaxElements));
      }
    }
  }

  HessianReport report;
  stage("hessian_report", [&] {
    for (int layer : weighted) {
      report.lfh_diag[layer] =
          lfh_weight_diag(graph, data, layer, cfg.eptq.hessian_probes, cfg.eptq.seed);
      if (cfg.with_oracle) {
        std::vector<double> diag(report.lfh_diag[layer].size(), 0.0);
        for (const Tensor& x : data.inputs) {
          const Matrix jac = finite_diff_jacobian(graph, x, TargetRef::weight(layer));
          for (std::size_t j = 0; j < jac.cols; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < jac.rows; ++i) acc += jac.at(i, j) * jac.at(i, j);
            diag[j] += acc / static_cast<double>(data.size());
          }
        }
        report.per_layer_spearman[layer] = spearman(report.lfh_diag[layer], diag);
        report.oracle_diag[layer] = std::move(diag);
      }
    }

    for (int layer : weighted) {
      report.layer_order.push_back(layer);
      const auto& h = report.lfh_diag[layer];
      double mean = 0.0;
      for (double x : h) mean += x;
      report.layer_scores.push_back(mean / static_cast<double>(h.size()));
      if (cfg.with_oracle) {
        const auto& od = report.oracle_diag[layer];
        double om = 0.0;
        for (double x : od) om += x;
        report.oracle_layer_scores.push_back(om / static_cast<double>(od.size()));
      }
    }
    auto positive_non_constant = [](const std::vector<double>& v) {
      if (v.size() < 2) return false;
      double mn = v[0], mx = v[0];
      for (double x : v) {
        if (!(x > 0.0)) return false;
        mn = std::min(mn, x);
        mx = std::max(mx, x);
      }
      return mn != mx;
    };
    if (positive_non_constant(report.layer_scores)) {
      report.layer_scores_log = log_normalize(report.layer_scores);
    }
    if (cfg.with_oracle && positive_non_constant(report.oracle_layer_scores)) {
      report.oracle_layer_scores_log = log_normalize(report.oracle_layer_scores);
    }
    if (cfg.with_oracle && report.layer_scores.size() >= 2) {
      report.cross_layer_spearman = spearman(report.layer_scores, report.oracle_layer_scores);
    }
    return 0;
  });
  return report;
}

}  // namespace eptq
