#include "eptq/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "eptq/rng.hpp"

namespace eptq {

const char* sla_weighting_name(SlaWeighting w) {
  return w == SlaWeighting::Sla ? "sla" : "average";
}

SlaWeighting sla_weighting_from_name(const std::string& name) {
  if (name == "sla") return SlaWeighting::Sla;
  if (name == "average") return SlaWeighting::Average;
  throw std::invalid_argument("unknown weighting '" + name + "'");
}

double EptqConfig::beta_at(int iter) const {
  const int warmup = static_cast<int>(warmup_fraction * iterations);
  if (iter <= warmup) return beta_start;
  const double window = anneal_fraction * static_cast<double>(iterations - warmup);
  if (window <= 1.0) return beta_end;
  const double frac = static_cast<double>(iter - warmup) / window;
  return beta_start + (beta_end - beta_start) * std::min(1.0, frac);
}

double EptqConfig::lambda_at(int iter) const {
  const int warmup = static_cast<int>(warmup_fraction * iterations);
  return iter < warmup ? 0.0 : lambda_reg;
}

double f_reg(const Tensor& v, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += 1.0 - std::pow(std::fabs(2.0 * soft_round_h(v[i]) - 1.0), beta);
  }
  return acc;
}

Tensor f_reg_gradient(const Tensor& v, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  Tensor g(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t = 2.0 * soft_round_h(v[i]) - 1.0;
    const double at = std::fabs(t);
    if (at == 0.0 || at >= 1.0) continue;  // flat at the midpoint and when saturated
    const double sign = t > 0.0 ? 1.0 : -1.0;
    g[i] = -beta * std::pow(at, beta - 1.0) * sign * 2.0 * soft_round_h_derivative(v[i]);
  }
  return g;
}

void RAdam::step(std::map<std::string, Tensor*>& params,
                 const std::map<std::string, Tensor>& grads, double lr) {
  step_ += 1;
  const double t = static_cast<double>(step_);
  const double rho_inf = 2.0 / (1.0 - beta2_) - 1.0;
  const double beta2_t = std::pow(beta2_, t);
  const double beta1_t = std::pow(beta1_, t);
  const double rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t);

  for (auto& [name, param] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (!g.same_shape(*param)) throw std::invalid_argument("gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) throw std::runtime_error("non-finite gradient for " + name);
    }

    Tensor& m = m_.try_emplace(name, Tensor(param->shape())).first->second;
    Tensor& v = v_.try_emplace(name, Tensor(param->shape())).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double m_hat = m[i] / (1.0 - beta1_t);
      if (rho_t > 4.0) {
        const double v_hat = std::sqrt(v[i] / (1.0 - beta2_t));
        const double rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                                      ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
        (*param)[i] -= lr * rect * m_hat / (v_hat + eps_);
      } else {
        (*param)[i] -= lr * m_hat;
      }
    }
  }
}

KdLossResult kd_loss(const NetworkGraph& graph,
                     const std::vector<const std::map<int, Tensor>*>& float_acts,
                     const std::vector<ForwardResult>& quant_fwds,
                     const std::vector<std::map<int, double>>& sla_weights,
                     const QuantState& state, double lambda_reg, double beta, bool want_scale_grad,
                     bool want_bias_grad) {
  if (float_acts.size() != quant_fwds.size() || float_acts.size() != sla_weights.size()) {
    throw std::invalid_argument("kd_loss: per-sample argument lengths differ");
  }
  const std::size_t batch = float_acts.size();
  if (batch == 0) throw std::invalid_argument("kd_loss: empty batch");
  const double inv_batch = 1.0 / static_cast<double>(batch);

  KdLossResult result;
  for (std::size_t s = 0; s < batch; ++s) {
    const Tape& tape = quant_fwds[s].tape;
    std::map<int, Tensor> seeds;
    for (const auto& [layer, node] : tape.comparison_node) {
      auto fit = float_acts[s]->find(layer);
      if (fit == float_acts[s]->end()) {
        throw std::invalid_argument("kd_loss: float activations missing comparison layer " +
                                    std::to_string(layer));
      }
      auto uit = sla_weights[s].find(layer);
      if (uit == sla_weights[s].end()) {
        throw std::invalid_argument("kd_loss: attention score missing for layer " +
                                    std::to_string(layer));
      }
      const Tensor& zf = fit->second;
      const Tensor& zq = tape.value(node);
      if (!zf.same_shape(zq)) {
        throw std::invalid_argument("kd_loss: activation shape mismatch at layer " +
                                    std::to_string(layer));
      }
      const double u = uit->second;
      Tensor seed(zq.shape());
      double dist = 0.0;
      for (std::size_t i = 0; i < zq.size(); ++i) {
        const double d = zq[i] - zf[i];
        dist += d * d;
        seed[i] = 2.0 * u * d * inv_batch;
      }
      result.distill += u * dist * inv_batch;
      seeds.emplace(node, std::move(seed));
    }

    std::vector<int> targets;
    for (const auto& [layer, node] : tape.rounding_node) targets.push_back(node);
    if (want_scale_grad) {
      for (const auto& [layer, node] : tape.logscale_node) targets.push_back(node);
    }
    if (want_bias_grad) {
      for (const auto& [layer, node] : tape.bias_node) targets.push_back(node);
    }
    auto grads = backward_accumulate(tape, seeds, targets);

    auto accumulate = [](std::map<int, Tensor>& dst, int layer, const Tensor& g) {
      auto [it, inserted] = dst.try_emplace(layer, g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    };
    for (const auto& [layer, node] : tape.rounding_node) {
      accumulate(result.grad_rounding, layer, grads.at(node));
    }
    if (want_scale_grad) {
      for (const auto& [layer, node] : tape.logscale_node) {
        accumulate(result.grad_logscale, layer, grads.at(node));
      }
    }
    if (want_bias_grad) {
      for (const auto& [layer, node] : tape.bias_node) {
        accumulate(result.grad_bias, layer, grads.at(node));
      }
    }
  }

  // Rounding regularizer: direct closed form on the state's v tensors.
  if (lambda_reg != 0.0) {
    for (const auto& [layer, params] : state.weights) {
      if (params.bits == 32) continue;
      result.reg += lambda_reg * f_reg(params.rounding, beta);
      Tensor g = f_reg_gradient(params.rounding, beta);
      auto [it, inserted] = result.grad_rounding.try_emplace(layer, g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += lambda_reg * g[i];
    }
  }

  result.total = result.distill + result.reg;
  if (!std::isfinite(result.total)) throw std::runtime_error("kd_loss: loss is not finite");
  return result;
}

namespace {

std::map<int, Tensor> float_activation_cache_entry(const NetworkGraph& graph, const Tensor& x) {
  return forward_record(graph, x).activations;
}

std::map<int, double> weights_for_sample(const NetworkGraph& graph, const HessianScores& scores,
                                         SlaWeighting weighting, int sample) {
  std::map<int, double> w;
  const double avg = 1.0 / static_cast<double>(graph.comparison_points.size());
  for (int layer : graph.comparison_points) {
    w[layer] = (weighting == SlaWeighting::Sla) ? scores.sla_at(sample, layer) : avg;
  }
  return w;
}

}  // namespace

double distillation_loss(const NetworkGraph& graph, const Dataset& data, const QuantState& state,
                         const HessianScores& scores, SlaWeighting weighting, bool hard_rounding) {
  QuantState measured = state;
  measured.iteration = std::max(measured.n_decay, 1);  // activations fully quantized
  for (auto& [layer, params] : measured.weights) params.hard = hard_rounding;

  double total = 0.0;
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto float_acts = forward_record(graph, data.inputs[s]).activations;
    const auto quant_acts = forward_record(graph, data.inputs[s], &measured).activations;
    const auto u = weights_for_sample(graph, scores, weighting, static_cast<int>(s));
    for (const auto& [layer, zq] : quant_acts) {
      const Tensor& zf = float_acts.at(layer);
      double dist = 0.0;
      for (std::size_t i = 0; i < zq.size(); ++i) {
        const double d = zq[i] - zf[i];
        dist += d * d;
      }
      total += u.at(layer) * dist;
    }
  }
  return total / static_cast<double>(data.size());
}

OptimizeResult optimize(const NetworkGraph& graph, const Dataset& data,
                        const QuantState& quant_init, const HessianScores& scores,
                        const EptqConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("optimize: empty calibration set");

  OptimizeResult result;
  result.state = quant_init;
  QuantState& state = result.state;
  state.n_decay = cfg.effective_n_decay();
  state.gradual = cfg.gradual;

  result.initial_distill_loss =
      distillation_loss(graph, data, state, scores, cfg.weighting, /*hard=*/true);
  if (cfg.iterations == 0) {
    result.final_distill_loss = result.initial_distill_loss;
    return result;
  }

  // Teacher activations are cached once; the float model never changes.
  std::vector<std::map<int, Tensor>> teacher(data.size());
  for (std::size_t s = 0; s < data.size(); ++s) {
    teacher[s] = float_activation_cache_entry(graph, data.inputs[s]);
  }

  if (cfg.optimize_bias) {
    for (int layer : graph.weighted_layers()) {
      if (state.bias_override.count(layer)) continue;
      const auto& bias = graph.layers[static_cast<std::size_t>(layer)].bias;
      if (bias) state.bias_override.emplace(layer, *bias);
    }
  }
  for (auto& [layer, params] : state.weights) {
    if (params.bits != 32 && params.log_scale.empty()) {
      params.log_scale.assign(params.channels(), 0.0);
    }
  }

  RAdam radam;
  Rng batch_rng = Rng::stream(cfg.seed, 0xBA7C4);

  const int batch = std::max(1, std::min<int>(cfg.batch_size, static_cast<int>(data.size())));
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    state.iteration = iter;

    std::vector<std::size_t> indices(static_cast<std::size_t>(batch));
    for (auto& idx : indices) idx = batch_rng.next_below(data.size());

    std::vector<ForwardResult> fwds;
    std::vector<const std::map<int, Tensor>*> float_acts;
    std::vector<std::map<int, double>> sla_w;
    fwds.reserve(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const std::size_t s = indices[b];
      if (cfg.gradual == GradualMode::Stochastic) {
        state.stochastic_seed = cfg.seed ^ (static_cast<std::uint64_t>(iter) << 20) ^ s;
      }
      fwds.push_back(forward_record(graph, data.inputs[s], &state));
      float_acts.push_back(&teacher[s]);
      sla_w.push_back(weights_for_sample(graph, scores, cfg.weighting, static_cast<int>(s)));
    }

    KdLossResult loss;
    try {
      loss = kd_loss(graph, float_acts, fwds, sla_w, state, cfg.lambda_at(iter),
                     cfg.beta_at(iter), cfg.optimize_scale, cfg.optimize_bias);
    } catch (const std::runtime_error& e) {
      result.diverged = true;
      result.error = e.what();
      break;
    }

    std::map<std::string, Tensor*> params;
    std::map<std::string, Tensor> grads;
    for (auto& [layer, wq] : state.weights) {
      if (wq.bits == 32) continue;
      const std::string key = "v/" + std::to_string(layer);
      params[key] = &wq.rounding;
      auto git = loss.grad_rounding.find(layer);
      if (git != loss.grad_rounding.end()) grads[key] = git->second;
    }
    std::map<int, Tensor> logscale_tensors;
    if (cfg.optimize_scale) {
      for (auto& [layer, wq] : state.weights) {
        if (wq.bits == 32) continue;
        auto git = loss.grad_logscale.find(layer);
        if (git == loss.grad_logscale.end()) continue;
        logscale_tensors.emplace(layer,
                                 Tensor({wq.log_scale.size()}, wq.log_scale));
        const std::string key = "s/" + std::to_string(layer);
        params[key] = &logscale_tensors.at(layer);
        grads[key] = git->second;
      }
    }
    if (cfg.optimize_bias) {
      for (auto& [layer, bias] : state.bias_override) {
        auto git = loss.grad_bias.find(layer);
        if (git == loss.grad_bias.end()) continue;
        const std::string key = "b/" + std::to_string(layer);
        params[key] = &bias;
        grads[key] = git->second;
      }
    }

    try {
      radam.step(params, grads, cfg.learning_rate);
    } catch (const std::runtime_error& e) {
      result.diverged = true;
      result.error = e.what();
      break;
    }
    for (auto& [layer, tensor] : logscale_tensors) {
      state.weights.at(layer).log_scale = tensor.values();
    }

    double p_mean = 0.0;
    if (!graph.comparison_points.empty()) {
      for (int cp : graph.comparison_points) p_mean += state.schedule_p(cp, iter);
      p_mean /= static_cast<double>(graph.comparison_points.size());
    }
    result.log.push_back({iter, loss.distill, loss.reg, p_mean, cfg.learning_rate});
  }

  for (auto& [layer, params] : state.weights) params.hard = true;
  state.iteration = cfg.iterations;
  result.final_distill_loss =
      distillation_loss(graph, data, state, scores, cfg.weighting, /*hard=*/true);
  return result;
}

}  // namespace eptq
