#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "eptq/graph.hpp"
#include "eptq/hessian.hpp"
#include "eptq/quantizers.hpp"
#include "eptq/tape.hpp"

namespace eptq {

enum class SlaWeighting { Sla, Average };

const char* sla_weighting_name(SlaWeighting w);
SlaWeighting sla_weighting_from_name(const std::string& name);

// Every tunable of the rounding-optimization workflow. Desk-scale defaults;
// the documented reference settings (lr 0.01, lambda_reg 10, M 50, 64 Hessian
// samples, P0 1.0) are kept where they are scale-free.
struct EptqConfig {
  int iterations = 2000;
  int batch_size = 16;
  double learning_rate = 0.01;
  double lambda_reg = 10.0;
  double beta_start = 20.0;
  double beta_end = 2.0;
  double warmup_fraction = 0.2;  // lambda_reg inactive, beta frozen
  double anneal_fraction = 0.5;  // beta reaches beta_end this far past warmup
  double p0 = 1.0;
  int n_decay = -1;  // -1: iterations / 2
  int hessian_probes = 50;
  int hmse_samples = 64;
  int calibration_samples = 256;
  std::uint64_t seed = 0;
  bool optimize_scale = true;
  bool optimize_bias = true;
  GradualMode gradual = GradualMode::Linear;
  SlaWeighting weighting = SlaWeighting::Sla;

  int effective_n_decay() const { return n_decay >= 0 ? n_decay : iterations / 2; }
  double beta_at(int iter) const;
  double lambda_at(int iter) const;
};

// Rounding regularizer sum_i (1 - |2 h(v_i) - 1|^beta); zero exactly when
// every h(v) sits at 0 or 1.
double f_reg(const Tensor& v, double beta);
Tensor f_reg_gradient(const Tensor& v, double beta);

// One RAdam step per named parameter; moments keyed by name. Falls back to
// un-adapted momentum SGD while the variance rectification is undefined.
class RAdam {
 public:
  explicit RAdam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::map<std::string, Tensor*>& params, const std::map<std::string, Tensor>& grads,
            double lr);

  long step_count() const { return step_; }

 private:
  double beta1_, beta2_, eps_;
  long step_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

struct KdLossResult {
  double total = 0.0;
  double distill = 0.0;
  double reg = 0.0;
  std::map<int, Tensor> grad_rounding;
  std::map<int, Tensor> grad_logscale;
  std::map<int, Tensor> grad_bias;
};

// Batch-mean SLA-weighted distillation loss plus the rounding regularizer,
// with gradients pulled through the quantized forward tapes in one reverse
// sweep per sample. float_acts[i] and quant_fwds[i] describe sample i;
// sla_weights[i] maps comparison layer to that sample's weight.
KdLossResult kd_loss(const NetworkGraph& graph,
                     const std::vector<const std::map<int, Tensor>*>& float_acts,
                     const std::vector<ForwardResult>& quant_fwds,
                     const std::vector<std::map<int, double>>& sla_weights,
                     const QuantState& state, double lambda_reg, double beta, bool want_scale_grad,
                     bool want_bias_grad);

struct OptimLogEntry {
  int iter = 0;
  double distill_loss = 0.0;
  double reg_loss = 0.0;
  double p_mean = 0.0;
  double lr = 0.0;
};

struct OptimizeResult {
  QuantState state;
  std::vector<OptimLogEntry> log;
  bool diverged = false;
  std::string error;
  // Deployed (hard-rounded, fully quantized activations) distillation loss on
  // the whole calibration set before and after optimization.
  double initial_distill_loss = 0.0;
  double final_distill_loss = 0.0;
};

// Algorithm steps 5-6: mini-batch RAdam over the rounding variables (plus
// per-channel scale offsets and biases when enabled), with gradual activation
// quantization and beta annealing. Returns the hard-rounded final state and
// the per-iteration training log.
OptimizeResult optimize(const NetworkGraph& graph, const Dataset& data,
                        const QuantState& quant_init, const HessianScores& scores,
                        const EptqConfig& cfg);

// Calibration-set distillation loss of a state measured with activations
// fully quantized (schedule position past decay); shared by the optimizer'
// s improvement bookkeeping and by evaluation reports.
double distillation_loss(const NetworkGraph& graph, const Dataset& data, const QuantState& state,
                         const HessianScores& scores, SlaWeighting weighting, bool hard_rounding);

}  // namespace eptq
