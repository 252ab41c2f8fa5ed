#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "eptq/tensor.hpp"

namespace eptq {

// Rectified-sigmoid stretch constants of the soft rounding function
// h(v) = clamp(sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0, 1).
inline constexpr double kSoftGamma = -0.1;
inline constexpr double kSoftZeta = 1.1;

double soft_round_h(double v);
double soft_round_h_derivative(double v);
// Inverse of h on its invertible region; input is clamped into (0, 1) range.
double soft_round_v_init(double residual);

// Symmetric per-channel weight quantizer parameters. Channel axis is axis 0
// of the weight tensor; step size per channel is
//   s_c = thresholds[c] * exp(log_scale[c]) / 2^(bits-1).
struct WeightQuantParams {
  int bits = 8;
  std::vector<double> thresholds;
  Tensor rounding;               // AdaRound variable v, shaped like the weight
  std::vector<double> log_scale; // trained per-channel scale offset, 0 = calibrated step
  bool hard = false;             // replace h(v) by 1[v >= 0]

  std::size_t channels() const { return thresholds.size(); }
  double step(std::size_t c) const;
};

// Per-tensor affine activation quantizer over [lo, hi] with 2^bits levels.
struct ActQuantParams {
  int bits = 8;
  double lo = 0.0;
  double hi = 0.0;
};

enum class GradualMode { None, Stochastic, Linear };

const char* gradual_mode_name(GradualMode mode);
GradualMode gradual_mode_from_name(const std::string& name);

// Linear decay of the float fraction: P(i) = p0 * max(0, 1 - i/n_decay).
struct GradualSchedule {
  double p0 = 1.0;
  int n_decay = 1;

  double at(int iter) const;
};

// Everything the quantized forward pass needs: per-layer weight quantizers,
// per-comparison-point activation quantizers, the gradual-quantization
// schedule and its current position, and optional trained bias overrides.
struct QuantState {
  std::map<int, WeightQuantParams> weights;
  std::map<int, ActQuantParams> activations;
  std::map<int, double> p0;       // per comparison point; missing = 0 (fully quantized)
  int n_decay = 1;
  int iteration = 0;
  GradualMode gradual = GradualMode::Linear;
  std::map<int, Tensor> bias_override;
  std::uint64_t stochastic_seed = 0;

  // Weight tensors already hold quantized values (reloaded artifact); the
  // forward pass must not quantize them again.
  bool weights_baked = false;

  double schedule_p(int layer, int iter) const;
};

// Round-to-nearest on the symmetric per-channel grid; ties round half away
// from zero. bits == 32 returns the input unchanged.
Tensor quantize_weights_nearest(const Tensor& w, const WeightQuantParams& p);

// AdaRound soft quantizer: w~ = clamp(floor(w/s) + h(v), -2^(b-1), 2^(b-1)-1) * s.
// hard = true uses 1[v >= 0] instead of h(v).
Tensor quantize_weights_soft(const Tensor& w, const WeightQuantParams& p, bool hard);

// Initializes the rounding variable so h(v) equals the rounding residual
// w/s - floor(w/s); the hard path then reproduces round-to-nearest.
Tensor init_rounding_from_weights(const Tensor& w, const WeightQuantParams& p);

// Integer grid codes of the hard-rounded weights, clamped to the bit range.
std::vector<long> weight_codes_hard(const Tensor& w, const WeightQuantParams& p);

Tensor quantize_activation(const Tensor& z, const ActQuantParams& p);

// Deterministic convex mix of Eq.-11 style gradual quantization.
Tensor gradual_mix(const Tensor& z_float, const Tensor& z_quant, double p_float);

double schedule_p(const GradualSchedule& sched, int iter);

}  // namespace eptq
