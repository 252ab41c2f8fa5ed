#include "eptq/quantizers.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace eptq {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_channel_layout(const Tensor& w, const WeightQuantParams& p) {
  if (w.rank() == 0 || w.dim(0) != p.channels()) {
    throw std::invalid_argument("weight channel axis (" +
                                std::to_string(w.rank() ? w.dim(0) : 0) +
                                ") does not match threshold count (" +
                                std::to_string(p.channels()) + ")");
  }
  for (double t : p.thresholds) {
    if (!(t > 0.0)) throw std::invalid_argument("threshold must be positive");
  }
  if (!p.log_scale.empty() && p.log_scale.size() != p.channels()) {
    throw std::invalid_argument("log_scale length does not match channel count");
  }
}

}  // namespace

double soft_round_h(double v) {
  const double s = sigmoid(v) * (kSoftZeta - kSoftGamma) + kSoftGamma;
  if (s <= 0.0) return 0.0;
  if (s >= 1.0) return 1.0;
  return s;
}

double soft_round_h_derivative(double v) {
  const double s = sigmoid(v) * (kSoftZeta - kSoftGamma) + kSoftGamma;
  if (s <= 0.0 || s >= 1.0) return 0.0;
  const double sig = sigmoid(v);
  return sig * (1.0 - sig) * (kSoftZeta - kSoftGamma);
}

double soft_round_v_init(double residual) {
  // h(v) = r requires sigmoid(v) = (r - GAMMA) / (ZETA - GAMMA), which lies in
  // (0, 1) for every residual in [0, 1]. Residuals of exactly 0 or 1 would
  // start h on its clamp boundary where the gradient is one-sided; nudge them
  // inside.
  const double r = std::min(std::max(residual, 1e-6), 1.0 - 1e-6);
  const double target = (r - kSoftGamma) / (kSoftZeta - kSoftGamma);
  return std::log(target / (1.0 - target));
}

double WeightQuantParams::step(std::size_t c) const {
  const double t = thresholds[c];
  const double ls = log_scale.empty() ? 0.0 : log_scale[c];
  return t * std::exp(ls) / static_cast<double>(1LL << (bits - 1));
}

const char* gradual_mode_name(GradualMode mode) {
  switch (mode) {
    case GradualMode::None: return "none";
    case GradualMode::Stochastic: return "stochastic";
    case GradualMode::Linear: return "linear";
  }
  return "?";
}

GradualMode gradual_mode_from_name(const std::string& name) {
  if (name == "none") return GradualMode::None;
  if (name == "stochastic") return GradualMode::Stochastic;
  if (name == "linear") return GradualMode::Linear;
  throw std::invalid_argument("unknown gradual mode '" + name + "'");
}

double GradualSchedule::at(int iter) const {
  if (n_decay <= 0) return 0.0;
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(n_decay);
  return p0 * std::max(0.0, frac);
}

double schedule_p(const GradualSchedule& sched, int iter) { return sched.at(iter); }

double QuantState::schedule_p(int layer, int iter) const {
  if (gradual == GradualMode::None) return 0.0;
  auto it = p0.find(layer);
  const double p0_layer = (it == p0.end()) ? 0.0 : it->second;
  GradualSchedule sched{p0_layer, n_decay};
  return sched.at(iter);
}

Tensor quantize_weights_nearest(const Tensor& w, const WeightQuantParams& p) {
  if (p.bits == 32) return w;
  check_channel_layout(w, p);
  const double qmin = -static_cast<double>(1LL << (p.bits - 1));
  const double qmax = static_cast<double>(1LL << (p.bits - 1)) - 1.0;
  const std::size_t per_channel = w.size() / p.channels();
  Tensor out(w.shape());
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const double s = p.step(c);
    for (std::size_t i = 0; i < per_channel; ++i) {
      const std::size_t idx = c * per_channel + i;
      double q = round_half_away(w[idx] / s);
      q = std::min(std::max(q, qmin), qmax);
      out[idx] = q * s;
    }
  }
  return out;
}

Tensor quantize_weights_soft(const Tensor& w, const WeightQuantParams& p, bool hard) {
  if (p.bits == 32) return w;
  check_channel_layout(w, p);
  if (!p.rounding.same_shape(w)) {
    throw std::invalid_argument("rounding variable shape " +
                                shape_to_string(p.rounding.shape()) +
                                " does not match weight shape " + shape_to_string(w.shape()));
  }
  const double qmin = -static_cast<double>(1LL << (p.bits - 1));
  const double qmax = static_cast<double>(1LL << (p.bits - 1)) - 1.0;
  const std::size_t per_channel = w.size() / p.channels();
  Tensor out(w.shape());
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const double s = p.step(c);
    for (std::size_t i = 0; i < per_channel; ++i) {
      const std::size_t idx = c * per_channel + i;
      const double v = p.rounding[idx];
      const double h = hard ? (v >= 0.0 ? 1.0 : 0.0) : soft_round_h(v);
      double q = std::floor(w[idx] / s) + h;
      q = std::min(std::max(q, qmin), qmax);
      out[idx] = q * s;
    }
  }
  return out;
}

Tensor init_rounding_from_weights(const Tensor& w, const WeightQuantParams& p) {
  check_channel_layout(w, p);
  const std::size_t per_channel = w.size() / p.channels();
  Tensor v(w.shape());
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const double s = p.step(c);
    for (std::size_t i = 0; i < per_channel; ++i) {
      const std::size_t idx = c * per_channel + i;
      const double ratio = w[idx] / s;
      v[idx] = soft_round_v_init(ratio - std::floor(ratio));
    }
  }
  return v;
}

std::vector<long> weight_codes_hard(const Tensor& w, const WeightQuantParams& p) {
  check_channel_layout(w, p);
  const long qmin = -(1L << (p.bits - 1));
  const long qmax = (1L << (p.bits - 1)) - 1;
  const std::size_t per_channel = w.size() / p.channels();
  std::vector<long> codes(w.size());
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const double s = p.step(c);
    for (std::size_t i = 0; i < per_channel; ++i) {
      const std::size_t idx = c * per_channel + i;
      const double v = p.rounding[idx];
      const double h = v >= 0.0 ? 1.0 : 0.0;
      long q = static_cast<long>(std::floor(w[idx] / s) + h);
      codes[idx] = std::min(std::max(q, qmin), qmax);
    }
  }
  return codes;
}

Tensor quantize_activation(const Tensor& z, const ActQuantParams& p) {
  if (p.bits == 32) return z;
  if (!(p.lo < p.hi)) throw std::invalid_argument("activation range is degenerate");
  const double levels = static_cast<double>((1LL << p.bits) - 1);
  const double delta = (p.hi - p.lo) / levels;
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    double q = round_half_away((z[i] - p.lo) / delta);
    q = std::min(std::max(q, 0.0), levels);
    out[i] = q * delta + p.lo;
  }
  return out;
}

Tensor gradual_mix(const Tensor& z_float, const Tensor& z_quant, double p_float) {
  if (!z_float.same_shape(z_quant)) {
    throw std::invalid_argument("gradual_mix shape mismatch");
  }
  if (p_float < 0.0 || p_float > 1.0) {
    throw std::invalid_argument("mix fraction must lie in [0, 1]");
  }
  Tensor out(z_float.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = p_float * z_float[i] + (1.0 - p_float) * z_quant[i];
  }
  return out;
}

}  // namespace eptq
