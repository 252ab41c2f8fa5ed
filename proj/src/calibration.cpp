#include "eptq/calibration.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace eptq {

double hmse(const Tensor& w, const Tensor& w_q, const std::vector<double>& h) {
  if (w.size() != w_q.size()) throw std::invalid_argument("hmse: tensor sizes differ");
  if (h.size() != w.size()) throw std::invalid_argument("hmse: weight vector length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (h[i] < 0.0) throw std::invalid_argument("hmse: negative weighting entry");
    const double d = w[i] - w_q[i];
    acc += h[i] * d * d;
  }
  return acc;
}

ThresholdResult select_threshold(const Tensor& w, const std::vector<double>* h, int bits,
                                 const ThresholdSearchSpec& spec) {
  if (bits < 2) throw std::invalid_argument("threshold search needs bits >= 2");
  if (spec.n_steps < 1 || spec.alpha(spec.n_steps - 1) <= 0.0) {
    throw std::invalid_argument("threshold grid is empty or non-positive");
  }
  if (w.rank() == 0) throw std::invalid_argument("weight tensor has no channel axis");
  if (h && h->size() != w.size()) {
    throw std::invalid_argument("weighting vector length does not match weight tensor");
  }

  const std::size_t channels = w.dim(0);
  const std::size_t per_channel = w.size() / channels;
  const double qmin = -static_cast<double>(1LL << (bits - 1));
  const double qmax = static_cast<double>(1LL << (bits - 1)) - 1.0;
  const double denom = static_cast<double>(1LL << (bits - 1));

  ThresholdResult result;
  result.thresholds.resize(channels);

  for (std::size_t c = 0; c < channels; ++c) {
    const double* wc = w.data() + c * per_channel;
    double amax = 0.0;
    for (std::size_t i = 0; i < per_channel; ++i) amax = std::max(amax, std::fabs(wc[i]));

    if (amax == 0.0) {
      result.thresholds[c] = spec.alpha(spec.n_steps - 1);
      result.degenerate_channels.push_back(static_cast<int>(c));
      continue;
    }

    double best_t = 0.0;
    double best_err = std::numeric_limits<double>::infinity();
    for (int j = 0; j < spec.n_steps; ++j) {
      const double t = spec.alpha(j) * amax;
      const double s = t / denom;
      double err = 0.0;
      for (std::size_t i = 0; i < per_channel; ++i) {
        double q = round_half_away(wc[i] / s);
        q = std::min(std::max(q, qmin), qmax);
        const double d = wc[i] - q * s;
        const double weight = h ? (*h)[c * per_channel + i] : 1.0;
        err += weight * d * d;
      }
      // Grid runs from the largest threshold downward, so keeping only strict
      // improvements breaks ties toward larger t.
      if (err < best_err) {
        best_err = err;
        best_t = t;
      }
    }
    result.thresholds[c] = best_t;
  }
  return result;
}

ActRangeResult select_activation_range(const std::vector<Tensor>& samples, int bits,
                                       int n_steps) {
  if (samples.empty()) throw std::invalid_argument("activation range needs calibration tensors");
  if (n_steps < 1) throw std::invalid_argument("activation grid needs at least one step");

  double lo = samples[0][0], hi = samples[0][0];
  for (const Tensor& t : samples) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      lo = std::min(lo, t[i]);
      hi = std::max(hi, t[i]);
    }
  }

  ActRangeResult result;
  result.params.bits = bits;
  if (lo == hi) {
    const double eps = 1e-6;
    result.params.lo = lo - eps / 2.0;
    result.params.hi = lo + eps / 2.0;
    result.degenerate = true;
    return result;
  }
  if (bits == 32) {
    result.params.lo = lo;
    result.params.hi = hi;
    return result;
  }

  const double mid = 0.5 * (lo + hi);
  const double half = 0.5 * (hi - lo);
  const double levels = static_cast<double>((1LL << bits) - 1);

  double best_err = std::numeric_limits<double>::infinity();
  double best_lo = lo, best_hi = hi;
  for (int j = 0; j < n_steps; ++j) {
    const double alpha = 1.0 - static_cast<double>(j) / 128.0;
    if (alpha <= 0.0) break;
    const double clo = mid - alpha * half;
    const double chi = mid + alpha * half;
    const double delta = (chi - clo) / levels;
    double err = 0.0;
    for (const Tensor& t : samples) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        double q = round_half_away((t[i] - clo) / delta);
        q = std::min(std::max(q, 0.0), levels);
        const double d = t[i] - (q * delta + clo);
        err += d * d;
      }
    }
    if (err < best_err) {  // ties toward the wider range
      best_err = err;
      best_lo = clo;
      best_hi = chi;
    }
  }
  result.params.lo = best_lo;
  result.params.hi = best_hi;
  return result;
}

}  // namespace eptq
