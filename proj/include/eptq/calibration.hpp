#pragma once

#include <vector>

#include "eptq/quantizers.hpp"
#include "eptq/tensor.hpp"

namespace eptq {

enum class ThresholdMetric { MSE, HMSE };

// Per-channel threshold candidates are shrinkage factors applied to the
// channel's max-abs value: alpha_j = 1 - j/128 for j = 0..n_steps-1, so the
// grid always includes alpha = 1.
struct ThresholdSearchSpec {
  int n_steps = 96;
  ThresholdMetric metric = ThresholdMetric::HMSE;

  double alpha(int j) const { return 1.0 - static_cast<double>(j) / 128.0; }
};

// Hessian-weighted squared reconstruction error sum_i h_i (w_i - wq_i)^2.
// The bound's unknown constant c is dropped; it cannot change an argmin.
double hmse(const Tensor& w, const Tensor& w_q, const std::vector<double>& h);

struct ThresholdResult {
  std::vector<double> thresholds;
  std::vector<int> degenerate_channels;  // all-zero channels given a fallback t
};

// Grid argmin of the metric per channel; ties break toward the larger
// threshold. Pass h = nullptr for the plain-MSE baseline. h is indexed like
// the flattened weight.
ThresholdResult select_threshold(const Tensor& w, const std::vector<double>* h, int bits,
                                 const ThresholdSearchSpec& spec);

struct ActRangeResult {
  ActQuantParams params;
  bool degenerate = false;  // constant calibration tensors, width-eps fallback
};

// MSE grid search over symmetric shrinkages of [min, max] across all
// calibration tensors.
ActRangeResult select_activation_range(const std::vector<Tensor>& samples, int bits, int n_steps);

}  // namespace eptq
