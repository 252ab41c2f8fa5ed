#include "eptq/bn_fold.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace eptq {

NetworkGraph fold_batchnorm(const NetworkGraph& graph) {
  graph.validate();

  NetworkGraph out;
  out.input_shape = graph.input_shape;

  const int n = static_cast<int>(graph.layers.size());
  std::vector<LayerSpec> layers = graph.layers;  // weights are folded in place
  std::vector<int> alias(n);                     // BN layer id -> surviving producer id
  for (int i = 0; i < n; ++i) alias[i] = i;

  // Consumers per layer; a weighted layer feeding anything besides its own
  // BatchNorm cannot be folded without changing that other consumer.
  std::vector<int> consumer_count(n, 0);
  for (const auto& layer : graph.layers) {
    for (int in : layer.inputs) {
      if (in >= 0) consumer_count[static_cast<std::size_t>(in)]++;
    }
  }

  for (int i = 0; i < n; ++i) {
    LayerSpec& bn_layer = layers[static_cast<std::size_t>(i)];
    if (bn_layer.kind != LayerKind::BatchNorm) continue;
    const int pred_id = bn_layer.inputs[0];
    if (pred_id < 0) {
      throw std::invalid_argument("BatchNorm '" + bn_layer.name +
                                  "' has no foldable predecessor (graph input)");
    }
    LayerSpec& pred = layers[static_cast<std::size_t>(pred_id)];
    if (!pred.has_weights()) {
      throw std::invalid_argument("BatchNorm '" + bn_layer.name +
                                  "' does not follow a Dense or Conv2d layer");
    }
    if (consumer_count[static_cast<std::size_t>(pred_id)] != 1) {
      throw std::invalid_argument("BatchNorm '" + bn_layer.name + "' predecessor '" + pred.name +
                                  "' has other consumers; folding would change them");
    }

    const BatchNormAttrs& bn = *bn_layer.bn;
    const std::size_t channels = pred.weights->dim(0);
    if (bn.gamma.size() != channels) {
      throw std::invalid_argument("BatchNorm '" + bn_layer.name + "' channel count " +
                                  std::to_string(bn.gamma.size()) +
                                  " does not match producer output channels " +
                                  std::to_string(channels));
    }

    Tensor& w = *pred.weights;
    const std::size_t per_channel = w.size() / channels;
    Tensor bias = pred.bias ? *pred.bias : Tensor({channels});
    for (std::size_t c = 0; c < channels; ++c) {
      const double scale = bn.gamma[c] / std::sqrt(bn.variance[c] + bn.eps);
      for (std::size_t k = 0; k < per_channel; ++k) w[c * per_channel + k] *= scale;
      bias[c] = scale * (bias[c] - bn.mean[c]) + bn.beta[c];
    }
    pred.bias = std::move(bias);
    alias[i] = pred_id;
  }

  // Rebuild without the BatchNorm layers, remapping edges and comparison
  // points through the alias table.
  std::vector<int> new_index(n, -1);
  for (int i = 0; i < n; ++i) {
    if (layers[static_cast<std::size_t>(i)].kind == LayerKind::BatchNorm) continue;
    LayerSpec layer = std::move(layers[static_cast<std::size_t>(i)]);
    for (int& in : layer.inputs) {
      if (in >= 0) in = new_index[static_cast<std::size_t>(alias[static_cast<std::size_t>(in)])];
    }
    out.layers.push_back(std::move(layer));
    new_index[static_cast<std::size_t>(i)] = static_cast<int>(out.layers.size()) - 1;
  }
  for (int cp : graph.comparison_points) {
    const int mapped = new_index[static_cast<std::size_t>(alias[static_cast<std::size_t>(cp)])];
    if (std::find(out.comparison_points.begin(), out.comparison_points.end(), mapped) ==
        out.comparison_points.end()) {
      out.comparison_points.push_back(mapped);
    }
  }

  out.validate();
  return out;
}

}  // namespace eptq
