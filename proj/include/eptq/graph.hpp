#pragma once

#include <optional>
#include <string>
#include <vector>

#include "eptq/tensor.hpp"

namespace eptq {

enum class LayerKind {
  Dense,
  Conv2d,
  BatchNorm,
  Relu,
  Add,
  Concat,
  Softmax,
  Sigmoid,
  Flatten,
  AvgPool,
};

const char* layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

struct ConvAttrs {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

struct PoolAttrs {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
};

struct BatchNormAttrs {
  Tensor gamma;
  Tensor beta;
  Tensor mean;
  Tensor variance;
  double eps = 1e-5;
};

// One primitive op in the network. `inputs` holds indices of earlier layers;
// -1 refers to the graph input tensor. Weighted layers (Dense, Conv2d) carry
// the weight/bias tensors and per-layer quantization bit-widths.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Relu;
  std::vector<int> inputs;
  std::optional<Tensor> weights;
  std::optional<Tensor> bias;
  ConvAttrs conv;
  PoolAttrs pool;
  std::optional<BatchNormAttrs> bn;
  int bits_weight = 32;
  int bits_activation = 32;

  // Weights stored as integer codes times a per-channel scale; set when a
  // quantized artifact is reloaded so the pipeline does not re-quantize.
  bool prequantized_weights = false;

  bool has_weights() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
};

struct NetworkGraph {
  std::vector<LayerSpec> layers;
  std::vector<std::size_t> input_shape;
  std::vector<int> comparison_points;  // layer ids whose outputs are compared/quantized

  int output_layer() const { return static_cast<int>(layers.size()) - 1; }
  std::vector<int> weighted_layers() const;
  bool is_comparison_point(int layer) const;

  // Validates acyclicity (topological input order), comparison-point ids,
  // bit-width ranges, and shape consistency; throws on violation. Returns the
  // inferred per-layer output shapes.
  std::vector<std::vector<std::size_t>> validate() const;
};

struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<std::uint32_t> labels;  // empty when the file carries no labels

  std::size_t size() const { return inputs.size(); }
  bool has_labels() const { return !labels.empty(); }
};

// Number of valid bit-widths: {2..16} and 32 (32 = unquantized).
bool valid_bit_width(int bits);

}  // namespace eptq
