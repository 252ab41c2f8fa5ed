#pragma once

#include <map>
#include <variant>
#include <vector>

#include "eptq/graph.hpp"
#include "eptq/quantizers.hpp"
#include "eptq/tensor.hpp"

namespace eptq {

// Row-major dense matrix for Jacobian/Hessian oracles and reports.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
};

enum class OpKind {
  Leaf,
  MatVec,        // [w, x] -> W x
  Conv2d,        // [w, x]
  BiasAddVec,    // [y, b], same length
  BiasAddChan,   // [y, b], per-channel broadcast over spatial dims
  Relu,
  Add,
  Concat,
  Softmax,
  Sigmoid,
  Reshape,
  AvgPool,
  BatchNorm,     // saved per-channel scale; affine inference form
  WeightQuant,   // [w, v, log_scale] -> quantized weight
  ActQuant,      // [z] -> quantized z, straight-through backward inside range
  Mix,           // [z_float, z_quant] -> p*float + (1-p)*quant (or masked)
};

struct WeightQuantAttrs {
  int bits = 8;
  std::vector<double> thresholds;
  bool hard = false;
};

struct ActQuantAttrs {
  int bits = 8;
  double lo = 0.0;
  double hi = 0.0;
};

struct MixAttrs {
  double p_float = 0.0;
  std::vector<double> mask;  // per-element float-keep mask; empty = scalar blend
};

struct BatchNormSaved {
  Tensor channel_scale;  // gamma / sqrt(var + eps)
  Tensor channel_shift;  // beta - channel_scale * mean
};

using NodeAttrs = std::variant<std::monostate, ConvAttrs, PoolAttrs, WeightQuantAttrs,
                               ActQuantAttrs, MixAttrs, BatchNormSaved>;

struct TapeNode {
  OpKind kind = OpKind::Leaf;
  std::vector<int> inputs;
  Tensor value;
  NodeAttrs attrs;
};

// Record of one forward evaluation. Node ids are topological by construction;
// immutable after recording.
struct Tape {
  std::vector<TapeNode> nodes;
  int input_node = -1;
  int output_node = -1;
  std::map<int, int> weight_node;      // layer id -> raw weight leaf
  std::map<int, int> bias_node;        // layer id -> bias leaf
  std::map<int, int> rounding_node;    // layer id -> rounding-variable leaf
  std::map<int, int> logscale_node;    // layer id -> per-channel log-scale leaf
  std::map<int, int> comparison_node;  // layer id -> comparison-point node

  const Tensor& value(int node) const { return nodes[static_cast<std::size_t>(node)].value; }
  const Tensor& output() const { return value(output_node); }

  // Recomputes every non-leaf node from the recorded leaves; the result must
  // be bit-identical to the recorded output.
  Tensor replay_output() const;
};

struct ForwardResult {
  Tape tape;
  std::map<int, Tensor> activations;  // comparison point layer id -> tensor
  Tensor output;
};

// Evaluates the graph on one input, recording every primitive op. With a
// QuantState the weight tensors pass through the soft quantizer and the
// comparison-point activations pass through the gradual activation quantizer;
// without one this is the float network.
ForwardResult forward_record(const NetworkGraph& graph, const Tensor& input,
                             const QuantState* quant = nullptr);

// Gradients of dot(seed, output) w.r.t. the requested nodes.
std::map<int, Tensor> vjp(const Tape& tape, const Tensor& seed, const std::vector<int>& targets);

// General reverse sweep: gradient seeds may sit at any interior node. Used by
// the optimizer to pull the distillation loss back through the network in one
// pass.
std::map<int, Tensor> backward_accumulate(const Tape& tape, const std::map<int, Tensor>& seeds,
                                          const std::vector<int>& targets);

// Which tensor a finite-difference Jacobian is taken against.
struct TargetRef {
  enum class Kind { Input, Weight, Activation } kind = Kind::Input;
  int layer = -1;

  static TargetRef input() { return {Kind::Input, -1}; }
  static TargetRef weight(int layer) { return {Kind::Weight, layer}; }
  static TargetRef activation(int layer) { return {Kind::Activation, layer}; }
};

inline constexpr std::size_t kFiniteDiffMaxElements = 512;

// Central-difference Jacobian of the network output w.r.t. a recorded tensor:
// row i holds the derivatives of output element i. O(d_o * d_target) forward
// replays; refuses targets above kFiniteDiffMaxElements.
Matrix finite_diff_jacobian(const NetworkGraph& graph, const Tensor& input, TargetRef target,
                            double step = 1e-5);

// Same oracle on an already-recorded tape; `node` may be any node id.
Matrix finite_diff_jacobian(const Tape& tape, int node, double step = 1e-5);

int resolve_target_node(const Tape& tape, TargetRef target);

}  // namespace eptq
