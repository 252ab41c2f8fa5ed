#include "eptq/graph.hpp"

#include <algorithm>
#include <stdexcept>

namespace eptq {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::Add: return "add";
    case LayerKind::Concat: return "concat";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::AvgPool: return "avgpool";
  }
  return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
  if (name == "dense") return LayerKind::Dense;
  if (name == "conv2d") return LayerKind::Conv2d;
  if (name == "batchnorm") return LayerKind::BatchNorm;
  if (name == "relu") return LayerKind::Relu;
  if (name == "add") return LayerKind::Add;
  if (name == "concat") return LayerKind::Concat;
  if (name == "softmax") return LayerKind::Softmax;
  if (name == "sigmoid") return LayerKind::Sigmoid;
  if (name == "flatten") return LayerKind::Flatten;
  if (name == "avgpool") return LayerKind::AvgPool;
  throw std::invalid_argument("unsupported layer kind '" + name + "'");
}

bool valid_bit_width(int bits) { return (bits >= 2 && bits <= 16) || bits == 32; }

std::vector<int> NetworkGraph::weighted_layers() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].has_weights()) out.push_back(static_cast<int>(i));
  }
  return out;
}

bool NetworkGraph::is_comparison_point(int layer) const {
  return std::find(comparison_points.begin(), comparison_points.end(), layer) !=
         comparison_points.end();
}

namespace {

std::vector<std::size_t> infer_layer_shape(const LayerSpec& layer,
                                           const std::vector<std::vector<std::size_t>>& in_shapes) {
  const std::string where = "layer '" + layer.name + "'";
  auto fail = [&](const std::string& msg) -> std::vector<std::size_t> {
    throw std::invalid_argument(where + ": " + msg);
  };

  switch (layer.kind) {
    case LayerKind::Dense: {
      if (in_shapes.size() != 1) return fail("dense takes one input");
      if (!layer.weights) return fail("dense has no weights");
      const auto& ws = layer.weights->shape();
      if (ws.size() != 2) return fail("dense weights must be 2-D [out, in]");
      const std::size_t in_dim = shape_product(in_shapes[0]);
      if (in_shapes[0].size() != 1 || in_dim != ws[1]) {
        return fail("input shape " + shape_to_string(in_shapes[0]) +
                    " incompatible with weights " + shape_to_string(ws));
      }
      if (layer.bias && layer.bias->size() != ws[0]) return fail("bias length != out dim");
      return {ws[0]};
    }
    case LayerKind::Conv2d: {
      if (in_shapes.size() != 1) return fail("conv2d takes one input");
      if (!layer.weights) return fail("conv2d has no weights");
      const auto& ws = layer.weights->shape();
      if (ws.size() != 4) return fail("conv2d weights must be 4-D [oc, ic, kh, kw]");
      const auto& is = in_shapes[0];
      if (is.size() != 3) return fail("conv2d input must be 3-D [c, h, w]");
      if (is[0] != ws[1]) return fail("input channels != weight input channels");
      const std::size_t h = is[1] + 2 * layer.conv.pad_h;
      const std::size_t w = is[2] + 2 * layer.conv.pad_w;
      if (h < ws[2] || w < ws[3]) return fail("kernel larger than padded input");
      const std::size_t oh = (h - ws[2]) / layer.conv.stride_h + 1;
      const std::size_t ow = (w - ws[3]) / layer.conv.stride_w + 1;
      if (layer.bias && layer.bias->size() != ws[0]) return fail("bias length != out channels");
      return {ws[0], oh, ow};
    }
    case LayerKind::BatchNorm: {
      if (in_shapes.size() != 1) return fail("batchnorm takes one input");
      if (!layer.bn) return fail("batchnorm has no statistics");
      const std::size_t channels = in_shapes[0][0];
      if (layer.bn->gamma.size() != channels || layer.bn->beta.size() != channels ||
          layer.bn->mean.size() != channels || layer.bn->variance.size() != channels) {
        return fail("batchnorm parameter length != channel count");
      }
      return in_shapes[0];
    }
    case LayerKind::Relu:
    case LayerKind::Sigmoid:
    case LayerKind::Softmax: {
      if (in_shapes.size() != 1) return fail("unary op takes one input");
      return in_shapes[0];
    }
    case LayerKind::Add: {
      if (in_shapes.size() != 2) return fail("add takes two inputs");
      if (in_shapes[0] != in_shapes[1]) return fail("add inputs must share a shape");
      return in_shapes[0];
    }
    case LayerKind::Concat: {
      if (in_shapes.size() < 2) return fail("concat takes at least two inputs");
      auto out = in_shapes[0];
      for (std::size_t i = 1; i < in_shapes.size(); ++i) {
        const auto& s = in_shapes[i];
        if (s.size() != out.size()) return fail("concat rank mismatch");
        for (std::size_t d = 1; d < s.size(); ++d) {
          if (s[d] != out[d]) return fail("concat non-channel dims must match");
        }
        out[0] += s[0];
      }
      return out;
    }
    case LayerKind::Flatten: {
      if (in_shapes.size() != 1) return fail("flatten takes one input");
      return {shape_product(in_shapes[0])};
    }
    case LayerKind::AvgPool: {
      if (in_shapes.size() != 1) return fail("avgpool takes one input");
      const auto& is = in_shapes[0];
      if (is.size() != 3) return fail("avgpool input must be 3-D [c, h, w]");
      if (layer.pool.kernel_h > is[1] || layer.pool.kernel_w > is[2]) {
        return fail("pool kernel larger than input");
      }
      const std::size_t oh = (is[1] - layer.pool.kernel_h) / layer.pool.stride_h + 1;
      const std::size_t ow = (is[2] - layer.pool.kernel_w) / layer.pool.stride_w + 1;
      return {is[0], oh, ow};
    }
  }
  return fail("unknown layer kind");
}

}  // namespace

std::vector<std::vector<std::size_t>> NetworkGraph::validate() const {
  if (layers.empty()) throw std::invalid_argument("graph has no layers");
  if (input_shape.empty()) throw std::invalid_argument("graph has no input shape");

  std::vector<std::vector<std::size_t>> shapes(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    if (layer.inputs.empty()) {
      throw std::invalid_argument("layer '" + layer.name + "' has no inputs");
    }
    std::vector<std::vector<std::size_t>> in_shapes;
    for (int in : layer.inputs) {
      if (in < -1 || in >= static_cast<int>(i)) {
        throw std::invalid_argument("layer '" + layer.name +
                                    "' input id " + std::to_string(in) +
                                    " must reference the graph input or an earlier layer");
      }
      in_shapes.push_back(in == -1 ? input_shape : shapes[static_cast<std::size_t>(in)]);
    }
    if (!valid_bit_width(layer.bits_weight) || !valid_bit_width(layer.bits_activation)) {
      throw std::invalid_argument("layer '" + layer.name + "' has an invalid bit-width");
    }
    if (layer.weights) layer.weights->require_finite("weights of layer '" + layer.name + "'");
    if (layer.bias) layer.bias->require_finite("bias of layer '" + layer.name + "'");
    shapes[i] = infer_layer_shape(layer, in_shapes);
  }
  for (int cp : comparison_points) {
    if (cp < 0 || cp >= static_cast<int>(layers.size())) {
      throw std::invalid_argument("comparison point " + std::to_string(cp) +
                                  " is not a layer id");
    }
  }
  return shapes;
}

}  // namespace eptq
