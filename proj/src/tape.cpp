#include "eptq/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "eptq/rng.hpp"

namespace eptq {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor compute_matvec(const Tensor& w, const Tensor& x) {
  const std::size_t out_dim = w.dim(0);
  const std::size_t in_dim = w.dim(1);
  if (x.size() != in_dim) {
    throw std::invalid_argument("matvec: input length " + std::to_string(x.size()) +
                                " != " + std::to_string(in_dim));
  }
  Tensor y({out_dim});
  for (std::size_t o = 0; o < out_dim; ++o) {
    double acc = 0.0;
    const double* row = w.data() + o * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
  return y;
}

Tensor compute_conv2d(const Tensor& w, const Tensor& x, const ConvAttrs& c) {
  const std::size_t oc = w.dim(0), ic = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (x.rank() != 3 || x.dim(0) != ic) {
    throw std::invalid_argument("conv2d: input shape " + shape_to_string(x.shape()) +
                                " incompatible with weights " + shape_to_string(w.shape()));
  }
  const std::size_t ih = x.dim(1), iw = x.dim(2);
  const std::size_t oh = (ih + 2 * c.pad_h - kh) / c.stride_h + 1;
  const std::size_t ow = (iw + 2 * c.pad_w - kw) / c.stride_w + 1;
  Tensor y({oc, oh, ow});
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t i = 0; i < ic; ++i) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * c.stride_h + ky) - static_cast<long>(c.pad_h);
            if (iy < 0 || iy >= static_cast<long>(ih)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * c.stride_w + kx) - static_cast<long>(c.pad_w);
              if (ix < 0 || ix >= static_cast<long>(iw)) continue;
              acc += w[((o * ic + i) * kh + ky) * kw + kx] *
                     x[(i * ih + static_cast<std::size_t>(iy)) * iw + static_cast<std::size_t>(ix)];
            }
          }
        }
        y[(o * oh + oy) * ow + ox] = acc;
      }
    }
  }
  return y;
}

Tensor compute_avgpool(const Tensor& x, const PoolAttrs& p) {
  const std::size_t c = x.dim(0), ih = x.dim(1), iw = x.dim(2);
  const std::size_t oh = (ih - p.kernel_h) / p.stride_h + 1;
  const std::size_t ow = (iw - p.kernel_w) / p.stride_w + 1;
  const double inv = 1.0 / static_cast<double>(p.kernel_h * p.kernel_w);
  Tensor y({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < p.kernel_h; ++ky) {
          for (std::size_t kx = 0; kx < p.kernel_w; ++kx) {
            acc += x[(ch * ih + oy * p.stride_h + ky) * iw + ox * p.stride_w + kx];
          }
        }
        y[(ch * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  return y;
}

Tensor compute_softmax(const Tensor& x) {
  Tensor y(x.shape());
  double mx = x[0];
  for (std::size_t i = 1; i < x.size(); ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] /= z;
  return y;
}

Tensor compute_weight_quant(const Tensor& w, const Tensor& v, const Tensor& log_scale,
                            const WeightQuantAttrs& q) {
  const std::size_t channels = q.thresholds.size();
  if (w.dim(0) != channels || !v.same_shape(w) || log_scale.size() != channels) {
    throw std::invalid_argument("weight-quant node input shapes are inconsistent");
  }
  const double qmin = -static_cast<double>(1LL << (q.bits - 1));
  const double qmax = static_cast<double>(1LL << (q.bits - 1)) - 1.0;
  const std::size_t per_channel = w.size() / channels;
  Tensor out(w.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const double s =
        q.thresholds[c] * std::exp(log_scale[c]) / static_cast<double>(1LL << (q.bits - 1));
    for (std::size_t i = 0; i < per_channel; ++i) {
      const std::size_t idx = c * per_channel + i;
      const double h = q.hard ? (v[idx] >= 0.0 ? 1.0 : 0.0) : soft_round_h(v[idx]);
      double code = std::floor(w[idx] / s) + h;
      code = std::min(std::max(code, qmin), qmax);
      out[idx] = code * s;
    }
  }
  return out;
}

Tensor compute_act_quant(const Tensor& z, const ActQuantAttrs& q) {
  ActQuantParams p{q.bits, q.lo, q.hi};
  return quantize_activation(z, p);
}

Tensor compute_mix(const Tensor& zf, const Tensor& zq, const MixAttrs& m) {
  Tensor out(zf.shape());
  if (m.mask.empty()) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = m.p_float * zf[i] + (1.0 - m.p_float) * zq[i];
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = m.mask[i] * zf[i] + (1.0 - m.mask[i]) * zq[i];
    }
  }
  return out;
}

template <typename ValueOf>
Tensor compute_node(const TapeNode& node, const ValueOf& value_of) {
  auto in = [&](std::size_t i) -> const Tensor& { return value_of(node.inputs[i]); };
  switch (node.kind) {
    case OpKind::Leaf: return node.value;
    case OpKind::MatVec: return compute_matvec(in(0), in(1));
    case OpKind::Conv2d: return compute_conv2d(in(0), in(1), std::get<ConvAttrs>(node.attrs));
    case OpKind::BiasAddVec: {
      return add(in(0), in(1));
    }
    case OpKind::BiasAddChan: {
      const Tensor& y = in(0);
      const Tensor& b = in(1);
      const std::size_t c = y.dim(0);
      const std::size_t spatial = y.size() / c;
      Tensor out(y.shape());
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t s = 0; s < spatial; ++s) out[ch * spatial + s] = y[ch * spatial + s] + b[ch];
      }
      return out;
    }
    case OpKind::Relu: {
      const Tensor& x = in(0);
      Tensor out(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      return out;
    }
    case OpKind::Add: return add(in(0), in(1));
    case OpKind::Concat: {
      auto out_shape = in(0).shape();
      std::size_t channels = 0;
      for (int id : node.inputs) channels += value_of(id).dim(0);
      out_shape[0] = channels;
      Tensor out(out_shape);
      std::size_t offset = 0;
      for (int id : node.inputs) {
        const Tensor& part = value_of(id);
        for (std::size_t i = 0; i < part.size(); ++i) out[offset + i] = part[i];
        offset += part.size();
      }
      return out;
    }
    case OpKind::Softmax: return compute_softmax(in(0));
    case OpKind::Sigmoid: {
      const Tensor& x = in(0);
      Tensor out(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
      return out;
    }
    case OpKind::Reshape: return in(0).reshaped(node.value.shape());
    case OpKind::AvgPool: return compute_avgpool(in(0), std::get<PoolAttrs>(node.attrs));
    case OpKind::BatchNorm: {
      const Tensor& x = in(0);
      const auto& saved = std::get<BatchNormSaved>(node.attrs);
      const std::size_t c = x.dim(0);
      const std::size_t spatial = x.size() / c;
      Tensor out(x.shape());
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double a = saved.channel_scale[ch];
        const double b = saved.channel_shift[ch];
        for (std::size_t s = 0; s < spatial; ++s) out[ch * spatial + s] = a * x[ch * spatial + s] + b;
      }
      return out;
    }
    case OpKind::WeightQuant:
      return compute_weight_quant(in(0), in(1), in(2), std::get<WeightQuantAttrs>(node.attrs));
    case OpKind::ActQuant: return compute_act_quant(in(0), std::get<ActQuantAttrs>(node.attrs));
    case OpKind::Mix: return compute_mix(in(0), in(1), std::get<MixAttrs>(node.attrs));
  }
  throw std::logic_error("unknown op kind");
}

class TapeBuilder {
 public:
  explicit TapeBuilder(Tape& tape) : tape_(tape) {}

  int leaf(Tensor value) {
    tape_.nodes.push_back({OpKind::Leaf, {}, std::move(value), std::monostate{}});
    return static_cast<int>(tape_.nodes.size()) - 1;
  }

  int op(OpKind kind, std::vector<int> inputs, NodeAttrs attrs = std::monostate{}) {
    TapeNode node{kind, std::move(inputs), Tensor{}, std::move(attrs)};
    node.value = compute_node(node, [this](int id) -> const Tensor& {
      return tape_.nodes[static_cast<std::size_t>(id)].value;
    });
    tape_.nodes.push_back(std::move(node));
    return static_cast<int>(tape_.nodes.size()) - 1;
  }

  // Reshape needs the output shape available before compute.
  int reshape(int input, std::vector<std::size_t> out_shape) {
    TapeNode node{OpKind::Reshape, {input}, Tensor{}, std::monostate{}};
    node.value = tape_.nodes[static_cast<std::size_t>(input)].value.reshaped(std::move(out_shape));
    tape_.nodes.push_back(std::move(node));
    return static_cast<int>(tape_.nodes.size()) - 1;
  }

 private:
  Tape& tape_;
};

}  // namespace

Tensor Tape::replay_output() const {
  std::vector<Tensor> values(nodes.size());
  auto value_of = [&](int id) -> const Tensor& { return values[static_cast<std::size_t>(id)]; };
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    values[i] = (nodes[i].kind == OpKind::Leaf) ? nodes[i].value : compute_node(nodes[i], value_of);
  }
  return values[static_cast<std::size_t>(output_node)];
}

ForwardResult forward_record(const NetworkGraph& graph, const Tensor& input,
                             const QuantState* quant) {
  if (input.shape() != graph.input_shape) {
    throw std::invalid_argument("input shape " + shape_to_string(input.shape()) +
                                " does not match graph input " +
                                shape_to_string(graph.input_shape));
  }
  input.require_finite("network input");

  if (quant && !quant->weights_baked) {
    for (int l : graph.weighted_layers()) {
      if (!quant->weights.count(l)) {
        throw std::invalid_argument("quantization state does not cover weighted layer " +
                                    std::to_string(l));
      }
    }
  }

  ForwardResult result;
  Tape& tape = result.tape;
  TapeBuilder build(tape);

  tape.input_node = build.leaf(input);
  std::vector<int> layer_out(graph.layers.size(), -1);

  for (std::size_t li = 0; li < graph.layers.size(); ++li) {
    const LayerSpec& layer = graph.layers[li];
    const int layer_id = static_cast<int>(li);
    std::vector<int> in_nodes;
    for (int in : layer.inputs) {
      in_nodes.push_back(in == -1 ? tape.input_node : layer_out[static_cast<std::size_t>(in)]);
    }

    int out_node = -1;
    switch (layer.kind) {
      case LayerKind::Dense:
      case LayerKind::Conv2d: {
        const int w_leaf = build.leaf(*layer.weights);
        tape.weight_node[layer_id] = w_leaf;
        int w_eff = w_leaf;
        const WeightQuantParams* params = nullptr;
        if (quant && !quant->weights_baked) {
          params = &quant->weights.at(layer_id);
          if (params->bits != 32) {
            const int v_leaf = build.leaf(params->rounding);
            tape.rounding_node[layer_id] = v_leaf;
            std::vector<double> ls = params->log_scale;
            if (ls.empty()) ls.assign(params->channels(), 0.0);
            const int ls_leaf = build.leaf(Tensor({params->channels()}, ls));
            tape.logscale_node[layer_id] = ls_leaf;
            w_eff = build.op(OpKind::WeightQuant, {w_leaf, v_leaf, ls_leaf},
                             WeightQuantAttrs{params->bits, params->thresholds, params->hard});
          }
        }
        if (layer.kind == LayerKind::Dense) {
          out_node = build.op(OpKind::MatVec, {w_eff, in_nodes[0]});
        } else {
          out_node = build.op(OpKind::Conv2d, {w_eff, in_nodes[0]}, layer.conv);
        }
        const Tensor* bias = layer.bias ? &*layer.bias : nullptr;
        if (quant) {
          auto it = quant->bias_override.find(layer_id);
          if (it != quant->bias_override.end()) bias = &it->second;
        }
        if (bias) {
          const int b_leaf = build.leaf(*bias);
          tape.bias_node[layer_id] = b_leaf;
          out_node = build.op(layer.kind == LayerKind::Dense ? OpKind::BiasAddVec
                                                             : OpKind::BiasAddChan,
                              {out_node, b_leaf});
        }
        break;
      }
      case LayerKind::BatchNorm: {
        const auto& bn = *layer.bn;
        const std::size_t channels = bn.gamma.size();
        BatchNormSaved saved;
        saved.channel_scale = Tensor({channels});
        saved.channel_shift = Tensor({channels});
        for (std::size_t c = 0; c < channels; ++c) {
          const double a = bn.gamma[c] / std::sqrt(bn.variance[c] + bn.eps);
          saved.channel_scale[c] = a;
          saved.channel_shift[c] = bn.beta[c] - a * bn.mean[c];
        }
        out_node = build.op(OpKind::BatchNorm, {in_nodes[0]}, std::move(saved));
        break;
      }
      case LayerKind::Relu: out_node = build.op(OpKind::Relu, {in_nodes[0]}); break;
      case LayerKind::Sigmoid: out_node = build.op(OpKind::Sigmoid, {in_nodes[0]}); break;
      case LayerKind::Softmax: out_node = build.op(OpKind::Softmax, {in_nodes[0]}); break;
      case LayerKind::Add: out_node = build.op(OpKind::Add, in_nodes); break;
      case LayerKind::Concat: out_node = build.op(OpKind::Concat, in_nodes); break;
      case LayerKind::Flatten: {
        const Tensor& v = tape.value(in_nodes[0]);
        out_node = build.reshape(in_nodes[0], {v.size()});
        break;
      }
      case LayerKind::AvgPool: out_node = build.op(OpKind::AvgPool, {in_nodes[0]}, layer.pool);
        break;
    }

    // Gradual activation quantization at comparison points; downstream layers
    // consume the mixed tensor so quantization error accumulates network-wise.
    if (quant && graph.is_comparison_point(layer_id)) {
      auto it = quant->activations.find(layer_id);
      if (it != quant->activations.end() && it->second.bits != 32) {
        const ActQuantParams& ap = it->second;
        const int q_node =
            build.op(OpKind::ActQuant, {out_node}, ActQuantAttrs{ap.bits, ap.lo, ap.hi});
        const double p = quant->schedule_p(layer_id, quant->iteration);
        if (p > 0.0 && quant->gradual == GradualMode::Linear) {
          out_node = build.op(OpKind::Mix, {out_node, q_node}, MixAttrs{p, {}});
        } else if (p > 0.0 && quant->gradual == GradualMode::Stochastic) {
          Rng rng = Rng::stream(quant->stochastic_seed, static_cast<std::uint64_t>(layer_id));
          MixAttrs attrs;
          attrs.p_float = p;
          attrs.mask.resize(tape.value(out_node).size());
          for (auto& m : attrs.mask) m = (rng.next_uniform() <= p) ? 1.0 : 0.0;
          out_node = build.op(OpKind::Mix, {out_node, q_node}, std::move(attrs));
        } else {
          out_node = q_node;
        }
      }
    }

    layer_out[li] = out_node;
    if (graph.is_comparison_point(layer_id)) {
      tape.comparison_node[layer_id] = out_node;
      result.activations[layer_id] = tape.value(out_node);
    }
  }

  tape.output_node = layer_out.back();
  result.output = tape.value(tape.output_node);
  if (!std::all_of(result.output.values().begin(), result.output.values().end(),
                   [](double x) { return std::isfinite(x); })) {
    throw std::runtime_error("forward pass produced a non-finite output");
  }
  return result;
}

namespace {

void backward_node(const Tape& tape, int node_id, const Tensor& g, std::vector<Tensor>& grads) {
  const TapeNode& node = tape.nodes[static_cast<std::size_t>(node_id)];
  auto in_value = [&](std::size_t i) -> const Tensor& {
    return tape.nodes[static_cast<std::size_t>(node.inputs[i])].value;
  };
  auto accum = [&](std::size_t i, std::size_t flat_index, double delta) {
    Tensor& dst = grads[static_cast<std::size_t>(node.inputs[i])];
    if (dst.size() == 0) dst = Tensor(in_value(i).shape());
    dst[flat_index] += delta;
  };

  switch (node.kind) {
    case OpKind::Leaf: return;
    case OpKind::MatVec: {
      const Tensor& w = in_value(0);
      const Tensor& x = in_value(1);
      const std::size_t out_dim = w.dim(0), in_dim = w.dim(1);
      for (std::size_t o = 0; o < out_dim; ++o) {
        for (std::size_t i = 0; i < in_dim; ++i) {
          accum(0, o * in_dim + i, g[o] * x[i]);
          accum(1, i, g[o] * w[o * in_dim + i]);
        }
      }
      return;
    }
    case OpKind::Conv2d: {
      const Tensor& w = in_value(0);
      const Tensor& x = in_value(1);
      const auto& c = std::get<ConvAttrs>(node.attrs);
      const std::size_t oc = w.dim(0), ic = w.dim(1), kh = w.dim(2), kw = w.dim(3);
      const std::size_t ih = x.dim(1), iw = x.dim(2);
      const std::size_t oh = node.value.dim(1), ow = node.value.dim(2);
      for (std::size_t o = 0; o < oc; ++o) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double go = g[(o * oh + oy) * ow + ox];
            if (go == 0.0) continue;
            for (std::size_t i = 0; i < ic; ++i) {
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const long iy =
                    static_cast<long>(oy * c.stride_h + ky) - static_cast<long>(c.pad_h);
                if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const long ix =
                      static_cast<long>(ox * c.stride_w + kx) - static_cast<long>(c.pad_w);
                  if (ix < 0 || ix >= static_cast<long>(iw)) continue;
                  const std::size_t w_idx = ((o * ic + i) * kh + ky) * kw + kx;
                  const std::size_t x_idx =
                      (i * ih + static_cast<std::size_t>(iy)) * iw + static_cast<std::size_t>(ix);
                  accum(0, w_idx, go * x[x_idx]);
                  accum(1, x_idx, go * w[w_idx]);
                }
              }
            }
          }
        }
      }
      return;
    }
    case OpKind::BiasAddVec: {
      for (std::size_t i = 0; i < g.size(); ++i) {
        accum(0, i, g[i]);
        accum(1, i, g[i]);
      }
      return;
    }
    case OpKind::BiasAddChan: {
      const std::size_t c = node.value.dim(0);
      const std::size_t spatial = node.value.size() / c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t s = 0; s < spatial; ++s) {
          accum(0, ch * spatial + s, g[ch * spatial + s]);
          accum(1, ch, g[ch * spatial + s]);
        }
      }
      return;
    }
    case OpKind::Relu: {
      const Tensor& x = in_value(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) accum(0, i, g[i]);
      }
      return;
    }
    case OpKind::Add: {
      for (std::size_t i = 0; i < g.size(); ++i) {
        accum(0, i, g[i]);
        accum(1, i, g[i]);
      }
      return;
    }
    case OpKind::Concat: {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < node.inputs.size(); ++p) {
        const std::size_t n = in_value(p).size();
        for (std::size_t i = 0; i < n; ++i) accum(p, i, g[offset + i]);
        offset += n;
      }
      return;
    }
    case OpKind::Softmax: {
      const Tensor& y = node.value;
      double gy = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) gy += g[i] * y[i];
      for (std::size_t i = 0; i < y.size(); ++i) accum(0, i, y[i] * (g[i] - gy));
      return;
    }
    case OpKind::Sigmoid: {
      const Tensor& y = node.value;
      for (std::size_t i = 0; i < y.size(); ++i) accum(0, i, g[i] * y[i] * (1.0 - y[i]));
      return;
    }
    case OpKind::Reshape: {
      for (std::size_t i = 0; i < g.size(); ++i) accum(0, i, g[i]);
      return;
    }
    case OpKind::AvgPool: {
      const auto& p = std::get<PoolAttrs>(node.attrs);
      const Tensor& x = in_value(0);
      const std::size_t c = x.dim(0), ih = x.dim(1), iw = x.dim(2);
      const std::size_t oh = node.value.dim(1), ow = node.value.dim(2);
      const double inv = 1.0 / static_cast<double>(p.kernel_h * p.kernel_w);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double go = g[(ch * oh + oy) * ow + ox] * inv;
            for (std::size_t ky = 0; ky < p.kernel_h; ++ky) {
              for (std::size_t kx = 0; kx < p.kernel_w; ++kx) {
                accum(0, (ch * ih + oy * p.stride_h + ky) * iw + ox * p.stride_w + kx, go);
              }
            }
          }
        }
      }
      return;
    }
    case OpKind::BatchNorm: {
      const auto& saved = std::get<BatchNormSaved>(node.attrs);
      const std::size_t c = node.value.dim(0);
      const std::size_t spatial = node.value.size() / c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t s = 0; s < spatial; ++s) {
          accum(0, ch * spatial + s, g[ch * spatial + s] * saved.channel_scale[ch]);
        }
      }
      return;
    }
    case OpKind::WeightQuant: {
      // No gradient to the raw weights (they are untrained leaves). v gets the
      // exact derivative of the soft rounding. The per-channel log-scale uses
      // the straight-through scale estimator: d(out)/d(theta) = out - w inside
      // the grid (the integer code sheds one unit each time the step grows
      // past a rounding boundary) and out at the clamp.
      const Tensor& w = in_value(0);
      const Tensor& v = in_value(1);
      const Tensor& ls = in_value(2);
      const auto& q = std::get<WeightQuantAttrs>(node.attrs);
      const std::size_t channels = q.thresholds.size();
      const std::size_t per_channel = w.size() / channels;
      const double qmin = -static_cast<double>(1LL << (q.bits - 1));
      const double qmax = static_cast<double>(1LL << (q.bits - 1)) - 1.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double s =
            q.thresholds[c] * std::exp(ls[c]) / static_cast<double>(1LL << (q.bits - 1));
        for (std::size_t i = 0; i < per_channel; ++i) {
          const std::size_t idx = c * per_channel + i;
          const double h = q.hard ? (v[idx] >= 0.0 ? 1.0 : 0.0) : soft_round_h(v[idx]);
          const double code = std::floor(w[idx] / s) + h;
          const bool clamped = code < qmin || code > qmax;
          if (!q.hard && !clamped) {
            accum(1, idx, g[idx] * s * soft_round_h_derivative(v[idx]));
          }
          accum(2, c, g[idx] * (clamped ? node.value[idx] : node.value[idx] - w[idx]));
        }
      }
      return;
    }
    case OpKind::ActQuant: {
      const auto& q = std::get<ActQuantAttrs>(node.attrs);
      const Tensor& z = in_value(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (z[i] >= q.lo && z[i] <= q.hi) accum(0, i, g[i]);
      }
      return;
    }
    case OpKind::Mix: {
      const auto& m = std::get<MixAttrs>(node.attrs);
      if (m.mask.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          accum(0, i, g[i] * m.p_float);
          accum(1, i, g[i] * (1.0 - m.p_float));
        }
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) {
          accum(0, i, g[i] * m.mask[i]);
          accum(1, i, g[i] * (1.0 - m.mask[i]));
        }
      }
      return;
    }
  }
}

}  // namespace

std::map<int, Tensor> backward_accumulate(const Tape& tape, const std::map<int, Tensor>& seeds,
                                          const std::vector<int>& targets) {
  std::vector<Tensor> grads(tape.nodes.size());
  for (const auto& [node_id, seed] : seeds) {
    if (node_id < 0 || node_id >= static_cast<int>(tape.nodes.size())) {
      throw std::invalid_argument("gradient seed node " + std::to_string(node_id) +
                                  " is not on the tape");
    }
    if (!seed.same_shape(tape.value(node_id))) {
      throw std::invalid_argument("gradient seed shape " + shape_to_string(seed.shape()) +
                                  " does not match node value " +
                                  shape_to_string(tape.value(node_id).shape()));
    }
    Tensor& dst = grads[static_cast<std::size_t>(node_id)];
    if (dst.size() == 0) dst = Tensor(seed.shape());
    for (std::size_t i = 0; i < seed.size(); ++i) dst[i] += seed[i];
  }
  for (int t : targets) {
    if (t < 0 || t >= static_cast<int>(tape.nodes.size())) {
      throw std::invalid_argument("vjp target node " + std::to_string(t) + " is not on the tape");
    }
  }

  for (int n = static_cast<int>(tape.nodes.size()) - 1; n >= 0; --n) {
    const Tensor& g = grads[static_cast<std::size_t>(n)];
    if (g.size() == 0) continue;
    backward_node(tape, n, g, grads);
  }

  std::map<int, Tensor> out;
  for (int t : targets) {
    Tensor& g = grads[static_cast<std::size_t>(t)];
    out[t] = (g.size() == 0) ? Tensor(tape.value(t).shape()) : std::move(g);
  }
  return out;
}

std::map<int, Tensor> vjp(const Tape& tape, const Tensor& seed, const std::vector<int>& targets) {
  return backward_accumulate(tape, {{tape.output_node, seed}}, targets);
}

int resolve_target_node(const Tape& tape, TargetRef target) {
  switch (target.kind) {
    case TargetRef::Kind::Input: return tape.input_node;
    case TargetRef::Kind::Weight: {
      auto it = tape.weight_node.find(target.layer);
      if (it == tape.weight_node.end()) {
        throw std::invalid_argument("layer " + std::to_string(target.layer) +
                                    " has no weight tensor on the tape");
      }
      return it->second;
    }
    case TargetRef::Kind::Activation: {
      auto it = tape.comparison_node.find(target.layer);
      if (it == tape.comparison_node.end()) {
        throw std::invalid_argument("layer " + std::to_string(target.layer) +
                                    " is not a recorded comparison point");
      }
      return it->second;
    }
  }
  throw std::logic_error("bad target ref");
}

Matrix finite_diff_jacobian(const Tape& tape, int node, double step) {
  if (node < 0 || node >= static_cast<int>(tape.nodes.size())) {
    throw std::invalid_argument("finite-diff target is not on the tape");
  }
  const Tensor& base = tape.value(node);
  if (base.size() > kFiniteDiffMaxElements) {
    throw std::invalid_argument("finite-diff target has " + std::to_string(base.size()) +
                                " elements, above the " +
                                std::to_string(kFiniteDiffMaxElements) + " oracle limit");
  }
  const std::size_t d_out = tape.output().size();

  // Replays the whole tape with the target node pinned to a perturbed value.
  auto eval_with = [&](const Tensor& pinned) {
    std::vector<Tensor> values(tape.nodes.size());
    auto value_of = [&](int id) -> const Tensor& { return values[static_cast<std::size_t>(id)]; };
    for (std::size_t i = 0; i < tape.nodes.size(); ++i) {
      if (static_cast<int>(i) == node) {
        values[i] = pinned;
      } else if (tape.nodes[i].kind == OpKind::Leaf) {
        values[i] = tape.nodes[i].value;
      } else {
        values[i] = compute_node(tape.nodes[i], value_of);
      }
    }
    Tensor out = values[static_cast<std::size_t>(tape.output_node)];
    out.require_finite("finite-difference forward output");
    return out;
  };

  Matrix jac(d_out, base.size());
  Tensor probe = base;
  for (std::size_t j = 0; j < base.size(); ++j) {
    const double keep = probe[j];
    probe[j] = keep + step;
    const Tensor plus = eval_with(probe);
    probe[j] = keep - step;
    const Tensor minus = eval_with(probe);
    probe[j] = keep;
    for (std::size_t i = 0; i < d_out; ++i) {
      jac.at(i, j) = (plus[i] - minus[i]) / (2.0 * step);
    }
  }
  return jac;
}

Matrix finite_diff_jacobian(const NetworkGraph& graph, const Tensor& input, TargetRef target,
                            double step) {
  ForwardResult fwd = forward_record(graph, input);
  return finite_diff_jacobian(fwd.tape, resolve_target_node(fwd.tape, target), step);
}

}  // namespace eptq
