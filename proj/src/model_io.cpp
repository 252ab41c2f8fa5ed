#include "eptq/model_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <stdexcept>

#include "json.hpp"

namespace eptq {

namespace {

using nlohmann::json;

std::string blob_path_for(const std::string& json_path) {
  const std::string suffix = ".json";
  if (json_path.size() > suffix.size() &&
      json_path.compare(json_path.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return json_path.substr(0, json_path.size() - suffix.size()) + ".bin";
  }
  return json_path + ".bin";
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("unexpected end of file while reading a 32-bit field");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

bool read_f64(std::istream& is, double& out) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  std::memcpy(&out, &bits, 8);
  return true;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) write_f64(os, t[i]);
}

Tensor read_tensor(std::istream& is, const std::vector<std::size_t>& shape,
                   const std::string& layer_name) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!read_f64(is, t[i])) {
      throw std::runtime_error("weight blob truncated in layer '" + layer_name + "': expected " +
                               std::to_string(t.size() * 8) + " bytes for tensor " +
                               shape_to_string(shape) + ", got " + std::to_string(i * 8));
    }
  }
  return t;
}

std::vector<std::size_t> shape_from_json(const json& arr) {
  std::vector<std::size_t> shape;
  for (const auto& d : arr) shape.push_back(d.get<std::size_t>());
  return shape;
}

json shape_to_json(const std::vector<std::size_t>& shape) {
  json arr = json::array();
  for (std::size_t d : shape) arr.push_back(d);
  return arr;
}

}  // namespace

LoadedModel load_model(const std::string& json_path) {
  std::ifstream jf(json_path);
  if (!jf) throw std::runtime_error("cannot open model file '" + json_path + "'");
  json manifest;
  try {
    manifest = json::parse(jf);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("model manifest parse error in '" + json_path +
                             "' at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (manifest.value("format", "") != "eptq-model-v1") {
    throw std::runtime_error("'" + json_path + "' is not an eptq model manifest");
  }

  const std::string blob_path = blob_path_for(json_path);
  std::ifstream bf(blob_path, std::ios::binary);
  if (!bf) throw std::runtime_error("cannot open weight blob '" + blob_path + "'");
  char magic[8];
  if (!bf.read(magic, 8) || std::memcmp(magic, kWeightBlobMagic, 8) != 0) {
    throw std::runtime_error("weight blob '" + blob_path + "' has a bad magic header");
  }

  LoadedModel model;
  NetworkGraph& graph = model.graph;
  graph.input_shape = shape_from_json(manifest.at("input_shape"));
  for (const auto& cp : manifest.at("comparison_points")) {
    graph.comparison_points.push_back(cp.get<int>());
  }

  bool any_quant = false;
  QuantState quant;
  quant.weights_baked = true;
  quant.gradual = GradualMode::None;

  for (const auto& jl : manifest.at("layers")) {
    LayerSpec layer;
    layer.name = jl.value("name", "layer" + std::to_string(graph.layers.size()));
    layer.kind = layer_kind_from_name(jl.at("kind").get<std::string>());
    for (const auto& in : jl.at("inputs")) layer.inputs.push_back(in.get<int>());
    layer.bits_weight = jl.value("bits_weight", 32);
    layer.bits_activation = jl.value("bits_activation", 32);

    if (jl.contains("stride")) {
      layer.conv.stride_h = jl["stride"][0].get<std::size_t>();
      layer.conv.stride_w = jl["stride"][1].get<std::size_t>();
      layer.pool.stride_h = layer.conv.stride_h;
      layer.pool.stride_w = layer.conv.stride_w;
    }
    if (jl.contains("pad")) {
      layer.conv.pad_h = jl["pad"][0].get<std::size_t>();
      layer.conv.pad_w = jl["pad"][1].get<std::size_t>();
    }
    if (jl.contains("kernel")) {
      layer.pool.kernel_h = jl["kernel"][0].get<std::size_t>();
      layer.pool.kernel_w = jl["kernel"][1].get<std::size_t>();
    }

    if (jl.contains("weights")) {
      const auto shape = shape_from_json(jl["weights"].at("shape"));
      if (jl.contains("weight_quant")) {
        const auto& wq = jl["weight_quant"];
        const int bits = wq.at("bits").get<int>();
        std::vector<double> scales;
        for (const auto& s : wq.at("scales")) scales.push_back(s.get<double>());
        if (shape.empty() || scales.size() != shape[0]) {
          throw std::runtime_error("layer '" + layer.name +
                                   "': scale count does not match channel count");
        }
        Tensor codes = read_tensor(bf, shape, layer.name);
        Tensor w(shape);
        const std::size_t per_channel = w.size() / shape[0];
        for (std::size_t c = 0; c < shape[0]; ++c) {
          for (std::size_t i = 0; i < per_channel; ++i) {
            w[c * per_channel + i] = codes[c * per_channel + i] * scales[c];
          }
        }
        layer.weights = std::move(w);
        layer.prequantized_weights = true;
        layer.bits_weight = bits;
        any_quant = true;
      } else {
        layer.weights = read_tensor(bf, shape, layer.name);
      }
    }
    if (jl.contains("bias")) {
      layer.bias = read_tensor(bf, shape_from_json(jl["bias"].at("shape")), layer.name);
    }
    if (jl.contains("bn")) {
      BatchNormAttrs bn;
      const std::size_t channels = jl["bn"].at("channels").get<std::size_t>();
      bn.eps = jl["bn"].value("eps", 1e-5);
      bn.gamma = read_tensor(bf, {channels}, layer.name);
      bn.beta = read_tensor(bf, {channels}, layer.name);
      bn.mean = read_tensor(bf, {channels}, layer.name);
      bn.variance = read_tensor(bf, {channels}, layer.name);
      layer.bn = std::move(bn);
    }
    if (jl.contains("act_quant")) {
      const auto& aq = jl["act_quant"];
      ActQuantParams ap;
      ap.bits = aq.at("bits").get<int>();
      ap.lo = aq.at("lo").get<double>();
      ap.hi = aq.at("hi").get<double>();
      quant.activations[static_cast<int>(graph.layers.size())] = ap;
      any_quant = true;
    }
    graph.layers.push_back(std::move(layer));
  }

  graph.validate();
  if (any_quant) model.quant = std::move(quant);
  return model;
}

namespace {

json layer_manifest(const LayerSpec& layer) {
  json jl;
  jl["name"] = layer.name;
  jl["kind"] = layer_kind_name(layer.kind);
  jl["inputs"] = layer.inputs;
  jl["bits_weight"] = layer.bits_weight;
  jl["bits_activation"] = layer.bits_activation;
  if (layer.kind == LayerKind::Conv2d) {
    jl["stride"] = {layer.conv.stride_h, layer.conv.stride_w};
    jl["pad"] = {layer.conv.pad_h, layer.conv.pad_w};
  }
  if (layer.kind == LayerKind::AvgPool) {
    jl["kernel"] = {layer.pool.kernel_h, layer.pool.kernel_w};
    jl["stride"] = {layer.pool.stride_h, layer.pool.stride_w};
  }
  if (layer.weights) jl["weights"] = {{"shape", shape_to_json(layer.weights->shape())}};
  if (layer.bias) jl["bias"] = {{"shape", shape_to_json(layer.bias->shape())}};
  if (layer.bn) {
    jl["bn"] = {{"channels", layer.bn->gamma.size()}, {"eps", layer.bn->eps}};
  }
  return jl;
}

void write_layer_blob(std::ostream& os, const LayerSpec& layer) {
  if (layer.weights) write_tensor(os, *layer.weights);
  if (layer.bias) write_tensor(os, *layer.bias);
  if (layer.bn) {
    write_tensor(os, layer.bn->gamma);
    write_tensor(os, layer.bn->beta);
    write_tensor(os, layer.bn->mean);
    write_tensor(os, layer.bn->variance);
  }
}

void write_manifest_and_blob(const json& manifest, const std::string& json_path,
                             const std::function<void(std::ostream&)>& blob_writer) {
  std::ofstream jf(json_path);
  if (!jf) throw std::runtime_error("cannot write model manifest '" + json_path + "'");
  jf << manifest.dump(2) << "\n";
  jf.close();

  const std::string blob_path = blob_path_for(json_path);
  std::ofstream bf(blob_path, std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write weight blob '" + blob_path + "'");
  bf.write(kWeightBlobMagic, 8);
  blob_writer(bf);
}

}  // namespace

void save_model(const NetworkGraph& graph, const std::string& json_path) {
  graph.validate();
  json manifest;
  manifest["format"] = "eptq-model-v1";
  manifest["input_shape"] = shape_to_json(graph.input_shape);
  manifest["comparison_points"] = graph.comparison_points;
  json layers = json::array();
  for (const auto& layer : graph.layers) layers.push_back(layer_manifest(layer));
  manifest["layers"] = std::move(layers);

  write_manifest_and_blob(manifest, json_path, [&](std::ostream& os) {
    for (const auto& layer : graph.layers) write_layer_blob(os, layer);
  });
}

void save_quantized_model(const NetworkGraph& graph, const QuantState& state,
                          const std::string& json_path, const std::string& config_hash) {
  graph.validate();
  json manifest;
  manifest["format"] = "eptq-model-v1";
  manifest["input_shape"] = shape_to_json(graph.input_shape);
  manifest["comparison_points"] = graph.comparison_points;
  if (!config_hash.empty()) manifest["config_hash"] = config_hash;

  json layers = json::array();
  for (std::size_t li = 0; li < graph.layers.size(); ++li) {
    const LayerSpec& layer = graph.layers[li];
    const int layer_id = static_cast<int>(li);
    json jl = layer_manifest(layer);

    auto wq_it = state.weights.find(layer_id);
    if (layer.has_weights() && wq_it != state.weights.end() && wq_it->second.bits != 32) {
      const WeightQuantParams& p = wq_it->second;
      json wq;
      wq["bits"] = p.bits;
      json scales = json::array();
      for (std::size_t c = 0; c < p.channels(); ++c) scales.push_back(p.step(c));
      wq["scales"] = std::move(scales);
      jl["weight_quant"] = std::move(wq);
      jl["bits_weight"] = p.bits;
    }
    auto bias_it = state.bias_override.find(layer_id);
    if (bias_it != state.bias_override.end()) {
      jl["bias"] = {{"shape", shape_to_json(bias_it->second.shape())}};
    }
    auto aq_it = state.activations.find(layer_id);
    if (aq_it != state.activations.end() && aq_it->second.bits != 32) {
      jl["act_quant"] = {
          {"bits", aq_it->second.bits}, {"lo", aq_it->second.lo}, {"hi", aq_it->second.hi}};
      jl["bits_activation"] = aq_it->second.bits;
    }
    layers.push_back(std::move(jl));
  }
  manifest["layers"] = std::move(layers);

  write_manifest_and_blob(manifest, json_path, [&](std::ostream& os) {
    for (std::size_t li = 0; li < graph.layers.size(); ++li) {
      const LayerSpec& layer = graph.layers[li];
      const int layer_id = static_cast<int>(li);
      auto wq_it = state.weights.find(layer_id);
      if (layer.weights) {
        if (wq_it != state.weights.end() && wq_it->second.bits != 32) {
          const auto codes = weight_codes_hard(*layer.weights, wq_it->second);
          for (long code : codes) write_f64(os, static_cast<double>(code));
        } else {
          write_tensor(os, *layer.weights);
        }
      }
      auto bias_it = state.bias_override.find(layer_id);
      if (bias_it != state.bias_override.end()) {
        write_tensor(os, bias_it->second);
      } else if (layer.bias) {
        write_tensor(os, *layer.bias);
      }
      if (layer.bn) {
        write_tensor(os, layer.bn->gamma);
        write_tensor(os, layer.bn->beta);
        write_tensor(os, layer.bn->mean);
        write_tensor(os, layer.bn->variance);
      }
    }
  });
}

Dataset load_dataset(const std::string& path, std::size_t limit) {
  if (limit < 1) throw std::invalid_argument("dataset limit must be at least 1");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset '" + path + "'");
  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, kDatasetMagic, 8) != 0) {
    throw std::runtime_error("dataset '" + path + "' has a bad magic header");
  }
  const std::uint32_t count = read_u32(f);
  const std::uint32_t rank = read_u32(f);
  if (rank == 0 || rank > 8) throw std::runtime_error("dataset rank " + std::to_string(rank) +
                                                      " is out of range");
  std::vector<std::size_t> shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(read_u32(f));
  const std::uint32_t has_labels = read_u32(f);

  const std::size_t take = std::min<std::size_t>(limit, count);
  if (limit > count && limit != SIZE_MAX) {  // SIZE_MAX = load everything
    std::cerr << "warning: dataset '" << path << "' has " << count << " samples, requested "
              << limit << "\n";
  }

  Dataset data;
  const std::size_t sample_elems = shape_product(shape);
  for (std::size_t s = 0; s < count; ++s) {
    if (s < take) {
      Tensor t(shape);
      for (std::size_t i = 0; i < sample_elems; ++i) {
        if (!read_f64(f, t[i])) {
          throw std::runtime_error("dataset '" + path + "' truncated at sample " +
                                   std::to_string(s));
        }
      }
      t.require_finite("dataset sample " + std::to_string(s));
      data.inputs.push_back(std::move(t));
    } else {
      f.seekg(static_cast<std::streamoff>(sample_elems * 8), std::ios::cur);
    }
  }
  if (has_labels) {
    for (std::size_t s = 0; s < take; ++s) data.labels.push_back(read_u32(f));
  }
  return data;
}

void save_dataset(const Dataset& data, const std::vector<std::size_t>& sample_shape,
                  const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write dataset '" + path + "'");
  f.write(kDatasetMagic, 8);
  write_u32(f, static_cast<std::uint32_t>(data.inputs.size()));
  write_u32(f, static_cast<std::uint32_t>(sample_shape.size()));
  for (std::size_t d : sample_shape) write_u32(f, static_cast<std::uint32_t>(d));
  write_u32(f, data.has_labels() ? 1u : 0u);
  for (const Tensor& t : data.inputs) {
    if (t.shape() != sample_shape) {
      throw std::invalid_argument("dataset sample shape mismatch at write time");
    }
    write_tensor(f, t);
  }
  for (std::uint32_t label : data.labels) write_u32(f, label);
}

}  // namespace eptq
