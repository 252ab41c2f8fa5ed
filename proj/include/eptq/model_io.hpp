#pragma once

#include <optional>
#include <string>

#include "eptq/graph.hpp"
#include "eptq/quantizers.hpp"

namespace eptq {

// Quantization payload carried by a quantized model artifact: activation
// ranges plus (implicitly) the per-channel scales baked into the weight
// tensors at load time.
struct LoadedModel {
  NetworkGraph graph;
  std::optional<QuantState> quant;  // present for quantized artifacts
};

inline constexpr char kWeightBlobMagic[8] = {'E', 'P', 'T', 'Q', 'W', '0', '0', '1'};
inline constexpr char kDatasetMagic[8] = {'E', 'P', 'T', 'Q', 'D', '0', '0', '1'};

// Model manifest (.eptq.json) plus weight blob (<stem>.eptq.bin). The blob
// holds all layer tensors as little-endian f64 in manifest order, prefixed by
// the magic bytes.
LoadedModel load_model(const std::string& json_path);
void save_model(const NetworkGraph& graph, const std::string& json_path);

// Writes a quantized artifact: weighted layers store integer grid codes and
// per-channel scales so reload requires no re-quantization; activation ranges
// and bit-widths are stored per comparison point. `config_hash` is embedded
// for provenance.
void save_quantized_model(const NetworkGraph& graph, const QuantState& state,
                          const std::string& json_path, const std::string& config_hash);

// Dataset file (.eptqd): magic, u32 sample count, u32 rank, u32 dims...,
// u32 has-labels flag, then contiguous little-endian f64 samples, then the
// optional u32 label block.
Dataset load_dataset(const std::string& path, std::size_t limit);
void save_dataset(const Dataset& data, const std::vector<std::size_t>& sample_shape,
                  const std::string& path);

}  // namespace eptq
