#pragma once

#include "eptq/graph.hpp"

namespace eptq {

// Folds every inference-mode BatchNorm into its preceding Conv2d/Dense layer:
//   W' = gamma * W / sqrt(var + eps)   (per output channel)
//   b' = gamma * (b - mean) / sqrt(var + eps) + beta
// The returned graph has no BatchNorm layers and identical float outputs.
// Throws if a BatchNorm does not directly follow a weighted layer that feeds
// only that BatchNorm's input edge.
NetworkGraph fold_batchnorm(const NetworkGraph& graph);

}  // namespace eptq
