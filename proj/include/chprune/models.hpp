#pragma once

#include <string>

#include "chprune/graph.hpp"

namespace chprune {

struct ModelConfig {
  int64_t width = 16;        // channels of the first stage / encoder level
  int64_t depth = 3;         // U-Net levels below the top
  int64_t classes = 10;
  int64_t in_channels = 3;
  int64_t image_size = 32;   // square input extent
};

/// Desk-scale reference networks: "resnet8", "resnet18", "unet-small".
/// Throws UnknownModel for any other name.
Graph build_reference_model(const std::string& name, const ModelConfig& config = {});

Graph build_resnet(const std::vector<int>& blocks_per_stage, const ModelConfig& config);
Graph build_unet(const ModelConfig& config);

}  // namespace chprune
