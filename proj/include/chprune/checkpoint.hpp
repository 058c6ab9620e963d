#pragma once

#include <cstdint>
#include <string>

#include "chprune/engine.hpp"
#include "chprune/optimizer.hpp"
#include "chprune/relax.hpp"

namespace chprune {

/// Everything needed to continue a workflow bit-exactly.
struct Checkpoint {
  Graph graph;
  Weights<float> weights;
  GateSet gates;
  OptimizerState optimizer;
  uint64_t seed = 0;
  int64_t next_step = 0;  // first workflow step not yet completed
  int64_t epoch_counter = 0;
  int64_t iteration = 0;
  /// Workflow bookkeeping (JSON text).
  std::string state;
};

/// Versioned binary container, written to a temporary file then renamed.
/// Throws CheckpointWriteFailure.
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);

/// Throws CheckpointReadFailure for missing, truncated or foreign files.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace chprune
