#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chprune/engine.hpp"

namespace chprune {

enum class OptimizerMethod { Sgd, Adam };

struct OptimizerConfig {
  OptimizerMethod method = OptimizerMethod::Adam;
  double lr = 1e-3;
  /// Learning rate of the relaxation parameters; defaults to `lr`.
  std::optional<double> gate_lr;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 decay on network weights only.
  double weight_decay = 0.0;
};

/// Moment buffers per trainable field: weight, bias, gamma, beta.
struct OptimizerState {
  uint64_t step = 0;
  std::map<NodeId, std::array<std::vector<double>, 4>> first;
  std::map<NodeId, std::array<std::vector<double>, 4>> second;
  std::map<int, std::vector<double>> gate_first;
  std::map<int, std::vector<double>> gate_second;
  bool operator==(const OptimizerState&) const = default;
};

/// One update of weights and gates. `lr_scale` multiplies both learning
/// rates (schedules). Throws NonFiniteGradient before touching anything.
template <typename T>
void optimizer_step(Weights<T>& weights, GateSet& gates, const Gradients<T>& grads, const OptimizerConfig& config,
                    OptimizerState& state, double lr_scale = 1.0);

/// Cosine decay from 1 to 0 over `total` iterations.
double cosine_scale(int64_t iteration, int64_t total);

}  // namespace chprune
