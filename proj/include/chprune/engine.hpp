#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "chprune/graph.hpp"
#include "chprune/relax.hpp"
#include "chprune/subgraph.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

/// Trainable state of one operator. Convolution weight layout is
/// [out][in][kh][kw]; fully-connected is [out][in].
template <typename T>
struct NodeParams {
  std::vector<T> weight;
  std::vector<T> bias;
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool operator==(const NodeParams&) const = default;
};

template <typename T>
struct Weights {
  std::map<NodeId, NodeParams<T>> nodes;
  /// Bumped by every mutation of trainable values; tapes remember it.
  uint64_t version = 0;

  const NodeParams<T>& at(const NodeId& id) const;
  template <typename U>
  Weights<U> cast() const;
};

/// He-normal kernels, zero biases, unit BatchNorm scale, fresh statistics.
template <typename T>
Weights<T> init_weights(const Graph& graph, uint64_t seed);

enum class GateMode {
  Relaxed,  // gate = sigma(s)
  Masked,   // gate = mask * sigma(s); no gradient through s
  None,     // gates ignored
};

struct ForwardOptions {
  bool training = true;
  bool update_running_stats = true;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  GateMode gate_mode = GateMode::Relaxed;
  const MaskSet* masks = nullptr;
  /// Nodes whose output is forced to zero (structurally dead after masking).
  const std::set<NodeId>* silenced = nullptr;
};

/// Everything backward needs from one forward pass.
template <typename T>
struct Tape {
  const Graph* graph = nullptr;
  const Coloring* coloring = nullptr;
  bool training = true;
  double bn_eps = 1e-5;
  GateMode gate_mode = GateMode::Relaxed;
  double steepness = 4.0;
  uint64_t weights_version = 0;

  std::vector<Tensor<T>> outputs;   // per node index, after gating
  std::vector<Tensor<T>> pre_gate;  // per node index, only for gated nodes
  std::vector<std::vector<T>> gate;
  std::vector<int> gate_group;      // -1 when ungated
  std::vector<std::vector<double>> bn_mean;
  std::vector<std::vector<double>> bn_invstd;
  std::vector<std::vector<int64_t>> pool_argmax;
  std::vector<bool> silenced;
  std::map<int, std::vector<double>> gate_parameters;

  const Tensor<T>& output() const { return outputs.at(graph->index_of(graph->exit_id())); }
};

template <typename T>
struct Gradients {
  std::map<NodeId, NodeParams<T>> weights;
  std::map<int, std::vector<double>> gates;
};

/// Evaluates the gated network. Throws ShapeMismatch, MissingWeights,
/// UnsupportedOperator, NonFiniteValue.
template <typename T>
Tape<T> forward(const Graph& graph, const Coloring& coloring, const GateSet& gates, Weights<T>& weights,
                const Tensor<T>& input, const ForwardOptions& options = {});

/// Reverse pass. Throws StaleTape when the weights changed since the forward.
template <typename T>
Gradients<T> backward(const Tape<T>& tape, const Weights<T>& weights, const Tensor<T>& output_grad);

/// Inference-mode forward that leaves BatchNorm statistics untouched.
template <typename T>
Tensor<T> evaluate(const Graph& graph, const Coloring& coloring, const GateSet& gates, const Weights<T>& weights,
                   const Tensor<T>& input, GateMode mode = GateMode::Relaxed, const MaskSet* masks = nullptr,
                   const std::set<NodeId>* silenced = nullptr);

}  // namespace chprune
