#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "chprune/accounting.hpp"
#include "chprune/engine.hpp"
#include "chprune/relax.hpp"
#include "chprune/subgraph.hpp"

namespace chprune {

/// A network evaluated with binary masks. Kept channels retain their sigma(s)
/// scale so that folding the surviving scales preserves the function.
template <typename T>
struct MaskedModel {
  Graph graph;
  Coloring coloring;
  GateSet gates;
  MaskSet masks;
  Weights<T> weights;
  /// Nodes whose output is structurally zero; they evaluate to zero.
  std::set<NodeId> silenced;
  /// Nodes absent from the pruned graph: silenced ones, Sums reduced to an
  /// identity, and operators with no path to the Output.
  std::set<NodeId> removed;

  Tensor<T> evaluate(const Tensor<T>& input) const;
};

/// Masks from sigma(s) > tau; non-prunable groups are all-ones. A positive
/// `min_survivors` keeps the highest-s channels of a group that would fall
/// below it. Groups whose every producer is dead are zeroed as well.
template <typename T>
MaskedModel<T> apply_masks(const Graph& graph, const Coloring& coloring, const GateSet& gates,
                           const Weights<T>& weights, double tau, int64_t min_survivors = 0);

/// Nodes whose output is identically zero under `masks`. Groups left without
/// a live producer are zeroed in `masks` until a fixed point is reached.
std::set<NodeId> dead_nodes(const Graph& graph, const Coloring& coloring, MaskSet& masks);

struct CollapseResult {
  Graph graph;
  std::vector<NodeId> removed;  // sorted
};

/// Deletes `dead` nodes, turns a Sum left with one live input into an identity
/// and removes operators without a path to the Output. Throws EmptyNetwork.
CollapseResult collapse_dead(const Graph& graph, const std::set<NodeId>& dead);

template <typename T>
struct PrunedModel {
  Graph graph;
  Coloring coloring;
  Weights<T> weights;
  /// Surviving relaxation parameters, re-indexed to `coloring`. Empty once folded.
  GateSet gates;
  bool folded = false;
  std::vector<NodeId> removed;

  GateMode mode() const { return folded ? GateMode::None : GateMode::Relaxed; }
  Tensor<T> evaluate(const Tensor<T>& input) const;
};

/// Physically drops masked channels and dead operators. Convolution and
/// fully-connected weights are sliced on both axes, BatchNorm vectors on
/// their channel axis. Throws EmptyNetwork.
template <typename T>
PrunedModel<T> remove_channels(const MaskedModel<T>& masked);

/// Multiplies each channel's sigma(s) into its gate site: convolution or
/// fully-connected rows and bias, or BatchNorm scale and shift. Throws NoFoldTarget.
template <typename T>
Weights<T> fold_gates(const Graph& graph, const Coloring& coloring, const Weights<T>& weights, const GateSet& gates);

/// Folds the model in place; its gate set becomes empty.
template <typename T>
void fold(PrunedModel<T>& model);

/// Max |masked - pruned| over all probe outputs. Throws ShapeDrift.
template <typename T>
double verify_equivalence(const MaskedModel<T>& masked, const PrunedModel<T>& pruned,
                          const std::vector<Tensor<T>>& probes);

/// Standard-normal probe inputs shaped like the graph's Input.
template <typename T>
std::vector<Tensor<T>> random_probes(const Graph& graph, size_t count, uint64_t seed);

struct GroupKeep {
  int group = 0;
  int64_t kept = 0;
  int64_t total = 0;
};

struct PruneReport {
  std::vector<GroupKeep> groups;
  std::vector<NodeId> removed;
  double params_before = 0;
  double params_after = 0;
  double flops_before = 0;
  double flops_after = 0;
  /// Binary-gate accounting on the unpruned graph; equals the after values.
  double masked_params = 0;
  double masked_flops = 0;
  double residual = 0;
};

std::string export_prune_report(const PruneReport& report);

struct PruneOptions {
  double tau = 0.5;
  int64_t min_survivors = 0;
  bool fold = true;
  size_t probes = 16;
  uint64_t probe_seed = 0;
};

template <typename T>
struct PruneOutcome {
  PrunedModel<T> model;
  PruneReport report;
};

/// Mask, remove, optionally fold, and measure the result against the masked model.
template <typename T>
PruneOutcome<T> prune(const Graph& graph, const Coloring& coloring, const GateSet& gates, const Weights<T>& weights,
                      const PruneOptions& options);

}  // namespace chprune
