#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "chprune/relax.hpp"
#include "chprune/subgraph.hpp"

namespace chprune {

/// Effective channel counts of an operator's input and output tensors: the sum
/// of gate values on gated channel ranges, the plain length elsewhere.
struct EffectiveChannels {
  double in = 0;
  double out = 0;
};

struct OpCost {
  double params = 0;
  double flops = 0;
};

/// Per-sample parameter count. Convolution: in*out*prod(kernel);
/// BatchNorm: 2*channels; FullyConnected: in*out + out; others 0.
double op_params(const OperatorNode& node, const EffectiveChannels& channels);

/// Per-sample FLOPs. Convolution: out*prod(d_out)*(prod(kernel)*in + 1);
/// FullyConnected: out*(in + 1); elementwise operators (ReLU, BatchNorm, Sum,
/// ElementwiseProduct, MaxPool, Upsample): channels * prod(d_in);
/// Concatenation, Input, Output: 0.
double op_flops(const OperatorNode& node, const TensorShape& input_shape, const TensorShape& output_shape,
                const EffectiveChannels& channels);

struct CostReport {
  std::map<NodeId, OpCost> per_op;
  double total_params = 0;   // P
  double total_flops = 0;    // Q
  double relaxed_params = 0;
  double relaxed_flops = 0;
  double sigma_p = 1;
  double sigma_q = 1;
  /// Derivatives of relaxed totals with respect to each group's gate sum.
  std::map<int, double> dparams_dsum;
  std::map<int, double> dflops_dsum;
  std::vector<std::string> warnings;
};

/// Costs with each group's channel extent replaced by `gate_sums` (groups
/// absent from the map count at full width; only prunable groups get
/// derivatives). Nodes in `silenced`
/// contribute nothing. Throws ZeroTotal for a model without cost.
CostReport measure_costs(const Graph& graph, const Coloring& coloring, const std::map<int, double>& gate_sums,
                         const std::set<NodeId>& silenced = {});

/// Relaxed structure measures under the current gate values.
CostReport structure_measures(const Graph& graph, const Coloring& coloring, const GateSet& gates);

/// Costs at binary gates.
CostReport masked_measures(const Graph& graph, const Coloring& coloring, const MaskSet& masks,
                           const std::set<NodeId>& silenced = {});

/// Gradients of sigma_p and sigma_q with respect to every relaxation parameter.
struct StructureGradient {
  std::map<int, std::vector<double>> dsigma_p;
  std::map<int, std::vector<double>> dsigma_q;
};
StructureGradient structure_gradient(const CostReport& report, const GateSet& gates);

std::string export_cost_report(const CostReport& report);

}  // namespace chprune
