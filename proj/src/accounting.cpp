#include "chprune/accounting.hpp"

#include <cstdio>
#include <optional>

#include <nlohmann/json.hpp>

#include "chprune/error.hpp"

namespace chprune {

namespace {

// Partial derivatives of an operator's cost with respect to its effective
// input and output channel counts.
struct CostPartials {
  OpCost value;
  OpCost d_in;
  OpCost d_out;
};

CostPartials op_partials(const OperatorNode& n, const TensorShape& in_shape, const TensorShape& out_shape,
                         const EffectiveChannels& c) {
  CostPartials r;
  switch (n.kind) {
    case OpKind::Convolution: {
      double m = static_cast<double>(n.conv().kernel_size());
      double d = static_cast<double>(out_shape.spatial_size());
      r.value = {c.in * c.out * m, c.out * d * (m * c.in + 1.0)};
      r.d_in = {c.out * m, c.out * d * m};
      r.d_out = {c.in * m, d * (m * c.in + 1.0)};
      break;
    }
    case OpKind::FullyConnected:
      r.value = {c.in * c.out + c.out, c.out * (c.in + 1.0)};
      r.d_in = {c.out, c.out};
      r.d_out = {c.in + 1.0, c.in + 1.0};
      break;
    case OpKind::BatchNorm: {
      double d = static_cast<double>(in_shape.spatial_size());
      r.value = {2.0 * c.in, c.in * d};
      r.d_in = {2.0, d};
      break;
    }
    case OpKind::ReLU:
    case OpKind::Sum:
    case OpKind::ElementwiseProduct:
    case OpKind::MaxPool:
    case OpKind::Upsample: {
      double d = static_cast<double>(in_shape.spatial_size());
      r.value = {0.0, c.in * d};
      r.d_in = {0.0, d};
      break;
    }
    default:
      break;
  }
  return r;
}

}  // namespace

double op_params(const OperatorNode& node, const EffectiveChannels& channels) {
  if (node.kind == OpKind::Unknown) return 0.0;
  TensorShape unit{1, 1, {}};
  if (node.kind == OpKind::Convolution) unit.spatial.assign(node.conv().kernel.size(), 1);
  return op_partials(node, unit, unit, channels).value.params;
}

double op_flops(const OperatorNode& node, const TensorShape& input_shape, const TensorShape& output_shape,
                const EffectiveChannels& channels) {
  return op_partials(node, input_shape, output_shape, channels).value.flops;
}

CostReport measure_costs(const Graph& graph, const Coloring& coloring, const std::map<int, double>& gate_sums,
                         const std::set<NodeId>& silenced) {
  ShapeMap shapes = infer_shapes(graph, 1);
  CostReport report;

  auto effective = [&](const NodeId& tensor, const std::map<int, double>* sums) {
    double total = 0;
    for (const auto& s : coloring.segments(tensor)) {
      const auto& g = coloring.group(s.group);
      auto it = sums ? sums->find(s.group) : gate_sums.end();
      total += (sums && it != sums->end()) ? it->second : static_cast<double>(g.width);
    }
    return total;
  };
  // d(effective channels of tensor)/d(sum of group g) is the number of segments of g.
  auto accumulate_partial = [&](const NodeId& tensor, double weight, std::map<int, double>& into) {
    for (const auto& s : coloring.segments(tensor)) {
      if (!coloring.group(s.group).prunable || !gate_sums.count(s.group)) continue;
      into[s.group] += weight;
    }
  };

  for (size_t idx : graph.topo_order()) {
    const auto& n = graph.nodes()[idx];
    if (n.kind == OpKind::Unknown) {
      report.warnings.push_back("node '" + n.id + "': unknown operator counted as zero cost");
      report.per_op[n.id] = {};
      continue;
    }
    const TensorShape& out_shape = shapes.at(n.id);
    const TensorShape& in_shape = n.inputs.empty() ? out_shape : shapes.at(n.inputs[0]);
    const NodeId& in_tensor = n.inputs.empty() ? n.id : n.inputs[0];

    EffectiveChannels full{effective(in_tensor, nullptr), effective(n.id, nullptr)};
    auto full_cost = op_partials(n, in_shape, out_shape, full).value;
    report.total_params += full_cost.params;
    report.total_flops += full_cost.flops;

    if (silenced.count(n.id)) {
      report.per_op[n.id] = {};
      continue;
    }
    EffectiveChannels relaxed{effective(in_tensor, &gate_sums), effective(n.id, &gate_sums)};
    auto partials = op_partials(n, in_shape, out_shape, relaxed);
    report.per_op[n.id] = partials.value;
    report.relaxed_params += partials.value.params;
    report.relaxed_flops += partials.value.flops;
    accumulate_partial(in_tensor, partials.d_in.params, report.dparams_dsum);
    accumulate_partial(in_tensor, partials.d_in.flops, report.dflops_dsum);
    accumulate_partial(n.id, partials.d_out.params, report.dparams_dsum);
    accumulate_partial(n.id, partials.d_out.flops, report.dflops_dsum);
  }
  if (report.total_params <= 0 || report.total_flops <= 0)
    throw Error(ErrorCode::ZeroTotal, "model has no parameters or FLOPs");
  report.sigma_p = report.relaxed_params / report.total_params;
  report.sigma_q = report.relaxed_flops / report.total_flops;
  bool resample = graph.count(OpKind::MaxPool) + graph.count(OpKind::Upsample) > 0;
  if (resample) report.warnings.push_back("MaxPool/Upsample counted as elementwise FLOPs over their input");
  return report;
}

CostReport structure_measures(const Graph& graph, const Coloring& coloring, const GateSet& gates) {
  std::map<int, double> sums;
  for (const auto& [g, s] : gates.values) {
    if (static_cast<int64_t>(s.size()) != coloring.group(g).width)
      throw Error(ErrorCode::LengthMismatch, "gate vector of group " + std::to_string(g) + " has wrong length");
    double acc = 0;
    for (double v : s) acc += sigma(v, gates.steepness);
    sums[g] = acc;
  }
  return measure_costs(graph, coloring, sums);
}

CostReport masked_measures(const Graph& graph, const Coloring& coloring, const MaskSet& masks,
                           const std::set<NodeId>& silenced) {
  std::map<int, double> sums;
  for (const auto& [g, m] : masks.masks) sums[g] = static_cast<double>(masks.kept(g));
  return measure_costs(graph, coloring, sums, silenced);
}

StructureGradient structure_gradient(const CostReport& report, const GateSet& gates) {
  StructureGradient out;
  for (const auto& [g, s] : gates.values) {
    auto dp = report.dparams_dsum.count(g) ? report.dparams_dsum.at(g) : 0.0;
    auto dq = report.dflops_dsum.count(g) ? report.dflops_dsum.at(g) : 0.0;
    auto& gp = out.dsigma_p[g];
    auto& gq = out.dsigma_q[g];
    gp.resize(s.size());
    gq.resize(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
      double ds = sigma_derivative(s[i], gates.steepness);
      gp[i] = dp / report.total_params * ds;
      gq[i] = dq / report.total_flops * ds;
    }
  }
  return out;
}

std::string export_cost_report(const CostReport& report) {
  auto full = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  nlohmann::ordered_json doc;
  doc["total_params"] = full(report.total_params);
  doc["total_flops"] = full(report.total_flops);
  doc["relaxed_params"] = full(report.relaxed_params);
  doc["relaxed_flops"] = full(report.relaxed_flops);
  doc["sigma_p"] = full(report.sigma_p);
  doc["sigma_q"] = full(report.sigma_q);
  doc["per_op"] = nlohmann::ordered_json::array();
  for (const auto& [id, c] : report.per_op)
    doc["per_op"].push_back({{"node", id}, {"params", full(c.params)}, {"flops", full(c.flops)}});
  doc["warnings"] = report.warnings;
  return doc.dump(2) + "\n";
}

}  // namespace chprune

namespace chprune {

std::map<int, Footprint> group_cost_footprint(const Coloring& coloring, const Graph& graph) {
  std::map<int, Footprint> out;
  Coloring open = coloring;
  for (auto& g : open.groups) g.prunable = true;
  std::map<int, double> on;
  for (const auto& g : open.groups) on[g.id] = static_cast<double>(g.width);
  std::optional<CostReport> full;
  for (const auto& g : coloring.groups) {
    if (g.producers.empty()) continue;
    if (!full) full = measure_costs(graph, open, on);
    auto off = on;
    off[g.id] = 0.0;
    auto reduced = measure_costs(graph, open, off);
    out[g.id] = Footprint{full->relaxed_params - reduced.relaxed_params, full->relaxed_flops - reduced.relaxed_flops};
  }
  return out;
}

}  // namespace chprune
