#include "chprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace chprune {

namespace {

bool fully_zero(const MaskSet& masks, int group) {
  auto it = masks.masks.find(group);
  if (it == masks.masks.end() || it->second.empty()) return false;
  return std::all_of(it->second.begin(), it->second.end(), [](uint8_t m) { return m == 0; });
}

struct CollapseAnalysis {
  std::vector<OperatorNode> kept;
  std::set<NodeId> removed;
  bool empty = false;
};

CollapseAnalysis analyze_collapse(const Graph& graph, const std::set<NodeId>& dead_in) {
  CollapseAnalysis out;
  std::set<NodeId> dead = dead_in;
  std::map<NodeId, NodeId> replaced;  // identity Sums -> their live input
  std::map<NodeId, OperatorNode> live;

  for (size_t idx : graph.topo_order()) {
    OperatorNode n = graph.nodes()[idx];
    if (dead.count(n.id)) continue;
    std::vector<NodeId> inputs;
    size_t dead_inputs = 0;
    for (const auto& p : n.inputs) {
      if (dead.count(p)) {
        ++dead_inputs;
        continue;
      }
      auto r = replaced.find(p);
      inputs.push_back(r == replaced.end() ? p : r->second);
    }
    bool is_dead;
    switch (n.kind) {
      case OpKind::Input:
        is_dead = false;
        break;
      case OpKind::Sum:
      case OpKind::Concatenation:
      case OpKind::Unknown:
        is_dead = inputs.empty();
        break;
      default:
        is_dead = dead_inputs > 0;
    }
    if (is_dead) {
      dead.insert(n.id);
      continue;
    }
    if (n.kind == OpKind::Sum && inputs.size() == 1) {
      replaced[n.id] = inputs[0];
      out.removed.insert(n.id);
      continue;
    }
    n.inputs = std::move(inputs);
    live.emplace(n.id, std::move(n));
  }
  for (const auto& d : dead) out.removed.insert(d);

  // Keep only operators with a path to the Output.
  auto exit = graph.exit();
  if (!exit || !live.count(*exit)) {
    out.empty = true;
    for (const auto& n : graph.nodes()) out.removed.insert(n.id);
    return out;
  }
  std::set<NodeId> reach{*exit};
  std::vector<NodeId> stack{*exit};
  while (!stack.empty()) {
    NodeId id = stack.back();
    stack.pop_back();
    for (const auto& p : live.at(id).inputs)
      if (reach.insert(p).second) stack.push_back(p);
  }
  bool has_input = false;
  for (auto& [id, n] : live) {
    if (!reach.count(id)) {
      out.removed.insert(id);
      continue;
    }
    has_input = has_input || n.kind == OpKind::Input;
    out.kept.push_back(std::move(n));
  }
  if (!has_input) {
    out.empty = true;
    for (const auto& n : graph.nodes()) out.removed.insert(n.id);
  }
  return out;
}

std::vector<int64_t> kept_indices(const Coloring& coloring, const MaskSet& masks, const NodeId& node) {
  std::vector<int64_t> out;
  for (const auto& s : coloring.segments(node)) {
    auto it = masks.masks.find(s.group);
    int64_t width = coloring.group(s.group).width;
    for (int64_t i = 0; i < width; ++i)
      if (it == masks.masks.end() || it->second[static_cast<size_t>(i)]) out.push_back(s.offset + i);
  }
  return out;
}

template <typename T>
std::vector<T> slice(const std::vector<T>& v, const std::vector<int64_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[static_cast<size_t>(i)]);
  return out;
}

// Rows `out_idx`, columns `in_idx` of a [out][in][inner] array.
template <typename T>
std::vector<T> slice_matrix(const std::vector<T>& v, int64_t in_total, int64_t inner,
                            const std::vector<int64_t>& out_idx, const std::vector<int64_t>& in_idx) {
  std::vector<T> out;
  out.reserve(out_idx.size() * in_idx.size() * static_cast<size_t>(inner));
  for (auto o : out_idx)
    for (auto i : in_idx) {
      auto base = v.begin() + (o * in_total + i) * inner;
      out.insert(out.end(), base, base + inner);
    }
  return out;
}

}  // namespace

std::set<NodeId> dead_nodes(const Graph& graph, const Coloring& coloring, MaskSet& masks) {
  for (;;) {
    std::set<NodeId> dead;
    for (size_t idx : graph.topo_order()) {
      const auto& n = graph.nodes()[idx];
      auto is = [&](const NodeId& p) { return dead.count(p) != 0; };
      bool d;
      switch (n.kind) {
        case OpKind::Input:
          d = false;
          break;
        case OpKind::Convolution:
        case OpKind::FullyConnected:
          d = fully_zero(masks, coloring.segments(n.id)[0].group) || is(n.inputs[0]);
          break;
        case OpKind::Sum:
        case OpKind::Concatenation:
        case OpKind::Unknown:
          d = std::all_of(n.inputs.begin(), n.inputs.end(), is);
          break;
        case OpKind::ElementwiseProduct:
          d = std::any_of(n.inputs.begin(), n.inputs.end(), is);
          break;
        default:
          d = is(n.inputs[0]);
      }
      if (d) dead.insert(n.id);
    }
    bool changed = false;
    for (const auto& g : coloring.groups) {
      if (g.producers.empty() || fully_zero(masks, g.id)) continue;
      bool all_dead = std::all_of(g.producers.begin(), g.producers.end(), [&](const NodeId& p) { return dead.count(p) != 0; });
      if (all_dead) {
        masks.masks[g.id].assign(static_cast<size_t>(g.width), 0);
        changed = true;
      }
    }
    if (!changed) return dead;
  }
}

CollapseResult collapse_dead(const Graph& graph, const std::set<NodeId>& dead) {
  auto a = analyze_collapse(graph, dead);
  if (a.empty) throw Error(ErrorCode::EmptyNetwork, "no live path from Input to Output remains");
  return CollapseResult{Graph(std::move(a.kept)), std::vector<NodeId>(a.removed.begin(), a.removed.end())};
}

template <typename T>
Tensor<T> MaskedModel<T>::evaluate(const Tensor<T>& input) const {
  return chprune::evaluate(graph, coloring, gates, weights, input, GateMode::Masked, &masks, &silenced);
}

template <typename T>
Tensor<T> PrunedModel<T>::evaluate(const Tensor<T>& input) const {
  return chprune::evaluate(graph, coloring, gates, weights, input, mode());
}

template <typename T>
MaskedModel<T> apply_masks(const Graph& graph, const Coloring& coloring, const GateSet& gates,
                           const Weights<T>& weights, double tau, int64_t min_survivors) {
  MaskedModel<T> m{graph, coloring, gates, extract_mask(gates, tau), weights, {}, {}};
  for (auto& [g, mask] : m.masks.masks) {
    const auto& group = coloring.group(g);
    if (!group.prunable) {
      std::fill(mask.begin(), mask.end(), uint8_t{1});
      continue;
    }
    int64_t floor = std::min<int64_t>(min_survivors, group.width);
    if (m.masks.kept(g) >= floor) continue;
    const auto& s = gates.values.at(g);
    std::vector<size_t> order(s.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return s[a] > s[b]; });
    for (int64_t i = 0; i < floor; ++i) mask[order[static_cast<size_t>(i)]] = 1;
  }
  m.silenced = dead_nodes(graph, coloring, m.masks);
  m.removed = analyze_collapse(graph, m.silenced).removed;
  return m;
}

template <typename T>
PrunedModel<T> remove_channels(const MaskedModel<T>& masked) {
  auto collapsed = collapse_dead(masked.graph, masked.silenced);
  const auto& coloring = masked.coloring;
  const auto& masks = masked.masks;

  PrunedModel<T> out;
  out.removed = collapsed.removed;
  out.weights.version = masked.weights.version + 1;
  std::vector<OperatorNode> nodes;
  for (OperatorNode n : collapsed.graph.nodes()) {
    auto out_idx = kept_indices(coloring, masks, n.id);
    if (out_idx.empty()) throw Error(ErrorCode::EmptyNetwork, "node '" + n.id + "' keeps no channels");
    if (n.kind == OpKind::Convolution || n.kind == OpKind::FullyConnected) {
      auto in_idx = kept_indices(coloring, masks, n.inputs[0]);
      const auto& p = masked.weights.at(n.id);
      NodeParams<T> q;
      if (n.kind == OpKind::Convolution) {
        auto& a = std::get<ConvAttrs>(n.attrs);
        q.weight = slice_matrix(p.weight, a.in_channels, a.kernel_size(), out_idx, in_idx);
        a.in_channels = static_cast<int64_t>(in_idx.size());
        a.out_channels = static_cast<int64_t>(out_idx.size());
      } else {
        auto& a = std::get<FcAttrs>(n.attrs);
        q.weight = slice_matrix(p.weight, a.in_channels, 1, out_idx, in_idx);
        a.in_channels = static_cast<int64_t>(in_idx.size());
        a.out_channels = static_cast<int64_t>(out_idx.size());
      }
      if (!p.bias.empty()) q.bias = slice(p.bias, out_idx);
      out.weights.nodes[n.id] = std::move(q);
    } else if (n.kind == OpKind::BatchNorm) {
      const auto& p = masked.weights.at(n.id);
      out.weights.nodes[n.id] = NodeParams<T>{{},
                                              {},
                                              slice(p.gamma, out_idx),
                                              slice(p.beta, out_idx),
                                              slice(p.running_mean, out_idx),
                                              slice(p.running_var, out_idx)};
    }
    nodes.push_back(std::move(n));
  }
  out.graph = Graph(std::move(nodes));
  out.coloring = identify_subgraphs(out.graph);

  // Carry the surviving relaxation parameters over to the new group numbering.
  out.gates.steepness = masked.gates.steepness;
  out.gates.stiffening_sd = masked.gates.stiffening_sd;
  for (const auto& g : out.coloring.groups) {
    if (!g.prunable || g.producers.empty()) continue;
    int old = coloring.segments(g.producers.front())[0].group;
    auto it = masked.gates.values.find(old);
    std::vector<double> s;
    if (it != masked.gates.values.end()) {
      auto mit = masks.masks.find(old);
      for (size_t i = 0; i < it->second.size(); ++i)
        if (mit == masks.masks.end() || mit->second[i]) s.push_back(it->second[i]);
    }
    if (static_cast<int64_t>(s.size()) != g.width) s.assign(static_cast<size_t>(g.width), 1.0 / out.gates.steepness);
    out.gates.values[g.id] = std::move(s);
  }
  return out;
}

template <typename T>
Weights<T> fold_gates(const Graph& graph, const Coloring& coloring, const Weights<T>& weights, const GateSet& gates) {
  Weights<T> out = weights;
  for (const auto& [g, s] : gates.values) {
    for (const auto& site : coloring.group(g).gate_sites) {
      const auto& n = graph.node(site);
      if (n.kind != OpKind::Convolution && n.kind != OpKind::FullyConnected && n.kind != OpKind::BatchNorm)
        throw Error(ErrorCode::NoFoldTarget, "gate at '" + site + "' has no adjacent operator to fold into");
      auto it = out.nodes.find(site);
      if (it == out.nodes.end()) throw Error(ErrorCode::MissingWeights, "no weights for gate site '" + site + "'");
      auto& p = it->second;
      if (n.kind == OpKind::Convolution || n.kind == OpKind::FullyConnected) {
        size_t row = p.weight.size() / s.size();
        for (size_t c = 0; c < s.size(); ++c) {
          T scale = static_cast<T>(sigma(s[c], gates.steepness));
          for (size_t i = 0; i < row; ++i) p.weight[c * row + i] *= scale;
          if (!p.bias.empty()) p.bias[c] *= scale;
        }
      } else {
        for (size_t c = 0; c < s.size(); ++c) {
          T scale = static_cast<T>(sigma(s[c], gates.steepness));
          p.gamma[c] *= scale;
          p.beta[c] *= scale;
        }
      }
    }
  }
  ++out.version;
  return out;
}

template <typename T>
void fold(PrunedModel<T>& model) {
  if (model.folded) return;
  model.weights = fold_gates(model.graph, model.coloring, model.weights, model.gates);
  model.gates.values.clear();
  model.folded = true;
}

template <typename T>
double verify_equivalence(const MaskedModel<T>& masked, const PrunedModel<T>& pruned,
                          const std::vector<Tensor<T>>& probes) {
  double residual = 0;
  for (const auto& p : probes) {
    auto a = masked.evaluate(p);
    auto b = pruned.evaluate(p);
    if (!(a.shape == b.shape))
      throw Error(ErrorCode::ShapeDrift, "output shape " + a.shape.str() + " became " + b.shape.str());
    for (size_t i = 0; i < a.size(); ++i)
      residual = std::max(residual, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  }
  return residual;
}

template <typename T>
std::vector<Tensor<T>> random_probes(const Graph& graph, size_t count, uint64_t seed) {
  const auto& in = graph.node(graph.entry_id()).input();
  TensorShape shape{1, in.channels, in.spatial};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<Tensor<T>> out;
  for (size_t i = 0; i < count; ++i) {
    Tensor<T> t(shape);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
    out.push_back(std::move(t));
  }
  return out;
}

std::string export_prune_report(const PruneReport& report) {
  nlohmann::ordered_json doc;
  doc["groups"] = nlohmann::ordered_json::array();
  for (const auto& g : report.groups)
    doc["groups"].push_back({{"group", g.group}, {"kept", g.kept}, {"total", g.total}});
  doc["removed"] = report.removed;
  doc["params_before"] = report.params_before;
  doc["params_after"] = report.params_after;
  doc["flops_before"] = report.flops_before;
  doc["flops_after"] = report.flops_after;
  doc["masked_params"] = report.masked_params;
  doc["masked_flops"] = report.masked_flops;
  doc["residual"] = report.residual;
  return doc.dump(2) + "\n";
}

template <typename T>
PruneOutcome<T> prune(const Graph& graph, const Coloring& coloring, const GateSet& gates, const Weights<T>& weights,
                      const PruneOptions& options) {
  auto masked = apply_masks(graph, coloring, gates, weights, options.tau, options.min_survivors);
  PruneOutcome<T> out{remove_channels(masked), {}};
  if (options.fold) fold(out.model);

  auto& r = out.report;
  for (const auto& g : coloring.groups) {
    if (!g.prunable) continue;
    int64_t kept = masked.masks.masks.count(g.id) ? masked.masks.kept(g.id) : g.width;
    r.groups.push_back(GroupKeep{g.id, kept, g.width});
  }
  r.removed = out.model.removed;
  auto before = measure_costs(graph, coloring, {});
  auto after = measure_costs(out.model.graph, out.model.coloring, {});
  auto binary = masked_measures(graph, coloring, masked.masks, masked.removed);
  r.params_before = before.total_params;
  r.flops_before = before.total_flops;
  r.params_after = after.total_params;
  r.flops_after = after.total_flops;
  r.masked_params = binary.relaxed_params;
  r.masked_flops = binary.relaxed_flops;
  if (options.probes > 0)
    r.residual = verify_equivalence(masked, out.model, random_probes<T>(graph, options.probes, options.probe_seed));
  return out;
}

#define CHPRUNE_INSTANTIATE(T)                                                                                  \
  template struct MaskedModel<T>;                                                                               \
  template struct PrunedModel<T>;                                                                               \
  template MaskedModel<T> apply_masks<T>(const Graph&, const Coloring&, const GateSet&, const Weights<T>&,      \
                                         double, int64_t);                                                      \
  template PrunedModel<T> remove_channels<T>(const MaskedModel<T>&);                                            \
  template Weights<T> fold_gates<T>(const Graph&, const Coloring&, const Weights<T>&, const GateSet&);          \
  template void fold<T>(PrunedModel<T>&);                                                                       \
  template double verify_equivalence<T>(const MaskedModel<T>&, const PrunedModel<T>&,                           \
                                        const std::vector<Tensor<T>>&);                                          \
  template std::vector<Tensor<T>> random_probes<T>(const Graph&, size_t, uint64_t);                             \
  template PruneOutcome<T> prune<T>(const Graph&, const Coloring&, const GateSet&, const Weights<T>&,           \
                                    const PruneOptions&);

CHPRUNE_INSTANTIATE(float)
CHPRUNE_INSTANTIATE(double)

}  // namespace chprune
