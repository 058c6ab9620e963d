#include "chprune/graph.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

#include "chprune/error.hpp"

namespace chprune {

namespace {

const std::vector<std::pair<OpKind, const char*>>& kind_table() {
  static const std::vector<std::pair<OpKind, const char*>> table = {
      {OpKind::Input, "Input"},
      {OpKind::Output, "Output"},
      {OpKind::Convolution, "Convolution"},
      {OpKind::BatchNorm, "BatchNorm"},
      {OpKind::ReLU, "ReLU"},
      {OpKind::Sum, "Sum"},
      {OpKind::ElementwiseProduct, "ElementwiseProduct"},
      {OpKind::Concatenation, "Concatenation"},
      {OpKind::FullyConnected, "FullyConnected"},
      {OpKind::MaxPool, "MaxPool"},
      {OpKind::Upsample, "Upsample"},
  };
  return table;
}

// Expected variant alternative for each kind.
size_t expected_attr_index(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return 1;
    case OpKind::Convolution: return 2;
    case OpKind::FullyConnected: return 3;
    case OpKind::MaxPool:
    case OpKind::Upsample: return 4;
    case OpKind::Unknown: return 5;
    default: return 0;
  }
}

struct Arity {
  size_t min;
  size_t max;
};

Arity arity(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return {0, 0};
    case OpKind::Sum:
    case OpKind::ElementwiseProduct: return {2, SIZE_MAX};
    case OpKind::Concatenation:
    case OpKind::Unknown: return {1, SIZE_MAX};
    default: return {1, 1};
  }
}

[[noreturn]] void fail(ErrorCode code, const NodeId& id, const std::string& what) {
  throw Error(code, "node '" + id + "': " + what);
}

}  // namespace

std::string kind_name(OpKind kind) {
  for (const auto& [k, name] : kind_table())
    if (k == kind) return name;
  return "Unknown";
}

OpKind kind_from_name(const std::string& name) {
  for (const auto& [k, n] : kind_table())
    if (name == n) return k;
  return OpKind::Unknown;
}

int64_t TensorShape::spatial_size() const {
  return std::accumulate(spatial.begin(), spatial.end(), int64_t{1}, std::multiplies<>());
}

std::string TensorShape::str() const {
  std::ostringstream os;
  os << "(" << batch << "," << channels << ")";
  if (!spatial.empty()) {
    os << "+(";
    for (size_t i = 0; i < spatial.size(); ++i) os << (i ? "," : "") << spatial[i];
    os << ")";
  }
  return os.str();
}

int64_t ConvAttrs::kernel_size() const {
  return std::accumulate(kernel.begin(), kernel.end(), int64_t{1}, std::multiplies<>());
}

Graph::Graph(std::vector<OperatorNode> nodes) : nodes_(std::move(nodes)) {
  for (size_t i = 0; i < nodes_.size(); ++i) index_.emplace(nodes_[i].id, i);
  for (const auto& n : nodes_) {
    for (size_t slot = 0; slot < n.inputs.size(); ++slot)
      consumers_[n.inputs[slot]].push_back(Edge{n.inputs[slot], n.id, static_cast<int>(slot)});
  }
  for (auto& [id, list] : consumers_) {
    std::sort(list.begin(), list.end(), [](const Edge& a, const Edge& b) {
      return a.consumer != b.consumer ? a.consumer < b.consumer : a.slot < b.slot;
    });
  }

  // Kahn's algorithm over resolvable edges, smallest id first.
  std::vector<size_t> indegree(nodes_.size(), 0);
  for (size_t i = 0; i < nodes_.size(); ++i)
    for (const auto& in : nodes_[i].inputs)
      if (contains(in)) ++indegree[i];
  using Item = std::pair<NodeId, size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> ready;
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (indegree[i] == 0 && index_.at(nodes_[i].id) == i) ready.emplace(nodes_[i].id, i);
  std::vector<bool> done(nodes_.size(), false);
  while (!ready.empty()) {
    auto [id, i] = ready.top();
    ready.pop();
    if (done[i]) continue;
    done[i] = true;
    topo_.push_back(i);
    auto it = consumers_.find(id);
    if (it == consumers_.end()) continue;
    for (const auto& e : it->second) {
      size_t c = index_.at(e.consumer);
      if (--indegree[c] == 0) ready.emplace(e.consumer, c);
    }
  }
  size_t unique = index_.size();
  cyclic_ = topo_.size() != unique;
}

const OperatorNode& Graph::node(const NodeId& id) const { return nodes_.at(index_of(id)); }

size_t Graph::index_of(const NodeId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw Error(ErrorCode::InvalidGraph, "no node '" + id + "'");
  return it->second;
}

std::vector<Edge> Graph::edges() const {
  std::vector<Edge> out;
  for (const auto& n : nodes_)
    for (size_t slot = 0; slot < n.inputs.size(); ++slot)
      out.push_back(Edge{n.inputs[slot], n.id, static_cast<int>(slot)});
  return out;
}

const std::vector<Edge>& Graph::consumers(const NodeId& id) const {
  static const std::vector<Edge> none;
  auto it = consumers_.find(id);
  return it == consumers_.end() ? none : it->second;
}

const std::vector<size_t>& Graph::topo_order() const {
  if (cyclic_) throw Error(ErrorCode::CycleDetected, "graph contains a cycle");
  return topo_;
}

std::optional<NodeId> Graph::entry() const {
  for (const auto& n : nodes_)
    if (n.kind == OpKind::Input) return n.id;
  return std::nullopt;
}

std::optional<NodeId> Graph::exit() const {
  for (const auto& n : nodes_)
    if (n.kind == OpKind::Output) return n.id;
  return std::nullopt;
}

const NodeId& Graph::entry_id() const {
  for (const auto& n : nodes_)
    if (n.kind == OpKind::Input) return n.id;
  throw Error(ErrorCode::InvalidGraph, "graph has no Input node");
}

const NodeId& Graph::exit_id() const {
  for (const auto& n : nodes_)
    if (n.kind == OpKind::Output) return n.id;
  throw Error(ErrorCode::InvalidGraph, "graph has no Output node");
}

size_t Graph::count(OpKind kind) const {
  return static_cast<size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [kind](const OperatorNode& n) { return n.kind == kind; }));
}

bool Graph::operator==(const Graph& other) const {
  if (nodes_.size() != other.nodes_.size()) return false;
  auto sorted = [](const std::vector<OperatorNode>& v) {
    std::vector<const OperatorNode*> p;
    for (const auto& n : v) p.push_back(&n);
    std::sort(p.begin(), p.end(), [](auto* a, auto* b) { return a->id < b->id; });
    return p;
  };
  auto a = sorted(nodes_);
  auto b = sorted(other.nodes_);
  for (size_t i = 0; i < a.size(); ++i)
    if (!(*a[i] == *b[i])) return false;
  return true;
}

// --- builder ---------------------------------------------------------------

NodeId GraphBuilder::add(OperatorNode node) {
  nodes_.push_back(std::move(node));
  return nodes_.back().id;
}

NodeId GraphBuilder::input(const NodeId& id, int64_t channels, std::vector<int64_t> spatial) {
  return add({id, OpKind::Input, InputAttrs{channels, std::move(spatial)}, {}});
}

NodeId GraphBuilder::output(const NodeId& id, const NodeId& from) {
  return add({id, OpKind::Output, std::monostate{}, {from}});
}

NodeId GraphBuilder::conv(const NodeId& id, const NodeId& from, int64_t in_channels, int64_t out_channels,
                          std::vector<int64_t> kernel, int64_t stride, int64_t padding, bool bias) {
  return add({id, OpKind::Convolution,
              ConvAttrs{in_channels, out_channels, std::move(kernel), stride, padding, bias}, {from}});
}

NodeId GraphBuilder::fc(const NodeId& id, const NodeId& from, int64_t in_channels, int64_t out_channels) {
  return add({id, OpKind::FullyConnected, FcAttrs{in_channels, out_channels}, {from}});
}

NodeId GraphBuilder::batch_norm(const NodeId& id, const NodeId& from) {
  return add({id, OpKind::BatchNorm, std::monostate{}, {from}});
}

NodeId GraphBuilder::relu(const NodeId& id, const NodeId& from) {
  return add({id, OpKind::ReLU, std::monostate{}, {from}});
}

NodeId GraphBuilder::sum(const NodeId& id, std::vector<NodeId> from) {
  return add({id, OpKind::Sum, std::monostate{}, std::move(from)});
}

NodeId GraphBuilder::product(const NodeId& id, std::vector<NodeId> from) {
  return add({id, OpKind::ElementwiseProduct, std::monostate{}, std::move(from)});
}

NodeId GraphBuilder::concat(const NodeId& id, std::vector<NodeId> from) {
  return add({id, OpKind::Concatenation, std::monostate{}, std::move(from)});
}

NodeId GraphBuilder::max_pool(const NodeId& id, const NodeId& from, int64_t factor) {
  return add({id, OpKind::MaxPool, ResampleAttrs{factor}, {from}});
}

NodeId GraphBuilder::upsample(const NodeId& id, const NodeId& from, int64_t factor) {
  return add({id, OpKind::Upsample, ResampleAttrs{factor}, {from}});
}

NodeId GraphBuilder::unknown(const NodeId& id, std::vector<NodeId> from, const std::string& kind_name,
                             std::map<std::string, std::string> values) {
  return add({id, OpKind::Unknown, UnknownAttrs{kind_name, std::move(values)}, std::move(from)});
}

// --- shape inference ---------------------------------------------------------

namespace {

TensorShape node_output_shape(const OperatorNode& n, const std::vector<const TensorShape*>& in,
                              const TensorShape& input_shape) {
  if (n.attrs.index() != expected_attr_index(n.kind))
    fail(ErrorCode::MissingAttribute, n.id, "attributes do not match kind " + kind_name(n.kind));
  auto a = arity(n.kind);
  if (in.size() < a.min || in.size() > a.max)
    fail(ErrorCode::InvalidGraph, n.id, "wrong number of inputs (" + std::to_string(in.size()) + ")");

  switch (n.kind) {
    case OpKind::Input: {
      const auto& attrs = n.input();
      if (attrs.channels != input_shape.channels || attrs.spatial != input_shape.spatial)
        fail(ErrorCode::ShapeMismatch, n.id, "input shape " + input_shape.str() + " does not match declared shape");
      return input_shape;
    }
    case OpKind::Output:
    case OpKind::ReLU:
    case OpKind::BatchNorm:
    case OpKind::Unknown: return *in[0];
    case OpKind::Sum:
    case OpKind::ElementwiseProduct: {
      for (size_t i = 1; i < in.size(); ++i)
        if (!(*in[i] == *in[0]))
          fail(ErrorCode::ShapeMismatch, n.id, "inputs " + in[0]->str() + " and " + in[i]->str() + " differ");
      return *in[0];
    }
    case OpKind::Concatenation: {
      TensorShape out = *in[0];
      for (size_t i = 1; i < in.size(); ++i) {
        if (in[i]->batch != out.batch || in[i]->spatial != out.spatial)
          fail(ErrorCode::ShapeMismatch, n.id, "concatenated inputs differ outside the channel axis");
        out.channels += in[i]->channels;
      }
      return out;
    }
    case OpKind::Convolution: {
      const auto& c = n.conv();
      if (c.in_channels < 1 || c.out_channels < 1 || c.stride < 1 || c.padding < 0)
        fail(ErrorCode::NonPositiveExtent, n.id, "channel counts and stride must be positive");
      for (auto m : c.kernel)
        if (m < 1) fail(ErrorCode::NonPositiveExtent, n.id, "kernel extents must be positive");
      if (c.kernel.size() != in[0]->spatial.size())
        fail(ErrorCode::ShapeMismatch, n.id, "kernel rank does not match spatial rank");
      if (in[0]->channels != c.in_channels)
        fail(ErrorCode::ShapeMismatch, n.id,
             "expects " + std::to_string(c.in_channels) + " input channels, got " + in[0]->str());
      TensorShape out{in[0]->batch, c.out_channels, {}};
      for (size_t k = 0; k < c.kernel.size(); ++k) {
        int64_t span = in[0]->spatial[k] + 2 * c.padding - c.kernel[k];
        int64_t extent = span < 0 ? 0 : span / c.stride + 1;
        if (extent < 1) fail(ErrorCode::NonPositiveExtent, n.id, "output extent below 1");
        out.spatial.push_back(extent);
      }
      return out;
    }
    case OpKind::FullyConnected: {
      const auto& f = n.fc();
      if (f.in_channels < 1 || f.out_channels < 1)
        fail(ErrorCode::NonPositiveExtent, n.id, "channel counts must be positive");
      if (in[0]->channels != f.in_channels || in[0]->spatial_size() != 1)
        fail(ErrorCode::ShapeMismatch, n.id,
             "expects (b," + std::to_string(f.in_channels) + ") input, got " + in[0]->str());
      return TensorShape{in[0]->batch, f.out_channels, {}};
    }
    case OpKind::MaxPool:
    case OpKind::Upsample: {
      int64_t k = n.resample().factor;
      if (k < 1) fail(ErrorCode::NonPositiveExtent, n.id, "factor must be positive");
      TensorShape out = *in[0];
      for (auto& d : out.spatial) {
        d = n.kind == OpKind::MaxPool ? d / k : d * k;
        if (d < 1) fail(ErrorCode::NonPositiveExtent, n.id, "output extent below 1");
      }
      return out;
    }
  }
  fail(ErrorCode::UnknownKind, n.id, "unhandled kind");
}

}  // namespace

ShapeMap infer_shapes(const Graph& graph, const TensorShape& input_shape) {
  if (input_shape.batch < 1 || input_shape.channels < 1)
    throw Error(ErrorCode::NonPositiveExtent, "input shape " + input_shape.str());
  for (auto d : input_shape.spatial)
    if (d < 1) throw Error(ErrorCode::NonPositiveExtent, "input shape " + input_shape.str());
  ShapeMap shapes;
  for (size_t idx : graph.topo_order()) {
    const auto& n = graph.nodes()[idx];
    std::vector<const TensorShape*> in;
    for (const auto& p : n.inputs) {
      auto it = shapes.find(p);
      if (it == shapes.end()) fail(ErrorCode::InvalidGraph, n.id, "input '" + p + "' is not defined");
      in.push_back(&it->second);
    }
    shapes.emplace(n.id, node_output_shape(n, in, input_shape));
  }
  return shapes;
}

ShapeMap infer_shapes(const Graph& graph, int64_t batch) {
  const auto& in = graph.node(graph.entry_id());
  if (in.attrs.index() != 1) fail(ErrorCode::MissingAttribute, in.id, "Input node lacks shape attributes");
  return infer_shapes(graph, TensorShape{batch, in.input().channels, in.input().spatial});
}

// --- validation --------------------------------------------------------------

std::string diagnostic_name(DiagnosticCode code) {
  switch (code) {
    case DiagnosticCode::CycleDetected: return "CycleDetected";
    case DiagnosticCode::DuplicateId: return "DuplicateId";
    case DiagnosticCode::MissingEntry: return "MissingEntry";
    case DiagnosticCode::MissingExit: return "MissingExit";
    case DiagnosticCode::MultipleEntries: return "MultipleEntries";
    case DiagnosticCode::MultipleExits: return "MultipleExits";
    case DiagnosticCode::DanglingInput: return "DanglingInput";
    case DiagnosticCode::WrongArity: return "WrongArity";
    case DiagnosticCode::AttributeMismatch: return "AttributeMismatch";
    case DiagnosticCode::MissingAttribute: return "MissingAttribute";
    case DiagnosticCode::NonPositiveExtent: return "NonPositiveExtent";
    case DiagnosticCode::ShapeMismatch: return "ShapeMismatch";
    case DiagnosticCode::Unreachable: return "Unreachable";
  }
  return "Unknown";
}

std::vector<Diagnostic> validate(const Graph& graph) {
  std::vector<Diagnostic> out;
  auto report = [&](DiagnosticCode c, const NodeId& id, std::string msg) {
    out.push_back(Diagnostic{c, id, std::move(msg)});
  };

  std::set<NodeId> seen;
  for (const auto& n : graph.nodes())
    if (!seen.insert(n.id).second) report(DiagnosticCode::DuplicateId, n.id, "duplicate node id");

  size_t entries = graph.count(OpKind::Input);
  size_t exits = graph.count(OpKind::Output);
  if (entries == 0) report(DiagnosticCode::MissingEntry, "", "no Input node");
  if (entries > 1) report(DiagnosticCode::MultipleEntries, "", "more than one Input node");
  if (exits == 0) report(DiagnosticCode::MissingExit, "", "no Output node");
  if (exits > 1) report(DiagnosticCode::MultipleExits, "", "more than one Output node");

  bool structural_ok = out.empty();
  for (const auto& n : graph.nodes()) {
    auto a = arity(n.kind);
    if (n.inputs.size() < a.min || n.inputs.size() > a.max) {
      report(DiagnosticCode::WrongArity, n.id, kind_name(n.kind) + " has " + std::to_string(n.inputs.size()) + " inputs");
      structural_ok = false;
    }
    for (const auto& p : n.inputs)
      if (!graph.contains(p)) {
        report(DiagnosticCode::DanglingInput, n.id, "input '" + p + "' does not exist");
        structural_ok = false;
      }
    if (n.attrs.index() != expected_attr_index(n.kind)) {
      report(DiagnosticCode::AttributeMismatch, n.id, "attribute set does not match " + kind_name(n.kind));
      structural_ok = false;
    }
  }

  bool acyclic = true;
  try {
    (void)graph.topo_order();
  } catch (const Error&) {
    acyclic = false;
    structural_ok = false;
    // Name a node on the cycle by locating a DFS back edge.
    NodeId subject;
    {
      std::vector<int> state(graph.size(), 0);
      std::function<bool(size_t)> dfs = [&](size_t i) -> bool {
        state[i] = 1;
        for (const auto& e : graph.consumers(graph.nodes()[i].id)) {
          size_t c = graph.index_of(e.consumer);
          if (state[c] == 1) {
            subject = e.consumer;
            return true;
          }
          if (state[c] == 0 && dfs(c)) return true;
        }
        state[i] = 2;
        return false;
      };
      for (size_t i = 0; i < graph.size() && subject.empty(); ++i)
        if (state[i] == 0) dfs(i);
    }
    report(DiagnosticCode::CycleDetected, subject, "cycle through node '" + subject + "'");
  }

  if (acyclic && entries == 1 && exits == 1) {
    // Every node must lie on an Input -> Output path.
    std::set<NodeId> fwd, bwd;
    std::vector<NodeId> stack{graph.entry_id()};
    while (!stack.empty()) {
      auto id = stack.back();
      stack.pop_back();
      if (!fwd.insert(id).second) continue;
      for (const auto& e : graph.consumers(id)) stack.push_back(e.consumer);
    }
    stack = {graph.exit_id()};
    while (!stack.empty()) {
      auto id = stack.back();
      stack.pop_back();
      if (!bwd.insert(id).second) continue;
      if (!graph.contains(id)) continue;
      for (const auto& p : graph.node(id).inputs) stack.push_back(p);
    }
    for (const auto& n : graph.nodes())
      if (!fwd.count(n.id) || !bwd.count(n.id))
        report(DiagnosticCode::Unreachable, n.id, "not on a path from Input to Output");
  }

  if (structural_ok && entries == 1) {
    try {
      (void)infer_shapes(graph, 1);
    } catch (const Error& e) {
      DiagnosticCode c = DiagnosticCode::ShapeMismatch;
      if (e.code() == ErrorCode::MissingAttribute) c = DiagnosticCode::MissingAttribute;
      if (e.code() == ErrorCode::NonPositiveExtent) c = DiagnosticCode::NonPositiveExtent;
      std::string what = e.what();
      NodeId subject;
      auto q = what.find('\'');
      if (q != std::string::npos) subject = what.substr(q + 1, what.find('\'', q + 1) - q - 1);
      report(c, subject, what);
    }
  }
  return out;
}

}  // namespace chprune
