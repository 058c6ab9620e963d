#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

namespace chprune {

using NodeId = std::string;

enum class OpKind {
  Input,
  Output,
  Convolution,
  BatchNorm,
  ReLU,
  Sum,
  ElementwiseProduct,
  Concatenation,
  FullyConnected,
  MaxPool,
  Upsample,
  Unknown,
};

std::string kind_name(OpKind kind);
// Unrecognized names map to OpKind::Unknown.
OpKind kind_from_name(const std::string& name);

/// Shape of an activation: batch, channels, then spatial extents.
/// Fully-connected activations have an empty spatial list.
struct TensorShape {
  int64_t batch = 1;
  int64_t channels = 1;
  std::vector<int64_t> spatial;

  int64_t spatial_size() const;
  int64_t elements() const { return batch * channels * spatial_size(); }
  std::string str() const;
  bool operator==(const TensorShape&) const = default;
};

struct InputAttrs {
  int64_t channels = 1;
  std::vector<int64_t> spatial;
  bool operator==(const InputAttrs&) const = default;
};

struct ConvAttrs {
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  std::vector<int64_t> kernel;
  int64_t stride = 1;
  int64_t padding = 0;
  bool bias = false;

  int64_t kernel_size() const;
  bool operator==(const ConvAttrs&) const = default;
};

struct FcAttrs {
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  bool operator==(const FcAttrs&) const = default;
};

/// MaxPool (window = stride = factor) and nearest-neighbour Upsample.
struct ResampleAttrs {
  int64_t factor = 2;
  bool operator==(const ResampleAttrs&) const = default;
};

struct UnknownAttrs {
  std::string kind_name;
  std::map<std::string, std::string> values;
  bool operator==(const UnknownAttrs&) const = default;
};

using Attributes = std::variant<std::monostate, InputAttrs, ConvAttrs, FcAttrs, ResampleAttrs, UnknownAttrs>;

struct OperatorNode {
  NodeId id;
  OpKind kind = OpKind::Unknown;
  Attributes attrs;
  /// Producers feeding each input slot, in slot order.
  std::vector<NodeId> inputs;

  const ConvAttrs& conv() const { return std::get<ConvAttrs>(attrs); }
  const FcAttrs& fc() const { return std::get<FcAttrs>(attrs); }
  const ResampleAttrs& resample() const { return std::get<ResampleAttrs>(attrs); }
  const InputAttrs& input() const { return std::get<InputAttrs>(attrs); }

  bool operator==(const OperatorNode&) const = default;
};

struct Edge {
  NodeId producer;
  NodeId consumer;
  int slot = 0;
};

/// Immutable operator DAG. Construction accepts any node set, including
/// malformed ones, so that `validate` can report what is wrong with it.
class Graph {
 public:
  Graph() = default;
  explicit Graph(std::vector<OperatorNode> nodes);

  const std::vector<OperatorNode>& nodes() const { return nodes_; }
  size_t size() const { return nodes_.size(); }
  bool contains(const NodeId& id) const { return index_.count(id) != 0; }
  const OperatorNode& node(const NodeId& id) const;
  size_t index_of(const NodeId& id) const;

  std::vector<Edge> edges() const;
  /// Consumers of `id`, ordered by consumer id then slot.
  const std::vector<Edge>& consumers(const NodeId& id) const;

  /// Node indices in topological order; ties broken by id. Throws CycleDetected.
  const std::vector<size_t>& topo_order() const;

  std::optional<NodeId> entry() const;
  std::optional<NodeId> exit() const;
  const NodeId& entry_id() const;
  const NodeId& exit_id() const;

  size_t count(OpKind kind) const;

  /// Nodes sorted by id.
  bool operator==(const Graph& other) const;

 private:
  std::vector<OperatorNode> nodes_;
  std::unordered_map<NodeId, size_t> index_;
  std::unordered_map<NodeId, std::vector<Edge>> consumers_;
  std::vector<size_t> topo_;
  bool cyclic_ = false;
};

/// Incremental construction helper used by the model builders and tests.
class GraphBuilder {
 public:
  NodeId input(const NodeId& id, int64_t channels, std::vector<int64_t> spatial);
  NodeId output(const NodeId& id, const NodeId& from);
  NodeId conv(const NodeId& id, const NodeId& from, int64_t in_channels, int64_t out_channels,
              std::vector<int64_t> kernel, int64_t stride = 1, int64_t padding = 0, bool bias = false);
  NodeId fc(const NodeId& id, const NodeId& from, int64_t in_channels, int64_t out_channels);
  NodeId batch_norm(const NodeId& id, const NodeId& from);
  NodeId relu(const NodeId& id, const NodeId& from);
  NodeId sum(const NodeId& id, std::vector<NodeId> from);
  NodeId product(const NodeId& id, std::vector<NodeId> from);
  NodeId concat(const NodeId& id, std::vector<NodeId> from);
  NodeId max_pool(const NodeId& id, const NodeId& from, int64_t factor);
  NodeId upsample(const NodeId& id, const NodeId& from, int64_t factor);
  NodeId unknown(const NodeId& id, std::vector<NodeId> from, const std::string& kind_name,
                 std::map<std::string, std::string> values = {});
  NodeId add(OperatorNode node);

  Graph build() const { return Graph(nodes_); }

 private:
  std::vector<OperatorNode> nodes_;
};

using ShapeMap = std::map<NodeId, TensorShape>;

/// Output shape of every node. Throws ShapeMismatch, MissingAttribute,
/// NonPositiveExtent, or InvalidGraph for structurally broken graphs.
ShapeMap infer_shapes(const Graph& graph, const TensorShape& input_shape);

/// Shape inference using the Input node's declared shape with the given batch.
ShapeMap infer_shapes(const Graph& graph, int64_t batch = 1);

enum class DiagnosticCode {
  CycleDetected,
  DuplicateId,
  MissingEntry,
  MissingExit,
  MultipleEntries,
  MultipleExits,
  DanglingInput,
  WrongArity,
  AttributeMismatch,
  MissingAttribute,
  NonPositiveExtent,
  ShapeMismatch,
  Unreachable,
};

std::string diagnostic_name(DiagnosticCode code);

struct Diagnostic {
  DiagnosticCode code;
  NodeId subject;
  std::string message;
};

/// Empty iff every graph invariant holds.
std::vector<Diagnostic> validate(const Graph& graph);

}  // namespace chprune
