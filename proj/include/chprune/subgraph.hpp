#pragma once

#include <map>
#include <string>
#include <vector>

#include "chprune/graph.hpp"

namespace chprune {

enum class PortRole { GraphInput, ConvOutput, ConvInput, BnChannels, FcOutput, FcInput, Opaque };

std::string role_name(PortRole role);

struct GroupMember {
  NodeId node;
  PortRole role;
  int64_t offset = 0;  // channel offset of the group inside the member's tensor
  bool operator==(const GroupMember&) const = default;
};

/// A set of channel positions that must share one mask.
struct ChannelGroup {
  int id = 0;
  int64_t width = 0;
  std::vector<GroupMember> members;
  bool prunable = true;
  /// Convolution / fully-connected nodes whose outputs start this group.
  std::vector<NodeId> producers;
  /// Nodes after which the group's gate multiplies the activation: the
  /// producer itself, or the BatchNorm directly following it.
  std::vector<NodeId> gate_sites;
  bool operator==(const ChannelGroup&) const = default;
};

/// Channel range [offset, offset + width of group) of a tensor owned by one group.
struct Segment {
  int group = 0;
  int64_t offset = 0;
  bool operator==(const Segment&) const = default;
};

struct Coloring {
  std::vector<ChannelGroup> groups;
  /// Segments of each node's output tensor; every edge out of a node carries
  /// that node's assignment.
  std::map<NodeId, std::vector<Segment>> assignment;
  /// gate site node -> group id
  std::map<NodeId, int> site_group;

  const ChannelGroup& group(int id) const { return groups.at(static_cast<size_t>(id)); }
  const std::vector<Segment>& segments(const NodeId& node) const { return assignment.at(node); }
  std::vector<int> prunable_groups() const;
  bool operator==(const Coloring&) const = default;
};

/// Partition channel positions into groups. Convolution and fully-connected
/// outputs start groups, channel-preserving operators propagate them,
/// Sum/ElementwiseProduct merge them and Concatenation lays them out as
/// disjoint segments. Throws InconsistentWidths on a merge of unequal widths.
Coloring identify_subgraphs(const Graph& graph);

struct Footprint {
  double params = 0;
  double flops = 0;
};

/// Cost attributable to each group: full-model totals minus totals with that
/// group's gates at zero.
std::map<int, Footprint> group_cost_footprint(const Coloring& coloring, const Graph& graph);

/// Structured-text (JSON) dump of the groups and their members.
std::string export_coloring(const Coloring& coloring);

}  // namespace chprune
