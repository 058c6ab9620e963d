#include "chprune/subgraph.hpp"

#include <algorithm>
#include <set>
#include <tuple>

#include <nlohmann/json.hpp>

#include "chprune/error.hpp"
#include "chprune/union_find.hpp"

namespace chprune {

std::string role_name(PortRole role) {
  switch (role) {
    case PortRole::GraphInput: return "graph-input";
    case PortRole::ConvOutput: return "conv-output";
    case PortRole::ConvInput: return "conv-input";
    case PortRole::BnChannels: return "bn-channels";
    case PortRole::FcOutput: return "fc-output";
    case PortRole::FcInput: return "fc-input";
    case PortRole::Opaque: return "opaque";
  }
  return "unknown";
}

std::vector<int> Coloring::prunable_groups() const {
  std::vector<int> out;
  for (const auto& g : groups)
    if (g.prunable) out.push_back(g.id);
  return out;
}

namespace {

struct ProtoGroup {
  int64_t width = 0;
  std::vector<GroupMember> members;
  bool pinned = false;
};

}  // namespace

Coloring identify_subgraphs(const Graph& graph) {
  ShapeMap shapes = infer_shapes(graph, 1);
  std::vector<ProtoGroup> proto;
  UnionFind sets;
  std::map<NodeId, std::vector<Segment>> segs;  // proto ids until resolved

  auto new_group = [&](int64_t width, GroupMember first, bool pinned) {
    proto.push_back(ProtoGroup{width, {std::move(first)}, pinned});
    sets.add();
    return static_cast<int>(proto.size() - 1);
  };
  auto mark_members = [&](const std::vector<Segment>& in, const NodeId& node, PortRole role) {
    for (const auto& s : in) proto[s.group].members.push_back(GroupMember{node, role, s.offset});
  };
  auto pin = [&](const std::vector<Segment>& in) {
    for (const auto& s : in) proto[s.group].pinned = true;
  };

  for (size_t idx : graph.topo_order()) {
    const auto& n = graph.nodes()[idx];
    const auto& shape = shapes.at(n.id);
    std::vector<Segment> out;
    switch (n.kind) {
      case OpKind::Input:
        out = {Segment{new_group(shape.channels, GroupMember{n.id, PortRole::GraphInput, 0}, true), 0}};
        break;
      case OpKind::Convolution:
      case OpKind::FullyConnected: {
        bool conv = n.kind == OpKind::Convolution;
        mark_members(segs.at(n.inputs[0]), n.id, conv ? PortRole::ConvInput : PortRole::FcInput);
        out = {Segment{new_group(shape.channels, GroupMember{n.id, conv ? PortRole::ConvOutput : PortRole::FcOutput, 0}, false), 0}};
        break;
      }
      case OpKind::BatchNorm:
        out = segs.at(n.inputs[0]);
        mark_members(out, n.id, PortRole::BnChannels);
        break;
      case OpKind::ReLU:
      case OpKind::MaxPool:
      case OpKind::Upsample:
        out = segs.at(n.inputs[0]);
        break;
      case OpKind::Output:
        out = segs.at(n.inputs[0]);
        pin(out);
        break;
      case OpKind::Sum:
      case OpKind::ElementwiseProduct: {
        out = segs.at(n.inputs[0]);
        for (size_t i = 1; i < n.inputs.size(); ++i) {
          const auto& other = segs.at(n.inputs[i]);
          if (other.size() != out.size())
            throw Error(ErrorCode::InconsistentWidths, "node '" + n.id + "': inputs are segmented differently");
          for (size_t k = 0; k < out.size(); ++k) {
            if (other[k].offset != out[k].offset ||
                proto[sets.find(other[k].group)].width != proto[sets.find(out[k].group)].width)
              throw Error(ErrorCode::InconsistentWidths, "node '" + n.id + "': merged groups differ in width");
            sets.merge(static_cast<size_t>(out[k].group), static_cast<size_t>(other[k].group));
          }
        }
        break;
      }
      case OpKind::Concatenation: {
        int64_t offset = 0;
        for (const auto& p : n.inputs) {
          for (auto s : segs.at(p)) {
            s.offset += offset;
            out.push_back(s);
          }
          offset += shapes.at(p).channels;
        }
        break;
      }
      case OpKind::Unknown:
        for (const auto& p : n.inputs) {
          pin(segs.at(p));
          mark_members(segs.at(p), n.id, PortRole::Opaque);
        }
        out = {Segment{new_group(shape.channels, GroupMember{n.id, PortRole::Opaque, 0}, true), 0}};
        break;
    }
    segs[n.id] = std::move(out);
  }

  // Collapse the union-find classes into groups.
  std::map<size_t, ProtoGroup> merged;
  for (size_t g = 0; g < proto.size(); ++g) {
    auto& target = merged[sets.find(g)];
    if (target.width != 0 && target.width != proto[g].width)
      throw Error(ErrorCode::InconsistentWidths, "merged groups differ in width");
    target.width = proto[g].width;
    target.pinned = target.pinned || proto[g].pinned;
    target.members.insert(target.members.end(), proto[g].members.begin(), proto[g].members.end());
  }
  auto member_less = [](const GroupMember& a, const GroupMember& b) {
    return std::tie(a.node, a.role, a.offset) < std::tie(b.node, b.role, b.offset);
  };
  std::vector<std::pair<size_t, ProtoGroup*>> order;
  for (auto& [root, g] : merged) {
    std::sort(g.members.begin(), g.members.end(), member_less);
    g.members.erase(std::unique(g.members.begin(), g.members.end()), g.members.end());
    order.emplace_back(root, &g);
  }
  // Canonical numbering by first member.
  std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    return member_less(a.second->members.front(), b.second->members.front());
  });
  std::map<size_t, int> root_to_id;
  Coloring coloring;
  for (size_t i = 0; i < order.size(); ++i) {
    root_to_id[order[i].first] = static_cast<int>(i);
    ChannelGroup g;
    g.id = static_cast<int>(i);
    g.width = order[i].second->width;
    g.members = order[i].second->members;
    g.prunable = !order[i].second->pinned;
    coloring.groups.push_back(std::move(g));
  }
  for (auto& [node, list] : segs) {
    for (auto& s : list) s.group = root_to_id.at(sets.find(static_cast<size_t>(s.group)));
    coloring.assignment[node] = list;
  }

  // Gate sites: after the producer, or after the BatchNorm that is its sole consumer.
  for (auto& g : coloring.groups) {
    for (const auto& m : g.members) {
      if (m.role != PortRole::ConvOutput && m.role != PortRole::FcOutput) continue;
      g.producers.push_back(m.node);
      const auto& cons = graph.consumers(m.node);
      NodeId site = m.node;
      if (cons.size() == 1 && graph.node(cons[0].consumer).kind == OpKind::BatchNorm) site = cons[0].consumer;
      g.gate_sites.push_back(site);
      coloring.site_group[site] = g.id;
    }
  }
  return coloring;
}

std::string export_coloring(const Coloring& coloring) {
  nlohmann::ordered_json doc;
  doc["groups"] = nlohmann::ordered_json::array();
  for (const auto& g : coloring.groups) {
    nlohmann::ordered_json jg;
    jg["id"] = g.id;
    jg["width"] = g.width;
    jg["prunable"] = g.prunable;
    jg["producers"] = g.producers;
    jg["gate_sites"] = g.gate_sites;
    jg["members"] = nlohmann::ordered_json::array();
    for (const auto& m : g.members)
      jg["members"].push_back({{"node", m.node}, {"role", role_name(m.role)}, {"offset", m.offset}});
    doc["groups"].push_back(std::move(jg));
  }
  return doc.dump(2) + "\n";
}

}  // namespace chprune
