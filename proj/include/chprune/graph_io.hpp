#pragma once

#include <string>

#include "chprune/graph.hpp"

namespace chprune {

/// Canonical line-oriented graph document.
///
///   chprune-graph 1
///   node id=<id> kind=<Kind> [<attr>=<value> ...] inputs=<id>,<id>|-
///
/// Records are sorted by id and attributes appear in a fixed per-kind order,
/// so serialization is byte-deterministic. Lists of extents use `x` as the
/// separator (`kernel=3x3`); an empty list is written as `-`. Attributes of
/// unknown operator kinds are kept verbatim as `attr.<key>=<value>` with
/// percent-escaping.
std::string serialize_graph(const Graph& graph);

/// Throws ParseError naming the offending line and field.
Graph deserialize_graph(const std::string& text);

Graph load_graph(const std::string& path);
void save_graph(const Graph& graph, const std::string& path);

}  // namespace chprune
