#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chprune/models.hpp>
#include <chprune/subgraph.hpp>
#include <chprune/union_find.hpp>

#include <algorithm>
#include <random>

#include "support.hpp"

using namespace chprune;

namespace {

Graph chain() {
  GraphBuilder b;
  b.input("in", 3, {8, 8});
  b.conv("c1", "in", 3, 16, {3, 3}, 1, 1);
  b.batch_norm("bn", "c1");
  b.relu("r", "bn");
  b.conv("c2", "r", 16, 10, {1, 1});
  b.output("out", "c2");
  return b.build();
}

int group_of(const Coloring& c, const NodeId& id) { return c.segments(id).at(0).group; }

}  // namespace

TEST_CASE("union find") {
  UnionFind uf(5);
  uf.merge(0, 3);
  uf.merge(3, 4);
  CHECK(uf.find(0) == uf.find(4));
  CHECK(uf.find(1) != uf.find(0));
}

TEST_CASE("conv chain forms one prunable group") {
  Graph g = chain();
  Coloring c = identify_subgraphs(g);
  auto prunable = c.prunable_groups();
  REQUIRE(prunable.size() == 1);
  const auto& grp = c.group(prunable[0]);
  CHECK(grp.width == 16);
  CHECK(grp.producers == std::vector<NodeId>{"c1"});
  CHECK(group_of(c, "bn") == grp.id);
  CHECK(group_of(c, "r") == grp.id);
  // the bn directly after the producer carries the gate
  CHECK(grp.gate_sites == std::vector<NodeId>{"bn"});
  CHECK_FALSE(c.group(group_of(c, "c2")).prunable);
}

TEST_CASE("residual unit merges into one color") {
  GraphBuilder b;
  b.input("in", 3, {8, 8});
  b.conv("stem", "in", 3, 8, {3, 3}, 1, 1);
  b.conv("c", "stem", 8, 8, {3, 3}, 1, 1);
  b.batch_norm("bn", "c");
  b.sum("add", {"stem", "bn"});
  b.conv("head", "add", 8, 2, {1, 1});
  b.output("out", "head");
  Coloring c = identify_subgraphs(b.build());
  CHECK(group_of(c, "stem") == group_of(c, "c"));
  CHECK(group_of(c, "add") == group_of(c, "stem"));
  const auto& grp = c.group(group_of(c, "add"));
  CHECK(grp.prunable);
  CHECK(grp.producers.size() == 2);
}

TEST_CASE("unknown operators exclude their group") {
  GraphBuilder b;
  b.input("in", 3, {8, 8});
  b.conv("c1", "in", 3, 6, {3, 3}, 1, 1);
  b.unknown("mystery", {"c1"}, "FooOp");
  b.conv("c2", "mystery", 6, 4, {3, 3}, 1, 1);
  b.relu("r", "c2");
  b.conv("c3", "r", 4, 2, {1, 1});
  b.output("out", "c3");
  Coloring c = identify_subgraphs(b.build());
  CHECK_FALSE(c.group(group_of(c, "c1")).prunable);
  CHECK(c.group(group_of(c, "c2")).prunable);
}

TEST_CASE("unequal widths cannot merge") {
  GraphBuilder b;
  b.input("in", 3, {4, 4});
  b.conv("a", "in", 3, 4, {1, 1});
  b.conv("c", "in", 3, 2, {1, 1});
  b.concat("cat", {"a", "c"});
  b.conv("d", "in", 3, 6, {1, 1});
  b.sum("s", {"cat", "d"});
  b.output("out", "s");
  try {
    identify_subgraphs(b.build());
    FAIL("expected InconsistentWidths");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InconsistentWidths);
  }
}

TEST_CASE("concatenation keeps segment identities") {
  Graph g = build_reference_model("unet-small", {.width = 4, .depth = 2, .classes = 3, .image_size = 8});
  Coloring c = identify_subgraphs(g);
  for (const auto& n : g.nodes()) {
    if (n.kind != OpKind::Concatenation) continue;
    const auto& segs = c.segments(n.id);
    size_t pos = 0;
    for (const auto& src : n.inputs)
      for (const auto& s : c.segments(src)) {
        REQUIRE(pos < segs.size());
        CHECK(segs[pos].group == s.group);
        ++pos;
      }
    CHECK(pos == segs.size());
  }
}

TEST_CASE("coloring invariants on random graphs") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Graph g = testsupport::random_graph(rng, {.max_nodes = 16});
    Coloring c = identify_subgraphs(g);
    auto shapes = infer_shapes(g, 1);
    for (const auto& n : g.nodes()) {
      // segments tile the channel axis exactly once
      int64_t covered = 0;
      for (const auto& s : c.segments(n.id)) {
        CHECK(s.offset == covered);
        covered += c.group(s.group).width;
      }
      CHECK(covered == shapes.at(n.id).channels);
      if (n.kind == OpKind::Sum || n.kind == OpKind::ElementwiseProduct)
        for (const auto& src : n.inputs) CHECK(c.segments(src) == c.segments(n.id));
    }
    // the group feeding the output is task-fixed
    for (const auto& s : c.segments(g.exit_id())) CHECK_FALSE(c.group(s.group).prunable);

    // node insertion order does not matter
    std::vector<OperatorNode> nodes = g.nodes();
    std::shuffle(nodes.begin(), nodes.end(), rng);
    CHECK(identify_subgraphs(Graph(nodes)) == c);
    // idempotent
    CHECK(identify_subgraphs(g) == c);
  }
}

TEST_CASE("footprint") {
  SUBCASE("chain footprint is the cost removed by zeroing the group") {
    Graph g = chain();
    Coloring c = identify_subgraphs(g);
    auto fp = group_cost_footprint(c, g);
    int grp = c.prunable_groups().at(0);
    REQUIRE(fp.count(grp) == 1);
    auto full = testsupport::brute_force_cost(g, c, {});
    auto off = testsupport::brute_force_cost(g, c, {{grp, std::vector<double>(16, 0.0)}});
    CHECK(fp.at(grp).params == full.params - off.params);
    CHECK(fp.at(grp).flops == full.flops - off.flops);
    // c1: 3*16*9 weights, bn: 32, c2: 16*10
    CHECK(fp.at(grp).params == 432 + 32 + 160);
  }
  SUBCASE("graph without convolutions") {
    GraphBuilder b;
    b.input("in", 3, {4, 4});
    b.relu("r", "in");
    b.output("out", "r");
    Graph g = b.build();
    CHECK(group_cost_footprint(identify_subgraphs(g), g).empty());
  }
  SUBCASE("resnet8 residual group dominates") {
    Graph g = build_reference_model("resnet8", {.width = 8, .classes = 4, .image_size = 16});
    Coloring c = identify_subgraphs(g);
    auto fp = group_cost_footprint(c, g);
    // the group spanning the most Sums is the widest residual chain
    int residual = -1;
    size_t best = 0;
    for (int id : c.prunable_groups()) {
      size_t producers = c.group(id).producers.size();
      if (producers > best) best = producers, residual = id;
    }
    REQUIRE(residual >= 0);
    for (const auto& [id, f] : fp)
      if (id != residual) CHECK(f.flops < fp.at(residual).flops);
  }
}

TEST_CASE("coloring export lists every group") {
  Coloring c = identify_subgraphs(chain());
  std::string text = export_coloring(c);
  CHECK(text.find("\"c1\"") != std::string::npos);
  CHECK(text.find("conv-output") != std::string::npos);
}
