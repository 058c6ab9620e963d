#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chprune/models.hpp>
#include <chprune/pruner.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <random>

#include "support.hpp"

using namespace chprune;

namespace {

int group_of(const Coloring& c, const NodeId& id) { return c.segments(id).at(0).group; }

// stem -> [c1 -> bn1 -> relu -> c2 -> bn2] + stem -> relu -> head
Graph residual_unit(int64_t width = 6) {
  GraphBuilder b;
  b.input("in", 3, {6, 6});
  b.conv("stem", "in", 3, width, {3, 3}, 1, 1);
  b.conv("c1", "stem", width, 4, {3, 3}, 1, 1);
  b.batch_norm("bn1", "c1");
  b.relu("r1", "bn1");
  b.conv("c2", "r1", 4, width, {3, 3}, 1, 1);
  b.batch_norm("bn2", "c2");
  b.sum("add", {"stem", "bn2"});
  b.relu("r2", "add");
  b.max_pool("gp", "r2", 6);
  b.fc("head", "gp", width, 3);
  b.output("out", "head");
  return b.build();
}

bool contains(const std::vector<NodeId>& v, const NodeId& id) { return std::find(v.begin(), v.end(), id) != v.end(); }

}  // namespace

TEST_CASE("mask application") {
  Graph g = residual_unit();
  Coloring c = identify_subgraphs(g);
  Weights<double> w = testsupport::random_weights<double>(g, 1);

  SUBCASE("a tiny threshold keeps everything") {
    GateSet gates = testsupport::random_gates(c, 2, -3, 3);
    auto m = apply_masks(g, c, gates, w, 1e-300);
    for (const auto& [id, mask] : m.masks.masks)
      for (auto v : mask) CHECK(v == 1);
    CHECK(m.silenced.empty());
  }
  SUBCASE("logistic threshold per channel") {
    GateSet gates = init_gates(c);
    int inner = group_of(c, "c1");
    gates.values[inner] = {-3, 3, 3, 3};
    auto m = apply_masks(g, c, gates, w, 0.5);
    CHECK(m.masks.masks.at(inner) == std::vector<uint8_t>{0, 1, 1, 1});
  }
  SUBCASE("non-prunable groups stay whole") {
    GateSet gates = init_gates(c);
    int head = group_of(c, "head");
    CHECK_FALSE(c.group(head).prunable);
    gates.values[head].assign(3, -5.0);
    auto m = apply_masks(g, c, gates, w, 0.5);
    CHECK(m.masks.masks.at(head) == std::vector<uint8_t>{1, 1, 1});
  }
  SUBCASE("survivor floor keeps the strongest channels") {
    GateSet gates = init_gates(c);
    int inner = group_of(c, "c1");
    gates.values[inner] = {-3, -1, -2, -4};
    auto m = apply_masks(g, c, gates, w, 0.5, 2);
    CHECK(m.masks.masks.at(inner) == std::vector<uint8_t>{0, 1, 1, 0});
  }
}

TEST_CASE("channel removal") {
  SUBCASE("eight survivors of sixty-four") {
    GraphBuilder b;
    b.input("in", 3, {4, 4});
    b.conv("c", "in", 3, 64, {3, 3}, 1, 1);
    b.relu("r", "c");
    b.conv("head", "r", 64, 2, {1, 1});
    b.output("out", "head");
    Graph g = b.build();
    Coloring col = identify_subgraphs(g);
    GateSet gates = init_gates(col);
    auto& s = gates.values.at(group_of(col, "c"));
    for (size_t i = 0; i < s.size(); ++i) s[i] = i % 8 == 0 ? 2.0 : -2.0;
    auto out = prune(g, col, gates, testsupport::random_weights<float>(g, 1), PruneOptions{});
    CHECK(out.model.graph.node("c").conv().out_channels == 8);
    CHECK(out.model.graph.node("head").conv().in_channels == 8);
    CHECK(out.model.weights.at("c").weight.size() == 8 * 3 * 9);
    CHECK(out.report.residual < 1e-5);
  }
  SUBCASE("all-ones masks leave the graph unchanged") {
    Graph g = build_reference_model("resnet8", {.width = 4, .classes = 3, .image_size = 8});
    Coloring c = identify_subgraphs(g);
    GateSet gates = testsupport::random_gates(c, 4, 0.5, 2);
    Weights<double> w = testsupport::random_weights<double>(g, 5);
    auto masked = apply_masks(g, c, gates, w, 0.01);
    auto pruned = remove_channels(masked);
    CHECK(pruned.graph == g);
    CHECK(pruned.coloring == c);
    CHECK(pruned.weights.nodes == w.nodes);
    CHECK(pruned.gates.values == gates.values);
  }
  SUBCASE("a residual group shrinks consistently") {
    Graph g = residual_unit(6);
    Coloring c = identify_subgraphs(g);
    GateSet gates = init_gates(c);
    int res = group_of(c, "stem");
    gates.values[res] = {1, -1, 1, -1, -1, 1};
    auto out = prune(g, c, gates, testsupport::random_weights<double>(g, 6), PruneOptions{});
    const Graph& p = out.model.graph;
    CHECK(validate(p).empty());
    CHECK(p.node("stem").conv().out_channels == 3);
    CHECK(p.node("c1").conv().in_channels == 3);
    CHECK(p.node("c2").conv().out_channels == 3);
    CHECK(p.node("head").fc().in_channels == 3);
    CHECK(out.model.weights.at("bn2").gamma.size() == 3);
    auto shapes = infer_shapes(p, 1);
    CHECK(shapes.at("add").channels == 3);
    CHECK(out.report.residual < 1e-12);
  }
}

TEST_CASE("gate folding") {
  Graph g = residual_unit();
  Coloring c = identify_subgraphs(g);
  Weights<double> w = testsupport::random_weights<double>(g, 7);

  SUBCASE("unit gates change nothing") {
    GateSet gates = init_gates(c, 4.0, 1.0, 1e3);
    auto folded = fold_gates(g, c, w, gates);
    CHECK(folded.nodes == w.nodes);
  }
  SUBCASE("half gates on a conv feeding relu") {
    GraphBuilder b;
    b.input("in", 2, {3, 3});
    b.conv("c", "in", 2, 3, {1, 1}, 1, 0, true);
    b.relu("r", "c");
    b.conv("head", "r", 3, 2, {1, 1});
    b.output("out", "head");
    Graph chain = b.build();
    Coloring cc = identify_subgraphs(chain);
    GateSet half = init_gates(cc, 4.0, 1.0, 0.0);
    Weights<double> cw = testsupport::random_weights<double>(chain, 8);
    auto folded = fold_gates(chain, cc, cw, half);
    for (size_t i = 0; i < cw.at("c").weight.size(); ++i) CHECK(folded.at("c").weight[i] == 0.5 * cw.at("c").weight[i]);
    for (size_t i = 0; i < 3; ++i) CHECK(folded.at("c").bias[i] == 0.5 * cw.at("c").bias[i]);
    auto out = prune(chain, cc, half, cw, PruneOptions{.tau = 0.4});
    CHECK(out.model.folded);
    CHECK(out.model.gates.values.empty());
    CHECK(out.report.residual < 1e-6);
  }
  SUBCASE("gates folded into the following batch norm") {
    GateSet gates = testsupport::random_gates(c, 9, -0.3, 0.3);
    auto folded = fold_gates(g, c, w, gates);
    int inner = group_of(c, "c1");
    CHECK(c.group(inner).gate_sites == std::vector<NodeId>{"bn1"});
    for (size_t i = 0; i < 4; ++i) {
      double s = sigma(gates.values.at(inner)[i], gates.steepness);
      CHECK(folded.at("bn1").gamma[i] == doctest::Approx(w.at("bn1").gamma[i] * s).epsilon(1e-15));
    }
    CHECK(folded.at("c1").weight == w.at("c1").weight);
    auto out = prune(g, c, gates, w, PruneOptions{.tau = 1e-6});
    CHECK(out.report.residual < 1e-12);
  }
  SUBCASE("a gate site without a foldable operator") {
    Coloring broken = c;
    int inner = group_of(c, "c1");
    broken.groups[static_cast<size_t>(inner)].gate_sites = {"r1"};
    try {
      fold_gates(g, broken, w, init_gates(c));
      FAIL("expected NoFoldTarget");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NoFoldTarget);
    }
  }
}

TEST_CASE("dead subgraph collapse") {
  SUBCASE("a fully pruned residual branch reduces to the identity path") {
    Graph g = residual_unit();
    Coloring c = identify_subgraphs(g);
    GateSet gates = init_gates(c);
    gates.values[group_of(c, "c1")].assign(4, -3.0);
    Weights<double> w = testsupport::random_weights<double>(g, 10);
    auto out = prune(g, c, gates, w, PruneOptions{});
    const Graph& p = out.model.graph;
    CHECK(validate(p).empty());
    for (const char* id : {"c1", "bn1", "r1", "c2", "bn2", "add"}) CHECK_FALSE(p.contains(id));
    CHECK(p.node("r2").inputs == std::vector<NodeId>{"stem"});
    CHECK(p.count(OpKind::Sum) == 0);
    CHECK(out.report.residual < 1e-12);
    CHECK(out.report.params_after == out.report.masked_params);
    CHECK(out.report.flops_after == out.report.masked_flops);
  }
  SUBCASE("nothing dead, nothing removed") {
    Graph g = residual_unit();
    CHECK(collapse_dead(g, {}).graph == g);
    CHECK(collapse_dead(g, {}).removed.empty());
  }
  SUBCASE("two dead convs feeding a sum input") {
    GraphBuilder b;
    b.input("in", 2, {4, 4});
    b.conv("stem", "in", 2, 3, {1, 1});
    b.conv("d1", "stem", 3, 3, {3, 3}, 1, 1);
    b.conv("d2", "d1", 3, 3, {3, 3}, 1, 1);
    b.sum("add", {"stem", "d2"});
    b.conv("head", "add", 3, 2, {1, 1});
    b.output("out", "head");
    Graph g = b.build();
    auto r = collapse_dead(g, {"d1", "d2"});
    CHECK(r.removed == std::vector<NodeId>{"add", "d1", "d2"});
    CHECK(validate(r.graph).empty());
    CHECK(r.graph.node("head").inputs == std::vector<NodeId>{"stem"});
  }
  SUBCASE("operators left without a consumer are removed") {
    GraphBuilder b;
    b.input("in", 2, {4, 4});
    b.conv("a", "in", 2, 2, {1, 1});
    b.conv("b", "in", 2, 2, {1, 1});
    b.concat("cat", {"a", "b"});
    b.conv("head", "cat", 4, 2, {1, 1});
    b.output("out", "head");
    Graph g = b.build();
    auto r = collapse_dead(g, {"a"});
    // channel counts are fixed up by the slicing pass, not here
    CHECK(r.removed == std::vector<NodeId>{"a"});
    CHECK(r.graph.node("cat").inputs == std::vector<NodeId>{"b"});
  }
  SUBCASE("a dead output is rejected") {
    Graph g = residual_unit();
    try {
      collapse_dead(g, {"head"});
      FAIL("expected EmptyNetwork");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptyNetwork);
    }
  }
}

TEST_CASE("equivalence probe") {
  Graph g = residual_unit();
  Coloring c = identify_subgraphs(g);
  GateSet gates = testsupport::random_gates(c, 11, -0.5, 0.5);
  Weights<double> w = testsupport::random_weights<double>(g, 12);
  auto masked = apply_masks(g, c, gates, w, 0.5);
  auto probes = random_probes<double>(g, 16, 13);

  SUBCASE("an unfolded copy matches exactly") {
    auto pruned = remove_channels(masked);
    auto all_ones = apply_masks(g, c, gates, w, 1e-300);
    auto same = remove_channels(all_ones);
    CHECK(verify_equivalence(all_ones, same, probes) == 0.0);
    fold(pruned);
    CHECK(verify_equivalence(masked, pruned, probes) < 1e-12);
  }
  SUBCASE("a corrupted fold is caught") {
    auto pruned = remove_channels(masked);
    fold(pruned);
    auto& bn = pruned.weights.nodes.at("bn1");
    bn.gamma[0] *= 3.0;
    CHECK(verify_equivalence(masked, pruned, probes) > 1e-3);
  }
  SUBCASE("output shape drift is an error") {
    auto pruned = remove_channels(masked);
    GraphBuilder b;
    b.input("in", 3, {6, 6});
    b.max_pool("gp", "in", 6);
    b.fc("head", "gp", 3, 5);
    b.output("out", "head");
    pruned.graph = b.build();
    pruned.coloring = identify_subgraphs(pruned.graph);
    pruned.weights = init_weights<double>(pruned.graph, 1);
    pruned.gates = GateSet{};
    try {
      verify_equivalence(masked, pruned, probes);
      FAIL("expected ShapeDrift");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ShapeDrift);
    }
  }
}

TEST_CASE("pruning random models") {
  std::mt19937_64 rng(19);
  int pruned_models = 0;
  for (int trial = 0; trial < 60; ++trial) {
    Graph g = testsupport::random_graph(rng, {.max_nodes = 16, .max_channels = 6});
    Coloring c = identify_subgraphs(g);
    GateSet gates = testsupport::random_gates(c, rng(), -0.6, 0.6);
    Weights<double> w = testsupport::random_weights<double>(g, rng());
    PruneOutcome<double> out;
    try {
      out = prune(g, c, gates, w, PruneOptions{});
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptyNetwork);
      continue;
    }
    ++pruned_models;
    const Graph& p = out.model.graph;
    CHECK(validate(p).empty());
    CHECK_NOTHROW(infer_shapes(p, 2));
    CHECK(out.report.residual < 1e-10);
    CHECK(out.report.params_after == out.report.masked_params);
    CHECK(out.report.flops_after == out.report.masked_flops);
    CHECK(out.report.flops_after <= out.report.flops_before);
    CHECK(out.report.params_after <= out.report.params_before);
    for (const auto& k : out.report.groups) CHECK(k.kept <= k.total);

    // pruning again at the same threshold changes nothing
    PruneOutcome<double> again = prune(p, out.model.coloring, init_gates(out.model.coloring, 4.0, 1.0, 1e3),
                                       out.model.weights, PruneOptions{});
    CHECK(again.model.graph == p);
    CHECK(again.report.removed.empty());
  }
  CHECK(pruned_models >= 20);
}

TEST_CASE("unfolded pruning carries surviving gates") {
  Graph g = residual_unit();
  Coloring c = identify_subgraphs(g);
  GateSet gates = init_gates(c);
  int inner = group_of(c, "c1");
  gates.values[inner] = {-1, 0.3, -2, 0.7};
  auto out = prune(g, c, gates, testsupport::random_weights<double>(g, 14), PruneOptions{.fold = false});
  CHECK_FALSE(out.model.folded);
  int new_inner = group_of(out.model.coloring, "c1");
  CHECK(out.model.gates.values.at(new_inner) == std::vector<double>{0.3, 0.7});
  CHECK(out.report.residual < 1e-12);
  auto doc = nlohmann::json::parse(export_prune_report(out.report));
  CHECK(doc["groups"].size() == c.prunable_groups().size());
}
