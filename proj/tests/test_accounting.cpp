#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chprune/accounting.hpp>
#include <chprune/models.hpp>

#include <nlohmann/json.hpp>

#include <random>

#include "support.hpp"

using namespace chprune;
using testsupport::brute_force_cost;

namespace {

OperatorNode conv_node(int64_t ci, int64_t co, int64_t m) {
  return {"c", OpKind::Convolution, ConvAttrs{ci, co, {m, m}, 1, m / 2, false}, {"in"}};
}

// sigma(s) per channel of every prunable group, the oracle's keep weights
std::map<int, std::vector<double>> relaxed_keep(const GateSet& gates) {
  std::map<int, std::vector<double>> keep;
  for (const auto& [id, s] : gates.values) keep[id] = sigma(s, gates.steepness);
  return keep;
}

std::map<int, std::vector<double>> binary_keep(const MaskSet& masks) {
  std::map<int, std::vector<double>> keep;
  for (const auto& [id, m] : masks.masks) keep[id].assign(m.begin(), m.end());
  return keep;
}

}  // namespace

TEST_CASE("per-operator parameter counts") {
  CHECK(op_params(conv_node(3, 16, 3), {3, 16}) == 432);
  CHECK(op_params({"bn", OpKind::BatchNorm, std::monostate{}, {"in"}}, {16, 16}) == 32);
  CHECK(op_params({"r", OpKind::ReLU, std::monostate{}, {"in"}}, {64, 64}) == 0);
  CHECK(op_params({"s", OpKind::Sum, std::monostate{}, {"a", "b"}}, {64, 64}) == 0);
  CHECK(op_params({"f", OpKind::FullyConnected, FcAttrs{10, 4}, {"in"}}, {10, 4}) == 44);
  // relaxed channel counts enter multiplicatively
  CHECK(op_params(conv_node(3, 16, 3), {1.5, 8}) == doctest::Approx(1.5 * 8 * 9));
}

TEST_CASE("per-operator flops") {
  auto node = conv_node(3, 16, 3);
  TensorShape in{1, 3, {32, 32}}, out{1, 16, {32, 32}};
  CHECK(op_flops(node, in, out, {3, 16}) == 458752);
  CHECK(op_flops(node, in, out, {3, 8}) == 229376);
  OperatorNode cat{"cat", OpKind::Concatenation, std::monostate{}, {"a", "b"}};
  CHECK(op_flops(cat, in, TensorShape{1, 6, {32, 32}}, {6, 6}) == 0);
  OperatorNode relu{"r", OpKind::ReLU, std::monostate{}, {"in"}};
  CHECK(op_flops(relu, in, in, {2.5, 2.5}) == doctest::Approx(2.5 * 1024));
  OperatorNode fc{"f", OpKind::FullyConnected, FcAttrs{10, 4}, {"in"}};
  CHECK(op_flops(fc, TensorShape{1, 10, {}}, TensorShape{1, 4, {}}, {10, 4}) == 44);
}

TEST_CASE("binary-gate accounting equals the brute-force counter on random graphs") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g = testsupport::random_graph(rng, {.max_nodes = 18, .max_channels = 6});
    Coloring c = identify_subgraphs(g);
    GateSet gates = testsupport::random_gates(c, rng(), -1, 1);
    MaskSet masks = extract_mask(gates, 0.5);
    CostReport rep = masked_measures(g, c, masks);
    auto oracle = brute_force_cost(g, c, binary_keep(masks));
    CHECK(rep.relaxed_params == oracle.params);
    CHECK(rep.relaxed_flops == oracle.flops);
    auto full = brute_force_cost(g, c, {});
    CHECK(rep.total_params == full.params);
    CHECK(rep.total_flops == full.flops);
  }
}

TEST_CASE("structure measures") {
  Graph g = build_reference_model("resnet8", {.width = 8, .classes = 4, .image_size = 16});
  Coloring c = identify_subgraphs(g);

  SUBCASE("saturated gates") {
    CostReport on = structure_measures(g, c, testsupport::random_gates(c, 1, 1e3, 1e3 + 1));
    CHECK(on.sigma_p == 1.0);
    CHECK(on.sigma_q == 1.0);
    CostReport off = structure_measures(g, c, testsupport::random_gates(c, 1, -1e3 - 1, -1e3));
    std::map<int, std::vector<double>> zero;
    for (int id : c.prunable_groups()) zero[id].assign(static_cast<size_t>(c.group(id).width), 0.0);
    auto residue = brute_force_cost(g, c, zero);
    auto full = brute_force_cost(g, c, {});
    CHECK(off.sigma_q == doctest::Approx(residue.flops / full.flops).epsilon(1e-12));
    CHECK(off.sigma_p == doctest::Approx(residue.params / full.params).epsilon(1e-12));
  }

  SUBCASE("one group half gated") {
    GateSet gates = testsupport::random_gates(c, 2, 1e3, 1e3 + 1);
    auto& s = gates.values.begin()->second;
    for (size_t i = 0; i < s.size(); ++i) s[i] = i % 2 ? -0.3 : 0.2;
    CostReport rep = structure_measures(g, c, gates);
    auto oracle = brute_force_cost(g, c, relaxed_keep(gates));
    CHECK(rep.relaxed_params == doctest::Approx(oracle.params).epsilon(1e-12));
    CHECK(rep.relaxed_flops == doctest::Approx(oracle.flops).epsilon(1e-12));
  }

  SUBCASE("random relaxed gates against the oracle") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      GateSet gates = testsupport::random_gates(c, seed, -1, 1);
      CostReport rep = structure_measures(g, c, gates);
      auto oracle = brute_force_cost(g, c, relaxed_keep(gates));
      CHECK(rep.relaxed_flops == doctest::Approx(oracle.flops).epsilon(1e-12));
      CHECK(rep.relaxed_params == doctest::Approx(oracle.params).epsilon(1e-12));
      CHECK(rep.sigma_q == doctest::Approx(rep.relaxed_flops / rep.total_flops).epsilon(1e-15));
    }
  }
}

TEST_CASE("lowering a gate lowers relaxed flops") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 40; ++trial) {
    Graph g = testsupport::random_graph(rng, {.max_nodes = 14});
    Coloring c = identify_subgraphs(g);
    GateSet gates = testsupport::random_gates(c, rng(), -0.5, 0.5);
    double base = structure_measures(g, c, gates).relaxed_flops;
    for (auto& [id, v] : gates.values) {
      double keep = v[0];
      v[0] -= 0.3;
      double lower = structure_measures(g, c, gates).relaxed_flops;
      // every prunable group starts at a conv or FC, so the drop is strict
      CHECK(lower < base);
      v[0] = keep;
    }
  }
}

TEST_CASE("structure gradient matches central differences") {
  std::mt19937_64 rng(29);
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    Graph g = testsupport::random_graph(rng, {.max_nodes = 12});
    Coloring c = identify_subgraphs(g);
    GateSet gates = testsupport::random_gates(c, rng(), -0.8, 0.8);
    auto grad = structure_gradient(structure_measures(g, c, gates), gates);
    for (auto& [id, v] : gates.values)
      for (size_t i = 0; i < v.size(); ++i) {
        double nq = testsupport::central_difference([&] { return structure_measures(g, c, gates).sigma_q; }, v[i], 1e-5);
        double np = testsupport::central_difference([&] { return structure_measures(g, c, gates).sigma_p; }, v[i], 1e-5);
        CHECK(testsupport::relative_error(grad.dsigma_q.at(id)[i], nq, 1e-12) < 1e-5);
        CHECK(testsupport::relative_error(grad.dsigma_p.at(id)[i], np, 1e-12) < 1e-5);
        ++checked;
      }
  }
  CHECK(checked > 50);
}

TEST_CASE("degenerate models and export") {
  GraphBuilder b;
  b.input("in", 3, {4, 4});
  b.output("out", "in");
  Graph empty = b.build();
  CHECK_THROWS_AS(measure_costs(empty, identify_subgraphs(empty), {}), Error);

  Graph g = build_reference_model("resnet8", {.width = 8, .classes = 4, .image_size = 16});
  Coloring c = identify_subgraphs(g);
  CostReport rep = structure_measures(g, c, init_gates(c));
  auto doc = nlohmann::json::parse(export_cost_report(rep));
  CHECK(doc.dump().find("sigma_q") != std::string::npos);
  double sum = 0;
  for (const auto& [id, cost] : rep.per_op) sum += cost.flops;
  CHECK(sum == doctest::Approx(rep.relaxed_flops).epsilon(1e-12));
}
