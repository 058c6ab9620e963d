#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chprune/error.hpp>
#include <chprune/graph.hpp>
#include <chprune/graph_io.hpp>
#include <chprune/models.hpp>

#include <algorithm>
#include <random>

#include "support.hpp"

using namespace chprune;

namespace {

bool has_code(const std::vector<Diagnostic>& diags, DiagnosticCode code) {
  return std::any_of(diags.begin(), diags.end(), [&](const Diagnostic& d) { return d.code == code; });
}

// floor((d + 2p - m) / s) + 1, written out by hand for the conv oracle.
int64_t conv_extent(int64_t d, int64_t m, int64_t s, int64_t p) { return (d + 2 * p - m) / s + 1; }

}  // namespace

TEST_CASE("concatenation sums channel counts") {
  GraphBuilder b;
  b.input("in", 4, {8, 8});
  b.conv("a", "in", 4, 4, {1, 1});
  b.conv("c", "in", 4, 6, {1, 1});
  b.concat("cat", {"a", "c"});
  b.output("out", "cat");
  auto shapes = infer_shapes(b.build(), TensorShape{2, 4, {8, 8}});
  CHECK(shapes.at("cat") == TensorShape{2, 10, {8, 8}});
}

TEST_CASE("relu preserves shape") {
  GraphBuilder b;
  b.input("in", 16, {32, 32});
  b.relu("r", "in");
  b.output("out", "r");
  auto shapes = infer_shapes(b.build(), TensorShape{1, 16, {32, 32}});
  CHECK(shapes.at("r") == TensorShape{1, 16, {32, 32}});
}

TEST_CASE("convolution output arithmetic") {
  GraphBuilder b;
  b.input("in", 3, {32, 32});
  b.conv("c", "in", 3, 16, {3, 3}, 1, 1);
  b.output("out", "c");
  auto shapes = infer_shapes(b.build(), TensorShape{2, 3, {32, 32}});
  CHECK(shapes.at("c") == TensorShape{2, 16, {32, 32}});
}

TEST_CASE("convolution shapes match the hand oracle over random attributes") {
  std::mt19937_64 rng(7);
  auto pick = [&](int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); };
  for (int trial = 0; trial < 200; ++trial) {
    int64_t ci = pick(1, 5), co = pick(1, 5), m0 = pick(1, 4), m1 = pick(1, 4), s = pick(1, 3), p = pick(0, 2);
    int64_t d0 = pick(m0, 20), d1 = pick(m1, 20), batch = pick(1, 3);
    GraphBuilder b;
    b.input("in", ci, {d0, d1});
    b.conv("c", "in", ci, co, {m0, m1}, s, p);
    b.output("out", "c");
    auto shapes = infer_shapes(b.build(), TensorShape{batch, ci, {d0, d1}});
    CHECK(shapes.at("c") == TensorShape{batch, co, {conv_extent(d0, m0, s, p), conv_extent(d1, m1, s, p)}});
  }
}

TEST_CASE("channel-preserving and resampling rules") {
  GraphBuilder b;
  b.input("in", 5, {12, 12});
  b.batch_norm("bn", "in");
  b.max_pool("pool", "bn", 3);
  b.upsample("up", "pool", 2);
  b.sum("sum", {"up", "up"});
  b.product("prod", {"sum", "up"});
  b.max_pool("gp", "prod", 8);
  b.fc("fc", "gp", 5, 7);
  b.output("out", "fc");
  auto shapes = infer_shapes(b.build(), TensorShape{3, 5, {12, 12}});
  CHECK(shapes.at("bn") == TensorShape{3, 5, {12, 12}});
  CHECK(shapes.at("pool") == TensorShape{3, 5, {4, 4}});
  CHECK(shapes.at("up") == TensorShape{3, 5, {8, 8}});
  CHECK(shapes.at("prod") == TensorShape{3, 5, {8, 8}});
  CHECK(shapes.at("gp") == TensorShape{3, 5, {1, 1}});
  CHECK(shapes.at("fc") == TensorShape{3, 7, {}});
}

TEST_CASE("shape errors") {
  SUBCASE("sum of unequal shapes") {
    GraphBuilder b;
    b.input("in", 8, {4, 4});
    b.conv("c", "in", 8, 9, {1, 1});
    b.sum("s", {"in", "c"});
    b.output("out", "s");
    Graph g = b.build();
    auto err = [&] {
      try {
        infer_shapes(g, 1);
      } catch (const Error& e) {
        return e.code();
      }
      return ErrorCode::ParseError;
    }();
    CHECK(err == ErrorCode::ShapeMismatch);
    CHECK(has_code(validate(g), DiagnosticCode::ShapeMismatch));
  }
  SUBCASE("kernel larger than the padded input") {
    GraphBuilder b;
    b.input("in", 1, {2, 2});
    b.conv("c", "in", 1, 1, {5, 5});
    b.output("out", "c");
    CHECK_THROWS_AS(infer_shapes(b.build(), 1), Error);
  }
  SUBCASE("missing attribute") {
    GraphBuilder b;
    b.input("in", 1, {2, 2});
    b.add({"c", OpKind::Convolution, std::monostate{}, {"in"}});
    b.output("out", "c");
    Graph g = b.build();
    CHECK(!validate(g).empty());
  }
}

TEST_CASE("validate") {
  SUBCASE("input to output chain is clean") {
    GraphBuilder b;
    b.input("in", 1, {1});
    b.output("out", "in");
    CHECK(validate(b.build()).empty());
  }
  SUBCASE("two-cycle") {
    GraphBuilder b;
    b.input("in", 2, {4, 4});
    b.add({"a", OpKind::Sum, std::monostate{}, {"in", "b"}});
    b.add({"b", OpKind::ReLU, std::monostate{}, {"a"}});
    b.output("out", "b");
    Graph g = b.build();
    CHECK(has_code(validate(g), DiagnosticCode::CycleDetected));
    CHECK_THROWS_AS(g.topo_order(), Error);
  }
  SUBCASE("dangling and unreachable nodes are named") {
    GraphBuilder b;
    b.input("in", 2, {4, 4});
    b.relu("r", "ghost");
    b.relu("side", "in");
    b.output("out", "in");
    auto diags = validate(b.build());
    CHECK(has_code(diags, DiagnosticCode::DanglingInput));
    bool named = std::any_of(diags.begin(), diags.end(), [](const Diagnostic& d) {
      return d.code == DiagnosticCode::Unreachable && d.subject == "side";
    });
    CHECK(named);
  }
  SUBCASE("duplicate ids and missing exit") {
    GraphBuilder b;
    b.input("in", 2, {4, 4});
    b.relu("r", "in");
    b.relu("r", "in");
    auto diags = validate(b.build());
    CHECK(has_code(diags, DiagnosticCode::DuplicateId));
    CHECK(has_code(diags, DiagnosticCode::MissingExit));
  }
}

TEST_CASE("serialization round-trips") {
  SUBCASE("attribute-free relu") {
    GraphBuilder b;
    b.input("in", 3, {4, 4});
    b.relu("r", "in");
    b.output("out", "r");
    Graph g = b.build();
    std::string text = serialize_graph(g);
    CHECK(deserialize_graph(text) == g);
    CHECK(serialize_graph(deserialize_graph(text)) == text);
  }
  SUBCASE("reference models") {
    for (const char* name : {"resnet8", "resnet18", "unet-small"}) {
      ModelConfig cfg;
      cfg.width = 8;
      cfg.image_size = 16;
      Graph g = build_reference_model(name, cfg);
      std::string text = serialize_graph(g);
      CHECK(deserialize_graph(text) == g);
      CHECK(serialize_graph(deserialize_graph(text)) == text);
    }
  }
  SUBCASE("random graphs") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 50; ++i) {
      Graph g = testsupport::random_graph(rng, {.max_nodes = 14});
      CHECK(deserialize_graph(serialize_graph(g)) == g);
    }
  }
  SUBCASE("unknown kinds are kept as opaque nodes") {
    std::string text =
        "chprune-graph 1\n"
        "node id=in kind=Input channels=2 spatial=4x4 inputs=-\n"
        "node id=foo kind=FooOp attr.alpha=0.5 attr.note=a%20b inputs=in\n"
        "node id=out kind=Output inputs=foo\n";
    Graph g = deserialize_graph(text);
    const auto& foo = g.node("foo");
    CHECK(foo.kind == OpKind::Unknown);
    const auto& attrs = std::get<UnknownAttrs>(foo.attrs);
    CHECK(attrs.kind_name == "FooOp");
    CHECK(attrs.values.at("alpha") == "0.5");
    CHECK(attrs.values.at("note") == "a b");
    CHECK(deserialize_graph(serialize_graph(g)) == g);
  }
  SUBCASE("parse errors name the line") {
    try {
      deserialize_graph("chprune-graph 1\nnode id=in kind=Input channels=x spatial=4 inputs=-\n");
      FAIL("expected ParseError");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ParseError);
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
}

TEST_CASE("reference models") {
  CHECK(build_reference_model("resnet8", {.width = 16}).count(OpKind::Sum) == 3);
  CHECK(build_reference_model("unet-small", {.depth = 3}).count(OpKind::Concatenation) == 3);
  CHECK(build_reference_model("resnet18").count(OpKind::Sum) == 8);
  CHECK(build_reference_model("unet-small").count(OpKind::Upsample) >= 1);
  for (const char* name : {"resnet8", "resnet18", "unet-small"}) CHECK(validate(build_reference_model(name)).empty());
  CHECK_THROWS_AS(build_reference_model("vgg"), Error);
}

TEST_CASE("shape inference is deterministic on random graphs") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    Graph g = testsupport::random_graph(rng, {.max_nodes = 16});
    CHECK(validate(g).empty());
    CHECK(infer_shapes(g, 2) == infer_shapes(g, 2));
  }
}
