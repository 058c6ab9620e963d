#pragma once

// Shared fixtures for the test binaries: a random graph generator and oracles
// that do not route through the library code they check.

#include <chprune/accounting.hpp>
#include <chprune/engine.hpp>
#include <chprune/graph.hpp>
#include <chprune/objective.hpp>
#include <chprune/subgraph.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace testsupport {

using namespace chprune;

struct RandomGraphOptions {
  size_t max_nodes = 8;
  int64_t max_channels = 4;
  int64_t max_extent = 6;
  bool allow_fc = true;
};

// Builds a valid graph out of small blocks (conv units, residual sums and
// products, concatenations, resampling, a pooled FC head) until the node budget
// is used. Every block consumes the current tensor, so all nodes reach Output.
inline Graph random_graph(std::mt19937_64& rng, const RandomGraphOptions& opt = {}) {
  auto pick = [&](int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); };
  GraphBuilder b;
  int64_t c = pick(1, 3);
  int64_t h = pick(2, opt.max_extent), w = pick(2, opt.max_extent);
  NodeId x = b.input("in", c, {h, w});
  size_t used = 2;  // input and output
  bool flat = false;
  bool segmented = false;  // x carries concatenated segments; residual merges would be ill-formed
  int n = 0;
  auto fresh = [&](const char* p) { return std::string(p) + std::to_string(n++); };

  while (used < opt.max_nodes) {
    size_t room = opt.max_nodes - used;
    int block = static_cast<int>(pick(0, 6));
    if (flat) {
      if (block <= 2) {
        int64_t co = pick(1, opt.max_channels);
        x = b.fc(fresh("fc"), x, c, co);
        c = co;
        used += 1;
      } else if (block <= 4) {
        x = pick(0, 1) ? b.relu(fresh("relu"), x) : b.batch_norm(fresh("bn"), x);
        used += 1;
      } else if (room >= 2) {
        NodeId y = b.fc(fresh("fc"), x, c, c);
        x = pick(0, 1) ? b.sum(fresh("sum"), {x, y}) : b.product(fresh("prod"), {x, y});
        used += 2;
      }
      continue;
    }
    switch (block) {
      case 0: {
        int64_t k = pick(0, 1) ? 3 : 1;
        int64_t pad = pick(0, 1) ? k / 2 : 0;
        int64_t stride = (h >= 3 && w >= 3 && pick(0, 2) == 0) ? 2 : 1;
        if (h + 2 * pad < k || w + 2 * pad < k) break;
        int64_t co = pick(1, opt.max_channels);
        x = b.conv(fresh("conv"), x, c, co, {k, k}, stride, pad, pick(0, 1) == 1);
        c = co;
        segmented = false;
        h = (h + 2 * pad - k) / stride + 1;
        w = (w + 2 * pad - k) / stride + 1;
        used += 1;
        break;
      }
      case 1: {
        if (room < 2 || segmented) break;
        NodeId y = b.conv(fresh("conv"), x, c, c, {3, 3}, 1, 1, pick(0, 1) == 1);
        used += 1;
        if (room >= 3 && pick(0, 1)) {
          y = b.batch_norm(fresh("bn"), y);
          used += 1;
        }
        x = pick(0, 2) ? b.sum(fresh("sum"), {x, y}) : b.product(fresh("prod"), {x, y});
        used += 1;
        break;
      }
      case 2: {
        if (room < 2) break;
        int64_t co = pick(1, opt.max_channels);
        NodeId y = b.conv(fresh("conv"), x, c, co, {1, 1});
        x = pick(0, 1) ? b.concat(fresh("cat"), {x, y}) : b.concat(fresh("cat"), {y, x});
        c += co;
        segmented = true;
        used += 2;
        break;
      }
      case 3:
        if (h % 2 == 0 && w % 2 == 0) {
          x = b.max_pool(fresh("pool"), x, 2);
          h /= 2;
          w /= 2;
          used += 1;
        } else if (h * w <= 16) {
          x = b.upsample(fresh("up"), x, 2);
          h *= 2;
          w *= 2;
          used += 1;
        }
        break;
      case 4:
        x = b.relu(fresh("relu"), x);
        used += 1;
        break;
      case 5:
        x = b.batch_norm(fresh("bn"), x);
        used += 1;
        break;
      case 6:
        if (!opt.allow_fc || room < 2 || h != w) break;
        if (h > 1) {
          x = b.max_pool(fresh("pool"), x, h);
          used += 1;
        }
        {
          int64_t co = pick(1, opt.max_channels);
          x = b.fc(fresh("fc"), x, c, co);
          c = co;
          used += 1;
        }
        flat = true;
        segmented = false;
        break;
    }
  }
  b.output("out", x);
  return b.build();
}

// Per-sample cost counted one weight and one multiply-accumulate at a time,
// weighting every channel by `keep` (1/0 at binary gates, sigma(s) when
// relaxed). Channel keep vectors are propagated along the graph here rather
// than taken from the library's segment bookkeeping; only the group of each
// producer is looked up.
struct BruteCost {
  double params = 0;
  double flops = 0;
};

inline BruteCost brute_force_cost(const Graph& graph, const Coloring& coloring,
                                  const std::map<int, std::vector<double>>& group_keep) {
  ShapeMap shapes = infer_shapes(graph, 1);
  std::map<NodeId, std::vector<double>> keep;
  // extended precision so that one-at-a-time accumulation does not drift
  struct {
    long double params = 0, flops = 0;
  } total;
  auto plane = [](const TensorShape& s) {
    int64_t p = 1;
    for (auto d : s.spatial) p *= d;
    return p;
  };
  for (size_t idx : graph.topo_order()) {
    const auto& n = graph.nodes()[idx];
    const TensorShape& out = shapes.at(n.id);
    std::vector<double> in_keep = n.inputs.empty() ? std::vector<double>{} : keep.at(n.inputs[0]);
    const TensorShape* in = n.inputs.empty() ? nullptr : &shapes.at(n.inputs[0]);
    std::vector<double> k;
    switch (n.kind) {
      case OpKind::Input:
        k.assign(static_cast<size_t>(out.channels), 1.0);
        break;
      case OpKind::Convolution:
      case OpKind::FullyConnected: {
        int group = coloring.segments(n.id).at(0).group;
        auto it = group_keep.find(group);
        k = it != group_keep.end() ? it->second : std::vector<double>(static_cast<size_t>(out.channels), 1.0);
        int64_t taps = 1;
        if (n.kind == OpKind::Convolution)
          for (auto m : n.conv().kernel) taps *= m;
        int64_t positions = plane(out);
        for (size_t co = 0; co < k.size(); ++co) {
          for (size_t ci = 0; ci < in_keep.size(); ++ci)
            for (int64_t t = 0; t < taps; ++t) {
              total.params += k[co] * in_keep[ci];
              for (int64_t p = 0; p < positions; ++p) total.flops += k[co] * in_keep[ci];
            }
          // bias term: one add per output element; FC also owns a bias weight
          for (int64_t p = 0; p < positions; ++p) total.flops += k[co];
          if (n.kind == OpKind::FullyConnected) total.params += k[co];
        }
        break;
      }
      case OpKind::BatchNorm:
        k = in_keep;
        for (double v : k) {
          total.params += 2 * v;
          for (int64_t p = 0; p < plane(*in); ++p) total.flops += v;
        }
        break;
      case OpKind::ReLU:
      case OpKind::MaxPool:
      case OpKind::Upsample:
      case OpKind::Sum:
      case OpKind::ElementwiseProduct:
        k = in_keep;
        for (double v : k)
          for (int64_t p = 0; p < plane(*in); ++p) total.flops += v;
        break;
      case OpKind::Concatenation:
        for (const auto& src : n.inputs) {
          const auto& part = keep.at(src);
          k.insert(k.end(), part.begin(), part.end());
        }
        break;
      case OpKind::Output:
        k = in_keep;
        break;
      case OpKind::Unknown:
        k.assign(static_cast<size_t>(out.channels), 1.0);
        break;
    }
    keep[n.id] = std::move(k);
  }
  return {static_cast<double>(total.params), static_cast<double>(total.flops)};
}

// Central difference of f around x (x is restored afterwards).
inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double x0 = x;
  x = x0 + h;
  double up = f();
  x = x0 - h;
  double down = f();
  x = x0;
  return (up - down) / (2 * h);
}

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Random trainable values everywhere, including biases and BatchNorm affine terms.
template <typename T>
Weights<T> random_weights(const Graph& graph, uint64_t seed) {
  Weights<T> w = init_weights<T>(graph, seed);
  std::mt19937_64 rng(seed ^ 0x5bd1e995u);
  std::normal_distribution<double> normal(0.0, 0.3);
  std::uniform_real_distribution<double> scale(0.5, 1.5);
  for (auto& [id, p] : w.nodes) {
    for (auto& v : p.bias) v = static_cast<T>(normal(rng));
    for (auto& v : p.gamma) v = static_cast<T>(scale(rng));
    for (auto& v : p.beta) v = static_cast<T>(normal(rng));
    for (auto& v : p.running_mean) v = static_cast<T>(normal(rng));
    for (auto& v : p.running_var) v = static_cast<T>(scale(rng));
  }
  return w;
}

template <typename T>
Tensor<T> random_tensor(const TensorShape& shape, uint64_t seed, double sd = 1.0) {
  Tensor<T> t(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sd);
  for (auto& v : t.data) v = static_cast<T>(normal(rng));
  return t;
}

inline GateSet random_gates(const Coloring& coloring, uint64_t seed, double lo, double hi, double steepness = 4.0) {
  GateSet g = init_gates(coloring, steepness);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& [id, v] : g.values)
    for (auto& s : v) s = u(rng);
  return g;
}

// Finite-difference check of the full objective (task loss plus architecture
// and stiffening terms) with respect to every trainable weight and every
// relaxation parameter, in double precision with batch statistics frozen out
// of the running buffers. Coordinates whose +-h perturbation flips a ReLU
// sign, a max-pool winner or the sign of sigma - t sit on a kink where the
// derivative does not exist; they are counted and skipped.
struct GradCheck {
  double max_rel = 0;
  size_t checked = 0;
  size_t kinks = 0;
  std::string worst;
};

inline std::vector<uint8_t> kink_signature(const Graph& g, const Tape<double>& tape, double structure, double target) {
  std::vector<uint8_t> sig;
  for (size_t i = 0; i < g.size(); ++i) {
    const auto& n = g.nodes()[i];
    if (n.kind == OpKind::ReLU)
      for (double v : tape.outputs[g.index_of(n.inputs[0])].data) sig.push_back(v > 0);
    if (n.kind == OpKind::MaxPool)
      for (int64_t a : tape.pool_argmax[i]) {
        sig.push_back(static_cast<uint8_t>(a & 0xff));
        sig.push_back(static_cast<uint8_t>((a >> 8) & 0xff));
      }
  }
  sig.push_back(structure > target);
  return sig;
}

inline GradCheck objective_gradcheck(const Graph& graph, uint64_t seed, double h = 1e-4, double floor = 1e-6) {
  std::mt19937_64 rng(seed);
  Coloring coloring = identify_subgraphs(graph);
  GateSet gates = random_gates(coloring, rng(), -0.6, 0.6);
  Weights<double> weights = random_weights<double>(graph, rng());
  const int64_t batch = 3;
  TensorShape in_shape = infer_shapes(graph, batch).at(graph.entry_id());
  TensorShape out_shape = infer_shapes(graph, batch).at(graph.exit_id());
  Tensor<double> input = random_tensor<double>(in_shape, rng());
  std::vector<int> labels(static_cast<size_t>(batch * out_shape.spatial_size()));
  for (auto& l : labels) l = static_cast<int>(std::uniform_int_distribution<int64_t>(0, out_shape.channels - 1)(rng));

  LossConfig cfg;
  cfg.mode = rng() % 2 ? StructureMode::Flops : StructureMode::Sparsity;
  cfg.mu = Schedule{{{0, 0.7}}};
  cfg.lambda = Schedule{{{0, 0.3}}};
  cfg.steepness = gates.steepness;
  cfg.stiffening_sd = gates.stiffening_sd;
  {
    auto costs = structure_measures(graph, coloring, gates);
    double s0 = cfg.mode == StructureMode::Flops ? costs.sigma_q : costs.sigma_p;
    cfg.target = s0 > 0.5 ? s0 - 0.25 : s0 + 0.25;
  }

  ForwardOptions fo;
  fo.training = true;
  fo.update_running_stats = false;
  auto evaluate_at = [&](std::vector<uint8_t>* sig) {
    auto tape = forward(graph, coloring, gates, weights, input, fo);
    auto obj = total_loss(tape.output(), labels, graph, coloring, gates, cfg, 0);
    if (sig) *sig = kink_signature(graph, tape, obj.breakdown.structure, cfg.target);
    return obj.breakdown.total;
  };

  auto tape = forward(graph, coloring, gates, weights, input, fo);
  auto obj = total_loss(tape.output(), labels, graph, coloring, gates, cfg, 0);
  auto grads = backward(tape, weights, obj.logits_grad);
  for (auto& [g, v] : obj.gate_grad) {
    auto& acc = grads.gates[g];
    acc.resize(v.size(), 0.0);
    for (size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
  }
  std::vector<uint8_t> base;
  evaluate_at(&base);

  GradCheck result;
  auto probe = [&](double& x, double analytic, const std::string& label) {
    const double x0 = x;
    std::vector<uint8_t> sig_up, sig_down;
    x = x0 + h;
    double up = evaluate_at(&sig_up);
    x = x0 - h;
    double down = evaluate_at(&sig_down);
    x = x0;
    if (sig_up != base || sig_down != base) {
      ++result.kinks;
      return;
    }
    double rel = relative_error(analytic, (up - down) / (2 * h), floor);
    ++result.checked;
    if (rel > result.max_rel) {
      result.max_rel = rel;
      result.worst = label;
    }
  };
  for (auto& [id, p] : weights.nodes) {
    auto it = grads.weights.find(id);
    auto field = [&](std::vector<double>& values, const std::vector<double>* g, const char* name) {
      for (size_t i = 0; i < values.size(); ++i)
        probe(values[i], g && !g->empty() ? (*g)[i] : 0.0, id + "." + name + "[" + std::to_string(i) + "]");
    };
    const NodeParams<double>* gp = it != grads.weights.end() ? &it->second : nullptr;
    field(p.weight, gp ? &gp->weight : nullptr, "weight");
    field(p.bias, gp ? &gp->bias : nullptr, "bias");
    field(p.gamma, gp ? &gp->gamma : nullptr, "gamma");
    field(p.beta, gp ? &gp->beta : nullptr, "beta");
  }
  for (auto& [g, v] : gates.values)
    for (size_t i = 0; i < v.size(); ++i)
      probe(v[i], grads.gates.count(g) ? grads.gates.at(g)[i] : 0.0, "s" + std::to_string(g) + "[" + std::to_string(i) + "]");
  return result;
}

}  // namespace testsupport
