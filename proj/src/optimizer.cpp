#include "chprune/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace chprune {

namespace {

template <typename T>
std::array<std::vector<T>*, 4> fields(NodeParams<T>& p) {
  return {&p.weight, &p.bias, &p.gamma, &p.beta};
}

template <typename T>
std::array<const std::vector<T>*, 4> fields(const NodeParams<T>& p) {
  return {&p.weight, &p.bias, &p.gamma, &p.beta};
}

struct Rule {
  const OptimizerConfig& config;
  uint64_t step;

  // Updates one value in place given its gradient and moment slots.
  double apply(double value, double grad, double lr, double& m, double& v) const {
    if (config.method == OptimizerMethod::Sgd) {
      m = config.momentum * m + grad;
      return value - lr * m;
    }
    m = config.beta1 * m + (1 - config.beta1) * grad;
    v = config.beta2 * v + (1 - config.beta2) * grad * grad;
    double mhat = m / (1 - std::pow(config.beta1, static_cast<double>(step)));
    double vhat = v / (1 - std::pow(config.beta2, static_cast<double>(step)));
    return value - lr * mhat / (std::sqrt(vhat) + config.eps);
  }
};

}  // namespace

template <typename T>
void optimizer_step(Weights<T>& weights, GateSet& gates, const Gradients<T>& grads, const OptimizerConfig& config,
                    OptimizerState& state, double lr_scale) {
  for (const auto& [id, g] : grads.weights)
    for (const auto* f : fields(g))
      for (T x : *f)
        if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteGradient, "non-finite gradient at node '" + id + "'");
  for (const auto& [group, g] : grads.gates)
    for (double x : g)
      if (!std::isfinite(x))
        throw Error(ErrorCode::NonFiniteGradient, "non-finite gradient for group " + std::to_string(group));

  ++state.step;
  Rule rule{config, state.step};
  const double lr = config.lr * lr_scale;
  const double gate_lr = config.gate_lr.value_or(config.lr) * lr_scale;

  for (const auto& [id, g] : grads.weights) {
    auto it = weights.nodes.find(id);
    if (it == weights.nodes.end()) throw Error(ErrorCode::MissingWeights, "gradient for unknown node '" + id + "'");
    auto params = fields(it->second);
    auto gfields = fields(g);
    auto& m = state.first[id];
    auto& v = state.second[id];
    for (size_t f = 0; f < 4; ++f) {
      auto& p = *params[f];
      const auto& gf = *gfields[f];
      if (gf.size() != p.size())
        throw Error(ErrorCode::LengthMismatch, "gradient shape differs from parameter at '" + id + "'");
      m[f].resize(p.size(), 0.0);
      v[f].resize(p.size(), 0.0);
      for (size_t i = 0; i < p.size(); ++i) {
        double grad = static_cast<double>(gf[i]) + config.weight_decay * static_cast<double>(p[i]);
        p[i] = static_cast<T>(rule.apply(p[i], grad, lr, m[f][i], v[f][i]));
      }
    }
  }
  for (const auto& [group, g] : grads.gates) {
    auto it = gates.values.find(group);
    if (it == gates.values.end() || it->second.size() != g.size())
      throw Error(ErrorCode::LengthMismatch, "gate gradient does not match group " + std::to_string(group));
    auto& m = state.gate_first[group];
    auto& v = state.gate_second[group];
    m.resize(g.size(), 0.0);
    v.resize(g.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) it->second[i] = rule.apply(it->second[i], g[i], gate_lr, m[i], v[i]);
  }
  ++weights.version;
}

double cosine_scale(int64_t iteration, int64_t total) {
  if (total <= 0) return 1.0;
  double x = std::min<double>(1.0, static_cast<double>(iteration) / static_cast<double>(total));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

template void optimizer_step<float>(Weights<float>&, GateSet&, const Gradients<float>&, const OptimizerConfig&,
                                    OptimizerState&, double);
template void optimizer_step<double>(Weights<double>&, GateSet&, const Gradients<double>&, const OptimizerConfig&,
                                     OptimizerState&, double);

}  // namespace chprune
