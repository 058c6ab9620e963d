#include "chprune/objective.hpp"

#include <algorithm>
#include <cmath>

namespace chprune {

double resolve_schedule(const Schedule& schedule, int64_t step) {
  if (schedule.points.empty()) throw Error(ErrorCode::EmptySchedule, "schedule has no points");
  const std::pair<int64_t, double>* best = nullptr;
  for (const auto& p : schedule.points)
    if (p.first <= step && (!best || p.first >= best->first)) best = &p;
  if (!best) throw Error(ErrorCode::ScheduleUnresolved, "no schedule point at or before step " + std::to_string(step));
  return best->second;
}

void validate_loss_config(const LossConfig& config) {
  if (!(config.target >= 0 && config.target < 1))
    throw Error(ErrorCode::InvalidConfig, "target must lie in [0, 1)");
  if (!(config.steepness > 0) || !(config.stiffening_sd > 0))
    throw Error(ErrorCode::InvalidConfig, "steepness and stiffening sd must be positive");
  auto check = [](const Schedule& s, const char* name, bool monotone) {
    if (s.points.empty()) throw Error(ErrorCode::EmptySchedule, std::string(name) + " schedule has no points");
    for (size_t i = 0; i < s.points.size(); ++i) {
      if (!(s.points[i].second >= 0)) throw Error(ErrorCode::InvalidConfig, std::string(name) + " must be >= 0");
      if (i == 0) continue;
      if (s.points[i].first <= s.points[i - 1].first)
        throw Error(ErrorCode::InvalidConfig, std::string(name) + " schedule steps must increase");
      if (monotone && s.points[i].second < s.points[i - 1].second)
        throw Error(ErrorCode::InvalidConfig, std::string(name) + " schedule must not decrease");
    }
  };
  check(config.mu, "mu", false);
  check(config.lambda, "lambda", true);
}

template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const int64_t batch = logits.shape.batch;
  const int64_t classes = logits.shape.channels;
  const int64_t plane = logits.plane();
  if (static_cast<int64_t>(labels.size()) != batch * plane)
    throw Error(ErrorCode::LengthMismatch, std::to_string(labels.size()) + " labels for logits " + logits.shape.str());
  CrossEntropyResult<T> r;
  r.grad = Tensor<T>(logits.shape);
  const double count = static_cast<double>(batch * plane);
  double total = 0;
  std::vector<double> z(static_cast<size_t>(classes));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < plane; ++i) {
      int label = labels[static_cast<size_t>(b * plane + i)];
      if (label < 0 || label >= classes)
        throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(label) + " with " + std::to_string(classes) + " classes");
      double peak = -INFINITY;
      for (int64_t c = 0; c < classes; ++c) {
        z[c] = logits.channel(b, c)[i];
        peak = std::max(peak, z[c]);
      }
      double denom = 0;
      for (int64_t c = 0; c < classes; ++c) denom += std::exp(z[c] - peak);
      double log_denom = std::log(denom) + peak;
      total += log_denom - z[label];
      for (int64_t c = 0; c < classes; ++c) {
        double p = std::exp(z[c] - log_denom);
        r.grad.channel(b, c)[i] = static_cast<T>((p - (c == label ? 1.0 : 0.0)) / count);
      }
    }
  r.loss = total / count;
  return r;
}

RegularizerResult regularizer(const Graph& graph, const Coloring& coloring, const GateSet& gates, double mu,
                              double lambda, StructureMode mode, double target, double reference_params,
                              double reference_flops) {
  RegularizerResult r;
  r.costs = structure_measures(graph, coloring, gates);
  // Re-normalise against the reference totals; gradients scale by the same ratio.
  double rescale_p = reference_params > 0 ? r.costs.total_params / reference_params : 1.0;
  double rescale_q = reference_flops > 0 ? r.costs.total_flops / reference_flops : 1.0;
  r.costs.sigma_p *= rescale_p;
  r.costs.sigma_q *= rescale_q;
  const double rescale = mode == StructureMode::Flops ? rescale_q : rescale_p;
  r.structure = mode == StructureMode::Flops ? r.costs.sigma_q : r.costs.sigma_p;
  double diff = r.structure - target;
  r.architecture_term = mu * std::abs(diff);
  const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);

  for (const auto& [g, s] : gates.values) r.gate_grad[g].assign(s.size(), 0.0);
  if (mu != 0 && sign != 0) {
    auto sg = structure_gradient(r.costs, gates);
    const auto& d = mode == StructureMode::Flops ? sg.dsigma_q : sg.dsigma_p;
    for (const auto& [g, v] : d)
      for (size_t i = 0; i < v.size(); ++i) r.gate_grad[g][i] += mu * sign * rescale * v[i];
  }
  if (gates.parameter_count() > 0) {
    r.stiffening_term = lambda * stiffening(gates);
    if (lambda != 0)
      for (const auto& [g, v] : stiffening_gradient(gates))
        for (size_t i = 0; i < v.size(); ++i) r.gate_grad[g][i] += lambda * v[i];
  }
  return r;
}

template <typename T>
ObjectiveResult<T> total_loss(const Tensor<T>& predictions, const std::vector<int>& labels, const Graph& graph,
                              const Coloring& coloring, const GateSet& gates, const LossConfig& config, int64_t step) {
  ObjectiveResult<T> out;
  auto& b = out.breakdown;
  b.mu = resolve_schedule(config.mu, step);
  b.lambda = resolve_schedule(config.lambda, step);
  auto ce = cross_entropy(predictions, labels);
  b.task_loss = ce.loss;
  out.logits_grad = std::move(ce.grad);
  auto reg = regularizer(graph, coloring, gates, b.mu, b.lambda, config.mode, config.target, config.reference_params,
                         config.reference_flops);
  b.architecture_term = reg.architecture_term;
  b.stiffening_term = reg.stiffening_term;
  b.structure = reg.structure;
  b.total = b.task_loss + b.architecture_term + b.stiffening_term;
  out.gate_grad = std::move(reg.gate_grad);
  out.costs = std::move(reg.costs);
  return out;
}

template CrossEntropyResult<float> cross_entropy<float>(const Tensor<float>&, const std::vector<int>&);
template CrossEntropyResult<double> cross_entropy<double>(const Tensor<double>&, const std::vector<int>&);
template ObjectiveResult<float> total_loss<float>(const Tensor<float>&, const std::vector<int>&, const Graph&,
                                                  const Coloring&, const GateSet&, const LossConfig&, int64_t);
template ObjectiveResult<double> total_loss<double>(const Tensor<double>&, const std::vector<int>&, const Graph&,
                                                    const Coloring&, const GateSet&, const LossConfig&, int64_t);

}  // namespace chprune
