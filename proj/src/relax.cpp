#include "chprune/relax.hpp"

#include <nlohmann/json.hpp>

namespace chprune {

size_t GateSet::parameter_count() const {
  size_t n = 0;
  for (const auto& [g, v] : values) n += v.size();
  return n;
}

int64_t MaskSet::kept(int group) const {
  int64_t n = 0;
  for (auto m : masks.at(group)) n += m;
  return n;
}

std::vector<double> sigma(std::span<const double> s, double a) {
  std::vector<double> out(s.size());
  for (size_t i = 0; i < s.size(); ++i) out[i] = sigma(s[i], a);
  return out;
}

MaskSet extract_mask(const GateSet& gates, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error(ErrorCode::InvalidConfig, "threshold must lie in (0,1)");
  MaskSet out;
  out.threshold = tau;
  for (const auto& [g, s] : gates.values) {
    auto& m = out.masks[g];
    m.resize(s.size());
    for (size_t i = 0; i < s.size(); ++i) m[i] = sigma(s[i], gates.steepness) > tau ? 1 : 0;
  }
  return out;
}

double stiffening(const GateSet& gates) {
  size_t n = gates.parameter_count();
  if (n == 0) throw Error(ErrorCode::ZeroTotal, "stiffening needs at least one relaxation parameter");
  double inv = 1.0 / (2.0 * gates.stiffening_sd * gates.stiffening_sd);
  double acc = 0.0;
  for (const auto& [g, s] : gates.values)
    for (double v : s) acc += std::exp(-v * v * inv);
  return acc / static_cast<double>(n);
}

std::map<int, std::vector<double>> stiffening_gradient(const GateSet& gates) {
  std::map<int, std::vector<double>> out;
  size_t n = gates.parameter_count();
  if (n == 0) return out;
  double sd2 = gates.stiffening_sd * gates.stiffening_sd;
  for (const auto& [g, s] : gates.values) {
    auto& d = out[g];
    d.resize(s.size());
    for (size_t i = 0; i < s.size(); ++i)
      d[i] = -s[i] / sd2 * std::exp(-s[i] * s[i] / (2.0 * sd2)) / static_cast<double>(n);
  }
  return out;
}

GateSet init_gates(const Coloring& coloring, double steepness, double stiffening_sd, std::optional<double> initial) {
  if (!(steepness > 0) || !(stiffening_sd > 0))
    throw Error(ErrorCode::InvalidConfig, "steepness and stiffening sd must be positive");
  GateSet gates;
  gates.steepness = steepness;
  gates.stiffening_sd = stiffening_sd;
  double s0 = initial.value_or(1.0 / steepness);
  for (const auto& g : coloring.groups)
    if (g.prunable) gates.values[g.id].assign(static_cast<size_t>(g.width), s0);
  return gates;
}

std::string export_heatmap(const Graph& graph, const Coloring& coloring, const GateSet& gates) {
  ShapeMap shapes = infer_shapes(graph, 1);
  nlohmann::ordered_json doc;
  doc["steepness"] = gates.steepness;
  doc["groups"] = nlohmann::ordered_json::array();
  for (const auto& [id, s] : gates.values) {
    const auto& g = coloring.group(id);
    int64_t resolution = 0;
    for (const auto& p : g.producers) resolution = std::max(resolution, shapes.at(p).spatial_size());
    nlohmann::ordered_json jg;
    jg["group"] = id;
    jg["width"] = g.width;
    jg["resolution"] = resolution;
    jg["producers"] = g.producers;
    jg["sigma"] = sigma(s, gates.steepness);
    doc["groups"].push_back(std::move(jg));
  }
  return doc.dump(2) + "\n";
}

}  // namespace chprune
