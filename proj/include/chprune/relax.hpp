#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chprune/subgraph.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

/// Relaxation parameters of every prunable group.
struct GateSet {
  std::map<int, std::vector<double>> values;
  double steepness = 4.0;       // logistic growth rate
  double stiffening_sd = 1.0;   // Gaussian standard deviation of the stiffening term

  size_t parameter_count() const;
  bool operator==(const GateSet&) const = default;
};

struct MaskSet {
  std::map<int, std::vector<uint8_t>> masks;
  double threshold = 0.5;

  int64_t kept(int group) const;
};

inline double sigma(double s, double a) {
  // Evaluated on the side that cannot overflow.
  double z = a * s;
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

/// d sigma / d s = a * sigma * (1 - sigma)
inline double sigma_derivative(double s, double a) {
  double v = sigma(s, a);
  return a * v * (1.0 - v);
}

std::vector<double> sigma(std::span<const double> s, double a);

/// output[b, c, ...] = activation[b, c, ...] * gate[c]. Throws LengthMismatch.
template <typename T>
Tensor<T> gate_apply(const Tensor<T>& activation, std::span<const T> gate) {
  if (static_cast<int64_t>(gate.size()) != activation.shape.channels)
    throw Error(ErrorCode::LengthMismatch, "gate length " + std::to_string(gate.size()) + " vs " +
                                               std::to_string(activation.shape.channels) + " channels");
  Tensor<T> out = activation;
  int64_t plane = activation.plane();
  for (int64_t b = 0; b < activation.shape.batch; ++b)
    for (int64_t c = 0; c < activation.shape.channels; ++c) {
      T* p = out.channel(b, c);
      for (int64_t i = 0; i < plane; ++i) p[i] *= gate[static_cast<size_t>(c)];
    }
  return out;
}

/// m = 1 iff sigma(s) > tau (strict).
MaskSet extract_mask(const GateSet& gates, double tau);

/// Mean over all relaxation parameters of exp(-s^2 / (2 sd^2)). Throws
/// ZeroTotal when there are no parameters.
double stiffening(const GateSet& gates);
std::map<int, std::vector<double>> stiffening_gradient(const GateSet& gates);

/// One entry per prunable group, every parameter set to `initial`
/// (default 1 / steepness).
GateSet init_gates(const Coloring& coloring, double steepness = 4.0, double stiffening_sd = 1.0,
                   std::optional<double> initial = std::nullopt);

/// Per-group sigma(s) vectors as JSON, ordered by group id, with the spatial
/// resolution of each group's producers so the data can be laid out as a
/// heatmap from input to output.
std::string export_heatmap(const Graph& graph, const Coloring& coloring, const GateSet& gates);

}  // namespace chprune
