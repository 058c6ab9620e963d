#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "chprune/accounting.hpp"
#include "chprune/relax.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

/// Piecewise-constant schedule of (step index, value) points.
struct Schedule {
  std::vector<std::pair<int64_t, double>> points;
  bool operator==(const Schedule&) const = default;
};

/// Value of the greatest step index <= step. Throws EmptySchedule, or
/// ScheduleUnresolved when step precedes the first point.
double resolve_schedule(const Schedule& schedule, int64_t step);

enum class StructureMode { Sparsity, Flops };
enum class TaskLoss { CrossEntropy, PixelwiseCrossEntropy };

struct LossConfig {
  StructureMode mode = StructureMode::Flops;
  /// Target structure fraction: "90% fewer FLOPs" is target 0.1.
  double target = 0.1;
  Schedule mu{{{0, 1.0}}};
  Schedule lambda{{{0, 1.0}}};
  double steepness = 4.0;
  double stiffening_sd = 1.0;
  TaskLoss task = TaskLoss::CrossEntropy;
  /// Totals that sigma is normalised by; zero means the current graph's.
  /// Pruned models keep the unpruned totals so sigma stays comparable.
  double reference_params = 0;
  double reference_flops = 0;
};

/// Throws InvalidConfig on negative weights, a target outside [0, 1),
/// unordered schedule steps or a decreasing lambda schedule.
void validate_loss_config(const LossConfig& config);

struct ObjectiveBreakdown {
  double task_loss = 0;
  double architecture_term = 0;
  double stiffening_term = 0;
  double total = 0;
  double structure = 1;  // sigma_p or sigma_q, by mode
  double mu = 0;
  double lambda = 0;
};

template <typename T>
struct CrossEntropyResult {
  double loss = 0;
  Tensor<T> grad;  // d loss / d logits
};

/// Mean negative log-softmax of the true class over the batch, and over pixels
/// when `labels` has one entry per pixel. Throws LabelOutOfRange, LengthMismatch.
template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);

template <typename T>
struct ObjectiveResult {
  ObjectiveBreakdown breakdown;
  Tensor<T> logits_grad;
  /// Gradient of the architecture and stiffening terms with respect to s.
  std::map<int, std::vector<double>> gate_grad;
  CostReport costs;
};

/// T = L + mu * |sigma - t| + lambda * delta, with sigma_p or sigma_q by mode.
template <typename T>
ObjectiveResult<T> total_loss(const Tensor<T>& predictions, const std::vector<int>& labels, const Graph& graph,
                              const Coloring& coloring, const GateSet& gates, const LossConfig& config, int64_t step);

/// The regularization part of the objective alone (no task loss).
struct RegularizerResult {
  double architecture_term = 0;
  double stiffening_term = 0;
  double structure = 1;
  std::map<int, std::vector<double>> gate_grad;
  CostReport costs;
};
RegularizerResult regularizer(const Graph& graph, const Coloring& coloring, const GateSet& gates, double mu,
                              double lambda, StructureMode mode, double target, double reference_params = 0,
                              double reference_flops = 0);

}  // namespace chprune
