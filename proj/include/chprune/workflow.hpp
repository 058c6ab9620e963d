#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "chprune/data.hpp"
#include "chprune/engine.hpp"
#include "chprune/models.hpp"
#include "chprune/objective.hpp"
#include "chprune/optimizer.hpp"
#include "chprune/pruner.hpp"

namespace chprune {

struct StepSpec {
  bool prune = false;
  bool train = true;
  bool test = true;
  double tau = 0.01;
  int64_t epochs = 1;
  std::optional<OptimizerMethod> method;
  std::optional<double> lr;
  std::optional<double> gate_lr;
  std::optional<double> weight_decay;
};

struct DatasetSpec {
  std::string kind = "blobs-classify";  // or "shapes-segment", "cifar10"
  std::string path;                      // cifar10 directory
  int64_t train = 2000;
  int64_t test = 500;
  int64_t size = 32;
  int64_t classes = 4;
  int64_t channels = 3;
  double noise = 0.3;
  std::optional<uint64_t> seed;  // defaults to the workflow seed
  bool normalize = true;
};

struct WorkflowConfig {
  uint64_t seed = 0;
  std::string model = "resnet8";
  ModelConfig model_config;
  DatasetSpec dataset;
  LossConfig loss;
  /// Set mu and lambda from the task loss reached in step 0.
  bool auto_weights = false;
  OptimizerConfig optimizer;
  bool cosine = true;
  int64_t batch_size = 32;
  int64_t min_survivors = 0;
  size_t probes = 4;
  std::vector<StepSpec> steps;
  std::string out_dir = "run";
};

/// Default threshold ramp of a five-step run.
std::vector<double> default_tau_ramp();

/// Parses the JSON workflow document (schema in README). Throws InvalidConfig, ParseError.
WorkflowConfig parse_workflow_config(const std::string& text);
WorkflowConfig load_workflow_config(const std::string& path);
/// Throws InvalidConfig (no steps, decreasing tau, tau outside (0, 1), ...).
void validate_workflow_config(const WorkflowConfig& config);

struct MetricsRecord {
  std::string event;  // train, prune or test
  int64_t step = 0;
  int64_t epoch = 0;
  int64_t iteration = 0;
  double task_loss = 0;
  double architecture_term = 0;
  double stiffening_term = 0;
  double total = 0;
  double sigma_p = 1;
  double sigma_q = 1;
  double metric = 0;  // NaN unless the row carries a test result
  double wall_time = 0;
};

/// Append-only delimiter-separated log; the first row is the header.
class MetricsLog {
 public:
  /// Throws IoFailure.
  explicit MetricsLog(const std::string& path);
  void emit(const MetricsRecord& record);
  void flush();
  static std::string header();
  static std::string format(const MetricsRecord& record);

 private:
  std::ofstream out_;
  std::string path_;
};

struct Model {
  Graph graph;
  Coloring coloring;
  Weights<float> weights;
  GateSet gates;
  GateMode mode = GateMode::Relaxed;
};

enum class Metric { Top1, MeanIoU };

std::vector<int> argmax_labels(const Tensor<float>& logits);
double top1_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);
/// Mean over classes of TP / (TP + FP + FN), skipping classes absent from both.
double mean_iou(const std::vector<int>& predicted, const std::vector<int>& truth, int classes);

struct Evaluation {
  double metric = 0;
  double loss = 0;
};

/// Inference-mode pass over the whole dataset. Throws EmptyDataset.
Evaluation evaluate(const Model& model, const LabeledDataset& dataset, Metric metric, size_t batch_size = 64);

struct PruneEvent {
  int64_t step = 0;
  double tau = 0;
  double loss_before = 0;     // task loss over the training split right before the rewrite
  double loss_after = 0;      // right after it
  double loss_recovered = 0;  // after the same step's training (NaN without training)
  double sigma_q_before = 1;
  double sigma_q_after = 1;
  double sigma_p_before = 1;
  double sigma_p_after = 1;
  PruneReport report;
};

struct DataSplits {
  LabeledDataset train;
  LabeledDataset test;
  Normalization normalization;
};

/// Builds or loads the datasets of a workflow, normalised by training statistics.
DataSplits load_data(const WorkflowConfig& config);

struct RunOptions {
  bool resume = false;
  /// Stop after completing this step index (interruption tests); -1 runs all.
  int64_t stop_after_step = -1;
  bool verbose = false;
};

struct WorkflowResult {
  Model model;  // relaxed model after the last step
  Model final_model;  // folded, gate-free
  std::vector<MetricsRecord> metrics;
  std::vector<PruneEvent> prunes;
  std::optional<double> baseline_metric;  // first test result
  std::optional<double> final_metric;     // last test result
  double reference_params = 0;
  double reference_flops = 0;
  uint64_t dataset_fingerprint = 0;
  int64_t completed_steps = 0;
};

/// Runs the prune/train/test steps. Writes metrics.csv, checkpoint.bin after
/// every step, per-prune reports and the folded final model to out_dir.
/// Throws CheckpointWriteFailure and any module error.
WorkflowResult run_workflow(const WorkflowConfig& config, const RunOptions& options = {});

/// Rebuilds a relaxed model from a checkpoint.
Model model_from_checkpoint(const std::string& path);

/// Relaxed costs against the given reference totals (zero: the model's own).
CostReport model_costs(const Model& model, double reference_params = 0, double reference_flops = 0);

}  // namespace chprune
