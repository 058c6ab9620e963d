#include "chprune/workflow.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "chprune/checkpoint.hpp"
#include "chprune/graph_io.hpp"

namespace chprune {

using json = nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Schedule parse_schedule(const json& j) {
  Schedule s;
  if (j.is_number()) {
    s.points.emplace_back(0, j.get<double>());
    return s;
  }
  if (!j.is_array()) throw Error(ErrorCode::InvalidConfig, "schedule must be a number or a list of [step, value]");
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2) throw Error(ErrorCode::InvalidConfig, "schedule points are [step, value] pairs");
    s.points.emplace_back(p[0].get<int64_t>(), p[1].get<double>());
  }
  return s;
}

OptimizerMethod parse_method(const std::string& name) {
  if (name == "adam") return OptimizerMethod::Adam;
  if (name == "sgd") return OptimizerMethod::Sgd;
  throw Error(ErrorCode::InvalidConfig, "unknown optimizer '" + name + "'");
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double number_or_nan(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

json record_to_json(const MetricsRecord& r) {
  return json{{"event", r.event},
              {"step", r.step},
              {"epoch", r.epoch},
              {"iteration", r.iteration},
              {"task_loss", number_or_null(r.task_loss)},
              {"architecture_term", number_or_null(r.architecture_term)},
              {"stiffening_term", number_or_null(r.stiffening_term)},
              {"total", number_or_null(r.total)},
              {"sigma_p", number_or_null(r.sigma_p)},
              {"sigma_q", number_or_null(r.sigma_q)},
              {"metric", number_or_null(r.metric)},
              {"wall_time", r.wall_time}};
}

MetricsRecord record_from_json(const json& j) {
  MetricsRecord r;
  r.event = j.at("event").get<std::string>();
  r.step = j.at("step").get<int64_t>();
  r.epoch = j.at("epoch").get<int64_t>();
  r.iteration = j.at("iteration").get<int64_t>();
  r.task_loss = number_or_nan(j.at("task_loss"));
  r.architecture_term = number_or_nan(j.at("architecture_term"));
  r.stiffening_term = number_or_nan(j.at("stiffening_term"));
  r.total = number_or_nan(j.at("total"));
  r.sigma_p = number_or_nan(j.at("sigma_p"));
  r.sigma_q = number_or_nan(j.at("sigma_q"));
  r.metric = number_or_nan(j.at("metric"));
  r.wall_time = j.at("wall_time").get<double>();
  return r;
}

json report_to_json(const PruneReport& r) { return json::parse(export_prune_report(r)); }

PruneReport report_from_json(const json& j) {
  PruneReport r;
  for (const auto& g : j.at("groups"))
    r.groups.push_back(GroupKeep{g.at("group").get<int>(), g.at("kept").get<int64_t>(), g.at("total").get<int64_t>()});
  r.removed = j.at("removed").get<std::vector<NodeId>>();
  r.params_before = j.at("params_before").get<double>();
  r.params_after = j.at("params_after").get<double>();
  r.flops_before = j.at("flops_before").get<double>();
  r.flops_after = j.at("flops_after").get<double>();
  r.masked_params = j.at("masked_params").get<double>();
  r.masked_flops = j.at("masked_flops").get<double>();
  r.residual = number_or_nan(j.at("residual"));
  return r;
}

json event_to_json(const PruneEvent& e) {
  return json{{"step", e.step},
              {"tau", e.tau},
              {"loss_before", number_or_null(e.loss_before)},
              {"loss_after", number_or_null(e.loss_after)},
              {"loss_recovered", number_or_null(e.loss_recovered)},
              {"sigma_q_before", e.sigma_q_before},
              {"sigma_q_after", e.sigma_q_after},
              {"sigma_p_before", e.sigma_p_before},
              {"sigma_p_after", e.sigma_p_after},
              {"report", report_to_json(e.report)}};
}

PruneEvent event_from_json(const json& j) {
  PruneEvent e;
  e.step = j.at("step").get<int64_t>();
  e.tau = j.at("tau").get<double>();
  e.loss_before = number_or_nan(j.at("loss_before"));
  e.loss_after = number_or_nan(j.at("loss_after"));
  e.loss_recovered = number_or_nan(j.at("loss_recovered"));
  e.sigma_q_before = j.at("sigma_q_before").get<double>();
  e.sigma_q_after = j.at("sigma_q_after").get<double>();
  e.sigma_p_before = j.at("sigma_p_before").get<double>();
  e.sigma_p_after = j.at("sigma_p_after").get<double>();
  e.report = report_from_json(j.at("report"));
  return e;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "write to '" + path.string() + "' failed");
}

}  // namespace

std::vector<double> default_tau_ramp() { return {0.01, 0.1, 0.25, 0.4, 0.5}; }

WorkflowConfig parse_workflow_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, std::string("workflow config: ") + e.what());
  }
  WorkflowConfig c;
  try {
    c.seed = doc.value("seed", uint64_t{0});
    c.out_dir = doc.value("out_dir", c.out_dir);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.min_survivors = doc.value("min_survivors", c.min_survivors);
    c.probes = doc.value("probes", c.probes);

    if (doc.contains("dataset")) {
      const auto& d = doc["dataset"];
      auto& s = c.dataset;
      s.kind = d.value("kind", s.kind);
      s.path = d.value("path", s.path);
      s.train = d.value("train", s.train);
      s.test = d.value("test", s.test);
      s.size = d.value("size", s.size);
      s.classes = d.value("classes", s.classes);
      s.channels = d.value("channels", s.channels);
      s.noise = d.value("noise", s.noise);
      if (d.contains("seed")) s.seed = d["seed"].get<uint64_t>();
      s.normalize = d.value("normalize", s.normalize);
    }
    if (c.dataset.kind == "cifar10") {
      c.dataset.size = 32;
      c.dataset.classes = 10;
      c.dataset.channels = 3;
    }

    c.model_config.classes = c.dataset.classes;
    c.model_config.in_channels = c.dataset.channels;
    c.model_config.image_size = c.dataset.size;
    if (doc.contains("model")) {
      const auto& m = doc["model"];
      if (m.is_string()) {
        c.model = m.get<std::string>();
      } else {
        c.model = m.value("name", c.model);
        c.model_config.width = m.value("width", c.model_config.width);
        c.model_config.depth = m.value("depth", c.model_config.depth);
        c.model_config.classes = m.value("classes", c.model_config.classes);
        c.model_config.in_channels = m.value("in_channels", c.model_config.in_channels);
        c.model_config.image_size = m.value("image_size", c.model_config.image_size);
      }
    }

    c.loss.task = c.dataset.kind == "shapes-segment" ? TaskLoss::PixelwiseCrossEntropy : TaskLoss::CrossEntropy;
    c.auto_weights = true;
    if (doc.contains("loss")) {
      const auto& l = doc["loss"];
      std::string mode = l.value("mode", std::string("flops"));
      if (mode == "flops")
        c.loss.mode = StructureMode::Flops;
      else if (mode == "sparsity")
        c.loss.mode = StructureMode::Sparsity;
      else
        throw Error(ErrorCode::InvalidConfig, "loss mode must be 'flops' or 'sparsity'");
      c.loss.target = l.value("target", c.loss.target);
      c.loss.steepness = l.value("steepness", c.loss.steepness);
      c.loss.stiffening_sd = l.value("stiffening_sd", c.loss.stiffening_sd);
      bool has_mu = l.contains("mu") && !(l["mu"].is_string() && l["mu"] == "auto");
      bool has_lambda = l.contains("lambda") && !(l["lambda"].is_string() && l["lambda"] == "auto");
      if (has_mu != has_lambda) throw Error(ErrorCode::InvalidConfig, "set both mu and lambda, or neither");
      if (has_mu) {
        c.loss.mu = parse_schedule(l["mu"]);
        c.loss.lambda = parse_schedule(l["lambda"]);
        c.auto_weights = false;
      }
    }

    if (doc.contains("optimizer")) {
      const auto& o = doc["optimizer"];
      auto& s = c.optimizer;
      if (o.contains("method")) s.method = parse_method(o["method"].get<std::string>());
      s.lr = o.value("lr", s.lr);
      if (o.contains("gate_lr")) s.gate_lr = o["gate_lr"].get<double>();
      s.momentum = o.value("momentum", s.momentum);
      s.beta1 = o.value("beta1", s.beta1);
      s.beta2 = o.value("beta2", s.beta2);
      s.eps = o.value("eps", s.eps);
      s.weight_decay = o.value("weight_decay", s.weight_decay);
      c.cosine = o.value("cosine", c.cosine);
    }

    if (doc.contains("steps")) {
      for (const auto& s : doc["steps"]) {
        StepSpec step;
        step.prune = s.value("prune", step.prune);
        step.train = s.value("train", step.train);
        step.test = s.value("test", step.test);
        // Unset thresholds carry the previous step's value forward.
        step.tau = s.value("tau", c.steps.empty() ? default_tau_ramp().front() : c.steps.back().tau);
        step.epochs = s.value("epochs", step.epochs);
        if (s.contains("method")) step.method = parse_method(s["method"].get<std::string>());
        if (s.contains("lr")) step.lr = s["lr"].get<double>();
        if (s.contains("gate_lr")) step.gate_lr = s["gate_lr"].get<double>();
        if (s.contains("weight_decay")) step.weight_decay = s["weight_decay"].get<double>();
        c.steps.push_back(step);
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("workflow config: ") + e.what());
  }
  validate_workflow_config(c);
  return c;
}

WorkflowConfig load_workflow_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_workflow_config(ss.str());
}

void validate_workflow_config(const WorkflowConfig& c) {
  if (c.steps.empty()) throw Error(ErrorCode::InvalidConfig, "workflow needs at least one step");
  for (size_t j = 0; j < c.steps.size(); ++j) {
    const auto& s = c.steps[j];
    if (!(s.tau > 0 && s.tau < 1)) throw Error(ErrorCode::InvalidConfig, "tau must lie in (0, 1)");
    if (s.epochs < 0) throw Error(ErrorCode::InvalidConfig, "epochs must be >= 0");
    if (j > 0 && s.tau < c.steps[j - 1].tau) throw Error(ErrorCode::InvalidConfig, "tau must not decrease across steps");
  }
  if (c.batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  if (c.min_survivors < 0) throw Error(ErrorCode::InvalidConfig, "min_survivors must be >= 0");
  if (!(c.optimizer.lr > 0)) throw Error(ErrorCode::InvalidConfig, "lr must be positive");
  validate_loss_config(c.loss);
}

MetricsLog::MetricsLog(const std::string& path) : out_(path, std::ios::trunc), path_(path) {
  if (!out_) throw Error(ErrorCode::IoFailure, "cannot open metrics log '" + path + "'");
  out_ << header() << "\n";
}

std::string MetricsLog::header() {
  return "event,step,epoch,iteration,task_loss,architecture_term,stiffening_term,total,sigma_p,sigma_q,metric,wall_time";
}

std::string MetricsLog::format(const MetricsRecord& r) {
  auto num = [](double v) {
    if (!std::isfinite(v)) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << r.event << ',' << r.step << ',' << r.epoch << ',' << r.iteration << ',' << num(r.task_loss) << ','
     << num(r.architecture_term) << ',' << num(r.stiffening_term) << ',' << num(r.total) << ',' << num(r.sigma_p)
     << ',' << num(r.sigma_q) << ',' << num(r.metric) << ',' << num(r.wall_time);
  return os.str();
}

void MetricsLog::emit(const MetricsRecord& record) {
  out_ << format(record) << "\n";
  if (!out_) throw Error(ErrorCode::IoFailure, "write to '" + path_ + "' failed");
}

void MetricsLog::flush() {
  out_.flush();
  if (!out_) throw Error(ErrorCode::IoFailure, "flush of '" + path_ + "' failed");
}

std::vector<int> argmax_labels(const Tensor<float>& logits) {
  const int64_t plane = logits.plane();
  std::vector<int> out(static_cast<size_t>(logits.shape.batch * plane));
  for (int64_t b = 0; b < logits.shape.batch; ++b)
    for (int64_t i = 0; i < plane; ++i) {
      int best = 0;
      for (int64_t c = 1; c < logits.shape.channels; ++c)
        if (logits.channel(b, c)[i] > logits.channel(b, best)[i]) best = static_cast<int>(c);
      out[static_cast<size_t>(b * plane + i)] = best;
    }
  return out;
}

double top1_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.empty()) throw Error(ErrorCode::EmptyDataset, "no predictions");
  if (predicted.size() != truth.size()) throw Error(ErrorCode::LengthMismatch, "prediction and label counts differ");
  size_t correct = 0;
  for (size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(predicted.size());
}

namespace {

struct IouCounts {
  std::vector<int64_t> tp, fp, fn;
  explicit IouCounts(int classes) : tp(classes), fp(classes), fn(classes) {}
  void add(const std::vector<int>& predicted, const std::vector<int>& truth) {
    const int classes = static_cast<int>(tp.size());
    for (size_t i = 0; i < predicted.size(); ++i) {
      int p = predicted[i], t = truth[i];
      if (p < 0 || p >= classes || t < 0 || t >= classes)
        throw Error(ErrorCode::LabelOutOfRange, "label outside " + std::to_string(classes) + " classes");
      if (p == t) {
        ++tp[p];
      } else {
        ++fp[p];
        ++fn[t];
      }
    }
  }
  double mean() const {
    double sum = 0;
    int present = 0;
    for (size_t c = 0; c < tp.size(); ++c) {
      int64_t denom = tp[c] + fp[c] + fn[c];
      if (denom == 0) continue;
      sum += static_cast<double>(tp[c]) / static_cast<double>(denom);
      ++present;
    }
    return present ? sum / present : 1.0;
  }
};

}  // namespace

double mean_iou(const std::vector<int>& predicted, const std::vector<int>& truth, int classes) {
  if (predicted.empty()) throw Error(ErrorCode::EmptyDataset, "no predictions");
  if (predicted.size() != truth.size()) throw Error(ErrorCode::LengthMismatch, "prediction and label counts differ");
  IouCounts counts(classes);
  counts.add(predicted, truth);
  return counts.mean();
}

Evaluation evaluate(const Model& model, const LabeledDataset& dataset, Metric metric, size_t batch_size) {
  if (dataset.empty()) throw Error(ErrorCode::EmptyDataset, "evaluation dataset is empty");
  IouCounts iou(dataset.classes);
  size_t correct = 0, total = 0;
  double loss_sum = 0;
  for (size_t start = 0; start < dataset.size(); start += batch_size) {
    std::vector<size_t> idx;
    for (size_t i = start; i < std::min(dataset.size(), start + batch_size); ++i) idx.push_back(i);
    Batch b = make_batch(dataset, idx);
    auto logits = chprune::evaluate(model.graph, model.coloring, model.gates, model.weights, b.inputs, model.mode);
    auto ce = cross_entropy(logits, b.labels);
    loss_sum += ce.loss * static_cast<double>(b.labels.size());
    auto pred = argmax_labels(logits);
    if (metric == Metric::MeanIoU) {
      iou.add(pred, b.labels);
    } else {
      for (size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
    }
    total += b.labels.size();
  }
  Evaluation e;
  e.loss = loss_sum / static_cast<double>(total);
  e.metric = metric == Metric::MeanIoU ? iou.mean() : static_cast<double>(correct) / static_cast<double>(total);
  return e;
}

DataSplits load_data(const WorkflowConfig& config) {
  const auto& d = config.dataset;
  DataSplits out;
  if (d.kind == "cifar10") {
    out.train = load_cifar10(d.path, Split::Train);
    out.test = load_cifar10(d.path, Split::Test);
  } else {
    SyntheticKind kind = synthetic_kind_from_name(d.kind);
    SyntheticConfig sc{d.train, d.size, d.classes, d.channels, d.noise, d.seed.value_or(config.seed)};
    out.train = generate_synthetic(kind, sc);
    sc.n = d.test;
    sc.seed = sc.seed * 2654435761ull + 1;  // disjoint stream for the held-out split
    out.test = generate_synthetic(kind, sc);
  }
  out.train.split = Split::Train;
  out.test.split = Split::Test;
  if (d.normalize) {
    out.normalization = compute_normalization(out.train);
    normalize(out.train, out.normalization);
    normalize(out.test, out.normalization);
  }
  return out;
}

Model model_from_checkpoint(const std::string& path) {
  auto c = load_checkpoint(path);
  Model m;
  m.graph = std::move(c.graph);
  m.coloring = identify_subgraphs(m.graph);
  m.weights = std::move(c.weights);
  m.gates = std::move(c.gates);
  m.mode = m.gates.values.empty() ? GateMode::None : GateMode::Relaxed;
  return m;
}

CostReport model_costs(const Model& model, double reference_params, double reference_flops) {
  auto report = model.mode == GateMode::None ? measure_costs(model.graph, model.coloring, {})
                                             : structure_measures(model.graph, model.coloring, model.gates);
  if (reference_params > 0) report.sigma_p = report.relaxed_params / reference_params;
  if (reference_flops > 0) report.sigma_q = report.relaxed_flops / reference_flops;
  return report;
}

WorkflowResult run_workflow(const WorkflowConfig& config, const RunOptions& options) {
  validate_workflow_config(config);
  namespace fs = std::filesystem;
  const fs::path out_dir(config.out_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create '" + out_dir.string() + "': " + ec.message());
  const fs::path checkpoint_path = out_dir / "checkpoint.bin";
  const auto clock_start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count(); };

  DataSplits data = load_data(config);
  const Metric metric = data.train.pixel_labels() ? Metric::MeanIoU : Metric::Top1;

  WorkflowResult result;
  result.dataset_fingerprint = fingerprint(data.train);
  Model& m = result.model;
  m.graph = build_reference_model(config.model, config.model_config);
  m.coloring = identify_subgraphs(m.graph);
  m.weights = init_weights<float>(m.graph, config.seed);
  m.gates = init_gates(m.coloring, config.loss.steepness, config.loss.stiffening_sd);
  {
    auto full = measure_costs(m.graph, m.coloring, {});
    result.reference_params = full.total_params;
    result.reference_flops = full.total_flops;
  }

  LossConfig loss = config.loss;
  OptimizerState opt_state;
  int64_t start_step = 0, epoch_counter = 0, iteration = 0;
  std::optional<double> auto_weight;

  if (options.resume && fs::exists(checkpoint_path)) {
    auto c = load_checkpoint(checkpoint_path.string());
    if (c.seed != config.seed) throw Error(ErrorCode::CheckpointReadFailure, "checkpoint was written with another seed");
    m.graph = std::move(c.graph);
    m.coloring = identify_subgraphs(m.graph);
    m.weights = std::move(c.weights);
    m.gates = std::move(c.gates);
    opt_state = std::move(c.optimizer);
    start_step = c.next_step;
    epoch_counter = c.epoch_counter;
    iteration = c.iteration;
    auto state = json::parse(c.state);
    for (const auto& r : state.at("metrics")) result.metrics.push_back(record_from_json(r));
    for (const auto& e : state.at("prunes")) result.prunes.push_back(event_from_json(e));
    if (!state.at("baseline").is_null()) result.baseline_metric = state["baseline"].get<double>();
    if (!state.at("final").is_null()) result.final_metric = state["final"].get<double>();
    if (!state.at("auto_weight").is_null()) auto_weight = state["auto_weight"].get<double>();
    if (state.at("fingerprint").get<uint64_t>() != result.dataset_fingerprint)
      throw Error(ErrorCode::CheckpointReadFailure, "dataset differs from the checkpointed run");
  }
  loss.reference_params = result.reference_params;
  loss.reference_flops = result.reference_flops;
  auto apply_auto = [&](double value) {
    loss.mu = Schedule{{{0, 0.0}, {1, value}}};
    loss.lambda = Schedule{{{0, 0.0}, {1, value}}};
  };
  if (config.auto_weights) apply_auto(auto_weight.value_or(1.0));

  MetricsLog log((out_dir / "metrics.csv").string());
  for (const auto& r : result.metrics) log.emit(r);
  log.flush();
  auto record = [&](MetricsRecord r) {
    r.iteration = iteration;
    r.wall_time = elapsed();
    log.emit(r);
    result.metrics.push_back(r);
  };
  auto sigmas = [&](const Model& model) { return model_costs(model, result.reference_params, result.reference_flops); };

  for (int64_t j = start_step; j < static_cast<int64_t>(config.steps.size()); ++j) {
    const StepSpec& step = config.steps[static_cast<size_t>(j)];
    OptimizerConfig oc = config.optimizer;
    if (step.method) oc.method = *step.method;
    if (step.lr) oc.lr = *step.lr;
    if (step.gate_lr) oc.gate_lr = *step.gate_lr;
    if (step.weight_decay) oc.weight_decay = *step.weight_decay;
    opt_state = OptimizerState{};

    PruneEvent* event = nullptr;
    if (step.prune) {
      PruneEvent e;
      e.step = j;
      e.tau = step.tau;
      auto before = sigmas(m);
      e.sigma_p_before = before.sigma_p;
      e.sigma_q_before = before.sigma_q;
      e.loss_before = evaluate(m, data.train, metric).loss;
      PruneOptions po;
      po.tau = step.tau;
      po.min_survivors = config.min_survivors;
      po.fold = false;
      po.probes = config.probes;
      po.probe_seed = config.seed + static_cast<uint64_t>(j);
      auto outcome = prune(m.graph, m.coloring, m.gates, m.weights, po);
      m.graph = std::move(outcome.model.graph);
      m.coloring = std::move(outcome.model.coloring);
      m.weights = std::move(outcome.model.weights);
      m.gates = std::move(outcome.model.gates);
      e.report = std::move(outcome.report);
      auto after = sigmas(m);
      e.sigma_p_after = after.sigma_p;
      e.sigma_q_after = after.sigma_q;
      e.loss_after = evaluate(m, data.train, metric).loss;
      e.loss_recovered = kNaN;
      write_text(out_dir / ("prune_step" + std::to_string(j) + ".json"), export_prune_report(e.report));
      MetricsRecord r;
      r.event = "prune";
      r.step = j;
      r.task_loss = e.loss_after;
      r.architecture_term = r.stiffening_term = r.total = kNaN;
      r.sigma_p = e.sigma_p_after;
      r.sigma_q = e.sigma_q_after;
      r.metric = kNaN;
      record(r);
      if (options.verbose)
        std::cerr << "step " << j << ": pruned at tau " << step.tau << ", sigma_q " << e.sigma_q_before << " -> "
                  << e.sigma_q_after << ", train loss " << e.loss_before << " -> " << e.loss_after << "\n";
      result.prunes.push_back(std::move(e));
      event = &result.prunes.back();
    }

    if (step.train && step.epochs > 0) {
      const int64_t per_epoch = static_cast<int64_t>((data.train.size() + static_cast<size_t>(config.batch_size) - 1) /
                                                     static_cast<size_t>(config.batch_size));
      const int64_t total_iters = per_epoch * step.epochs;
      int64_t step_iter = 0;
      double last_task = kNaN;
      for (int64_t e = 0; e < step.epochs; ++e) {
        BatchIterator it(data.train, static_cast<size_t>(config.batch_size), config.seed, static_cast<uint64_t>(epoch_counter));
        Batch batch;
        double task = 0, arch = 0, stiff = 0, total = 0;
        int64_t count = 0;
        while (it.next(batch)) {
          ForwardOptions fo;
          auto tape = forward(m.graph, m.coloring, m.gates, m.weights, batch.inputs, fo);
          auto obj = total_loss(tape.output(), batch.labels, m.graph, m.coloring, m.gates, loss, j);
          auto grads = backward(tape, m.weights, obj.logits_grad);
          for (auto& [g, v] : obj.gate_grad) {
            auto& acc = grads.gates[g];
            acc.resize(v.size(), 0.0);
            for (size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
          }
          double scale = config.cosine ? cosine_scale(step_iter, total_iters) : 1.0;
          optimizer_step(m.weights, m.gates, grads, oc, opt_state, scale);
          ++step_iter;
          ++iteration;
          task += obj.breakdown.task_loss;
          arch += obj.breakdown.architecture_term;
          stiff += obj.breakdown.stiffening_term;
          total += obj.breakdown.total;
          ++count;
        }
        ++epoch_counter;
        auto costs = sigmas(m);
        MetricsRecord r;
        r.event = "train";
        r.step = j;
        r.epoch = e;
        r.task_loss = task / static_cast<double>(count);
        r.architecture_term = arch / static_cast<double>(count);
        r.stiffening_term = stiff / static_cast<double>(count);
        r.total = total / static_cast<double>(count);
        r.sigma_p = costs.sigma_p;
        r.sigma_q = costs.sigma_q;
        r.metric = kNaN;
        record(r);
        log.flush();
        last_task = r.task_loss;
        if (options.verbose)
          std::cerr << "step " << j << " epoch " << e << ": task " << r.task_loss << " total " << r.total
                    << " sigma_p " << r.sigma_p << " sigma_q " << r.sigma_q << " (" << elapsed() << " s)\n";
      }
      if (event) event->loss_recovered = evaluate(m, data.train, metric).loss;
      if (config.auto_weights && j == 0) {
        auto_weight = std::max(last_task, 1e-3);
        apply_auto(*auto_weight);
      }
    }

    if (step.test) {
      auto ev = evaluate(m, data.test, metric);
      auto costs = sigmas(m);
      MetricsRecord r;
      r.event = "test";
      r.step = j;
      r.task_loss = ev.loss;
      r.architecture_term = r.stiffening_term = r.total = kNaN;
      r.sigma_p = costs.sigma_p;
      r.sigma_q = costs.sigma_q;
      r.metric = ev.metric;
      record(r);
      if (!result.baseline_metric) result.baseline_metric = ev.metric;
      result.final_metric = ev.metric;
      if (options.verbose) std::cerr << "step " << j << ": test metric " << ev.metric << " loss " << ev.loss << "\n";
    }
    log.flush();

    json state;
    state["metrics"] = json::array();
    for (const auto& r : result.metrics) state["metrics"].push_back(record_to_json(r));
    state["prunes"] = json::array();
    for (const auto& e : result.prunes) state["prunes"].push_back(event_to_json(e));
    state["baseline"] = result.baseline_metric ? json(*result.baseline_metric) : json(nullptr);
    state["final"] = result.final_metric ? json(*result.final_metric) : json(nullptr);
    state["auto_weight"] = auto_weight ? json(*auto_weight) : json(nullptr);
    state["fingerprint"] = result.dataset_fingerprint;
    save_checkpoint(Checkpoint{m.graph, m.weights, m.gates, opt_state, config.seed, j + 1, epoch_counter, iteration,
                               state.dump()},
                    checkpoint_path.string());
    result.completed_steps = j + 1;
    if (options.stop_after_step == j) return result;
  }
  result.completed_steps = static_cast<int64_t>(config.steps.size());

  // Export: the folded, gate-free model next to the relaxed one.
  PrunedModel<float> pm{m.graph, m.coloring, m.weights, m.gates, false, {}};
  fold(pm);
  result.final_model = Model{pm.graph, pm.coloring, pm.weights, pm.gates, GateMode::None};
  save_graph(result.final_model.graph, (out_dir / "final.graph").string());
  save_checkpoint(Checkpoint{result.final_model.graph, result.final_model.weights, result.final_model.gates, {},
                             config.seed, static_cast<int64_t>(config.steps.size()), epoch_counter, iteration, "{}"},
                  (out_dir / "final.ckpt").string());
  write_text(out_dir / "heatmap.json", export_heatmap(m.graph, m.coloring, m.gates));
  json summary{{"fingerprint", result.dataset_fingerprint},
               {"reference_params", result.reference_params},
               {"reference_flops", result.reference_flops},
               {"baseline_metric", result.baseline_metric ? json(*result.baseline_metric) : json(nullptr)},
               {"final_metric", result.final_metric ? json(*result.final_metric) : json(nullptr)},
               {"final_params", measure_costs(result.final_model.graph, result.final_model.coloring, {}).total_params},
               {"final_flops", measure_costs(result.final_model.graph, result.final_model.coloring, {}).total_flops}};
  summary["prunes"] = json::array();
  for (const auto& e : result.prunes) {
    auto row = event_to_json(e);
    row.erase("report");
    summary["prunes"].push_back(row);
  }
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return result;
}

}  // namespace chprune
