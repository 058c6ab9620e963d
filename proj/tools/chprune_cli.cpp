#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chprune/checkpoint.hpp"
#include "chprune/graph_io.hpp"
#include "chprune/workflow.hpp"

using namespace chprune;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> objective;
  std::optional<double> target;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "workflow config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "override the workflow seed");
  cmd->add_option("--out-dir", o.out_dir, "override the output directory");
  cmd->add_option("--objective", o.objective, "structure objective")->check(CLI::IsMember({"sparsity", "flops"}));
  cmd->add_option("--target", o.target, "target structure fraction in [0, 1)");
}

WorkflowConfig resolve(const Overrides& o) {
  WorkflowConfig c = load_workflow_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (o.objective) c.loss.mode = *o.objective == "flops" ? StructureMode::Flops : StructureMode::Sparsity;
  if (o.target) c.loss.target = *o.target;
  validate_workflow_config(c);
  return c;
}

// The most advanced model of a run: the folded export if present.
Model latest_model(const WorkflowConfig& c) {
  fs::path dir(c.out_dir);
  if (fs::exists(dir / "final.ckpt")) return model_from_checkpoint((dir / "final.ckpt").string());
  if (fs::exists(dir / "checkpoint.bin")) return model_from_checkpoint((dir / "checkpoint.bin").string());
  throw Error(ErrorCode::MissingFile, "no checkpoint in '" + dir.string() + "'; run train first");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel pruning with continuous relaxation"};
  app.require_subcommand(1);

  Overrides train_o, prune_o, eval_o, heat_o, report_o;
  bool resume = false, verbose = false;
  auto* train = app.add_subcommand("train", "run the workflow steps of a config");
  add_common(train, train_o);
  train->add_flag("--resume", resume, "continue from the run's checkpoint");
  train->add_flag("-v,--verbose", verbose, "progress on stderr");

  double tau = 0.5;
  auto* prune_cmd = app.add_subcommand("prune", "prune the checkpointed model at a threshold and fold it");
  add_common(prune_cmd, prune_o);
  prune_cmd->add_option("--tau", tau, "mask threshold in (0, 1)");

  auto* eval = app.add_subcommand("eval", "evaluate the latest model on the held-out split");
  add_common(eval, eval_o);

  std::string heat_out;
  auto* heat = app.add_subcommand("export-heatmap", "write per-group sigma(s) as JSON");
  add_common(heat, heat_o);
  heat->add_option("-o,--output", heat_out, "file to write (default: stdout)");

  auto* report = app.add_subcommand("report", "cost report of the latest model, or of the untrained model");
  add_common(report, report_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      auto c = resolve(train_o);
      RunOptions ro;
      ro.resume = resume;
      ro.verbose = verbose;
      auto r = run_workflow(c, ro);
      nlohmann::json out{{"steps", r.completed_steps},
                         {"baseline_metric", r.baseline_metric ? nlohmann::json(*r.baseline_metric) : nlohmann::json()},
                         {"final_metric", r.final_metric ? nlohmann::json(*r.final_metric) : nlohmann::json()},
                         {"out_dir", c.out_dir}};
      std::cout << out.dump(2) << "\n";
    } else if (*prune_cmd) {
      auto c = resolve(prune_o);
      auto m = model_from_checkpoint((fs::path(c.out_dir) / "checkpoint.bin").string());
      PruneOptions po;
      po.tau = tau;
      po.min_survivors = c.min_survivors;
      po.probes = c.probes;
      po.probe_seed = c.seed;
      auto outcome = prune(m.graph, m.coloring, m.gates, m.weights, po);
      fs::path dir(c.out_dir);
      save_graph(outcome.model.graph, (dir / "pruned.graph").string());
      save_checkpoint(Checkpoint{outcome.model.graph, outcome.model.weights, outcome.model.gates, {}, c.seed, 0, 0, 0, "{}"},
                      (dir / "pruned.ckpt").string());
      std::cout << export_prune_report(outcome.report);
    } else if (*eval) {
      auto c = resolve(eval_o);
      auto m = latest_model(c);
      auto data = load_data(c);
      Metric metric = data.test.pixel_labels() ? Metric::MeanIoU : Metric::Top1;
      auto e = evaluate(m, data.test, metric);
      nlohmann::json out{{"metric", metric == Metric::MeanIoU ? "mIoU" : "top1"}, {"value", e.metric}, {"loss", e.loss}};
      std::cout << out.dump(2) << "\n";
    } else if (*heat) {
      auto c = resolve(heat_o);
      auto m = model_from_checkpoint((fs::path(c.out_dir) / "checkpoint.bin").string());
      auto text = export_heatmap(m.graph, m.coloring, m.gates);
      if (heat_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream out(heat_out);
        if (!(out << text)) throw Error(ErrorCode::IoFailure, "cannot write '" + heat_out + "'");
      }
    } else if (*report) {
      auto c = resolve(report_o);
      Graph reference = build_reference_model(c.model, c.model_config);
      auto full = measure_costs(reference, identify_subgraphs(reference), {});
      Model m;
      fs::path dir(c.out_dir);
      if (fs::exists(dir / "final.ckpt") || fs::exists(dir / "checkpoint.bin")) {
        m = latest_model(c);
      } else {
        m.graph = reference;
        m.coloring = identify_subgraphs(reference);
        m.gates = init_gates(m.coloring, c.loss.steepness, c.loss.stiffening_sd);
      }
      std::cout << export_cost_report(model_costs(m, full.total_params, full.total_flops));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
