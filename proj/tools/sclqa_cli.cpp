// Command-line front end for the intent-lifecycle workflow.
//
//   sclqa workflow --config run.ini
//   sclqa detect --out runs/a --target-tpr 0.8
//   sclqa report --out runs/a

#include "sclqa/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string data;
  std::string method;
  std::optional<std::uint64_t> seed;
  std::optional<double> target_tpr;
  std::optional<int> k;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "Sectioned key-value config file");
  cmd->add_option("--out", f.out, "Run directory (default: $SCLQA_OUT or ./sclqa_out)");
  cmd->add_option("--data", f.data, "Labeled record file (overrides data.input)");
  cmd->add_option("--method", f.method, "scl, ft or both")->check(CLI::IsMember({"scl", "ft", "both"}));
  cmd->add_option("--seed", f.seed, "Run seed");
  cmd->add_option("--target-tpr", f.target_tpr, "Detection target TPR");
  cmd->add_option("--k", f.k, "Number of clusters for discovery (0: one per unknown intent)");
}

/// Config file if given, else the config recorded in the run directory's
/// manifest, else defaults; flags are applied last.
sclqa::WorkflowConfig resolve(const Flags& f, bool fresh_run) {
  sclqa::WorkflowConfig cfg;
  const std::string out = !f.out.empty() ? f.out : std::string();
  if (!f.config.empty()) {
    cfg = sclqa::load_config(f.config);
  } else {
    const sclqa::fs::path root = !out.empty() ? sclqa::fs::path(out) : sclqa::fs::path(sclqa::default_out_root());
    if (!fresh_run && sclqa::fs::exists(sclqa::manifest_path(root))) cfg = sclqa::config_from_manifest(root);
  }
  if (!out.empty()) cfg.out = out;
  if (cfg.out.empty()) cfg.out = sclqa::default_out_root();
  if (!f.data.empty()) {
    cfg.data = {};
    cfg.data.input = f.data;
  }
  if (!f.method.empty()) cfg.methods = sclqa::parse_methods(f.method);
  if (f.seed) cfg.seed = *f.seed;
  if (f.target_tpr) cfg.target_tpr = *f.target_tpr;
  if (f.k) cfg.k = *f.k;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive intent classification, OOD detection, discovery and continual learning"};
  app.require_subcommand(1);
  Flags flags;
  auto* workflow = app.add_subcommand("workflow", "Run every stage in order, then the report");
  add_common(workflow, flags);
  std::vector<std::pair<CLI::App*, sclqa::Stage>> stage_cmds;
  const std::pair<sclqa::Stage, const char*> stage_help[] = {
      {sclqa::Stage::Pretrain, "Ingest, segment and split the data, then pre-train the encoder"},
      {sclqa::Stage::Classify, "T-1: nearest-centroid classification of Test I known intents"},
      {sclqa::Stage::Detect, "T-2: OOD scoring, threshold calibration and partition of Test I"},
      {sclqa::Stage::Discover, "T-3: KMeans over detected-OOD samples and pseudo-labeling"},
      {sclqa::Stage::Continual, "T-4: replay retraining over the expanded label set"},
      {sclqa::Stage::Evaluate, "T-4: Test II evaluation overall, on IND and on OOD"},
  };
  for (const auto& [stage, help] : stage_help) {
    auto* cmd = app.add_subcommand(sclqa::to_string(stage), help);
    add_common(cmd, flags);
    stage_cmds.emplace_back(cmd, stage);
  }
  auto* report = app.add_subcommand("report", "Render the task tables and embedding dump of a run directory");
  report->add_option("--out", flags.out, "Run directory (default: $SCLQA_OUT or ./sclqa_out)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (workflow->parsed()) {
      return sclqa::cmd_workflow(resolve(flags, true), std::cout, std::cerr);
    }
    for (const auto& [cmd, stage] : stage_cmds) {
      if (cmd->parsed()) {
        return sclqa::cmd_stage(stage, resolve(flags, stage == sclqa::Stage::Pretrain), std::cout, std::cerr);
      }
    }
    const std::string root = flags.out.empty() ? sclqa::default_out_root() : flags.out;
    bool csv = true, txt = true;
    if (sclqa::fs::exists(sclqa::manifest_path(root))) {
      try {
        const auto cfg = sclqa::config_from_manifest(root);
        csv = cfg.emit_csv;
        txt = cfg.emit_txt;
      } catch (const std::exception&) {
        // The report command itself reports the corrupt manifest.
      }
    }
    return sclqa::cmd_report(root, csv, txt, std::cout, std::cerr);
  } catch (const sclqa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return sclqa::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return sclqa::kExitConfig;
  }
}
