/*
 * Copyright 2026 The fsvlm Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Command-line front end: data preparation, single-cell training and
// evaluation, standalone diagnostics, and the full resumable grid.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "fsvlm/adapt.hpp"
#include "fsvlm/diagnostics.hpp"
#include "fsvlm/error.hpp"
#include "fsvlm/runner.hpp"
#include "fsvlm/synthetic.hpp"

namespace {

using namespace fsvlm;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
};

void info(const std::string& msg) { std::cerr << "[fsvlm] " << msg << "\n"; }

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

ExperimentConfig load_config(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config is required for this command");
  ExperimentConfig cfg = ExperimentConfig::load(g.config);
  if (g.seed) cfg.master_seed = *g.seed;
  if (!g.out.empty()) cfg.output = g.out;
  return cfg;
}

int cmd_synthesize(const Globals& g, const SyntheticOptions& opt_in) {
  if (g.out.empty()) throw ConfigError("--out is required");
  SyntheticOptions opt = opt_in;
  if (g.seed) opt.seed = *g.seed;
  const std::filesystem::path root = g.out;
  const auto ds = generate_synthetic(root, opt);
  const auto prep = prepare_dataset(read_annotations(ds.annotations, ds.classes), ds.slide_dir, root / "dataset",
                                    ds.classes);
  for (const auto& r : prep.rejected) info("rejected " + r);
  const Json cfg = synthetic_experiment_json();
  write_text(root / "experiment.json", cfg.dump(2) + "\n");
  info("wrote " + std::to_string(prep.manifest.patches().size()) + " patches and " + (root / "experiment.json").string());
  return 0;
}

int cmd_prepare(const Globals& g, const std::string& annotations, const std::string& slides,
                const std::string& classes, int expansion) {
  if (g.out.empty()) throw ConfigError("--out is required");
  const auto names = split_csv(classes);
  const auto prep = prepare_dataset(read_annotations(annotations, names), slides, g.out, names, expansion);
  for (const auto& r : prep.rejected) info("rejected " + r);
  info("extracted " + std::to_string(prep.manifest.patches().size()) + " patches, rejected " +
       std::to_string(prep.rejected.size()));
  return 0;
}

int cmd_plan(const Globals& g, std::string manifest, std::string split, int runs, int superset) {
  std::uint64_t seed = g.seed.value_or(0);
  if (!g.config.empty()) {
    const auto cfg = load_config(g);
    if (manifest.empty()) manifest = cfg.manifest.string();
    if (split.empty()) split = cfg.split.string();
    if (runs <= 0) runs = cfg.n_runs;
    if (superset <= 0) superset = cfg.effective_superset();
    seed = cfg.master_seed;
  }
  if (manifest.empty() || split.empty()) throw ConfigError("--manifest and --split (or --config) are required");
  if (runs <= 0) runs = 10;
  if (superset <= 0) superset = 32;
  const auto plans = plan_runs(load_manifest(manifest), load_split(split), runs, superset, seed);
  const std::filesystem::path out = g.out.empty() ? std::filesystem::path("plans.jsonl") : std::filesystem::path(g.out);
  save_plans(out, plans);
  info("wrote " + std::to_string(plans.size()) + " run plans to " + out.string());
  return 0;
}

int cmd_train(const Globals& g, const std::string& backbone, const std::string& strategy, int shots, int run) {
  ExperimentConfig cfg = load_config(g);
  ExperimentData data = load_experiment_data(cfg);
  const DualEncoder base = load_backbone(backbone, cfg.cache_dir.empty() ? default_cache_dir() : cfg.cache_dir);
  const Strategy s = parse_strategy(strategy);
  if (run < 0 || run >= static_cast<int>(data.plans.size())) throw RangeError("--run out of range");
  const auto& plan = data.plans[static_cast<std::size_t>(run)];
  const std::string cell = cell_name(backbone, strategy, shots);
  AdaptedModel model = adapt(base, cfg.adaptation_for(s), data.prompts, derive_seed(plan.seed, cell));
  TrainSchedule sched = cfg.schedule_for(s);
  sched.augmentation_seed = derive_seed(plan.seed, "augment:" + cell);
  const auto history = train(model, data.training_set(plan, shots), data.validation, sched);
  const auto dir = cfg.output / "checkpoints" / cell / ("run" + std::to_string(run));
  const std::string fp = cell_fingerprint(cfg, data, backbone, strategy, shots, run);
  save_checkpoint(dir / "delta.fsvt", model, fp);
  write_text(dir / "history.json", history.to_json().dump(2) + "\n");
  info("best epoch " + std::to_string(history.best_epoch) + ", stopped at " + std::to_string(history.stopped_epoch) +
       "; checkpoint " + (dir / "delta.fsvt").string());
  return 0;
}

int cmd_evaluate(const Globals& g, const std::string& backbone, const std::string& checkpoint) {
  ExperimentConfig cfg = load_config(g);
  ExperimentData data = load_experiment_data(cfg);
  DualEncoder base = load_backbone(backbone, cfg.cache_dir.empty() ? default_cache_dir() : cfg.cache_dir);
  AdaptedModel model;
  if (checkpoint.empty()) {
    model.encoder = std::move(base);
    model.prompts = data.prompts;
  } else {
    model = load_checkpoint(checkpoint, std::move(base), data.prompts);
  }
  const Prediction pred = predict(model, data.validation);
  const EvalResult eval = evaluate(pred.classification.probabilities, pred.classification.predictions,
                                   data.validation.labels, data.manifest.classes());
  const auto dir = g.out.empty() ? cfg.output / "evaluation" : std::filesystem::path(g.out);
  write_text(dir / "eval.json", eval.to_json().dump(2) + "\n");
  write_roc_jsonl(dir / "roc.jsonl", eval);
  write_embeddings(dir / "images", pred.image_embeddings);
  write_embeddings(dir / "texts", pred.text_embeddings);
  std::cout << "accuracy " << eval.accuracy << "\nmacro_auc " << eval.macro_auc << "\nmacro_f1 " << eval.macro_f1
            << "\n";
  return 0;
}

int cmd_diagnose(const Globals& g, const std::string& images, const std::string& texts, bool strict,
                 bool hide_text) {
  if (g.out.empty()) throw ConfigError("--out is required");
  const auto img = read_embeddings(images);
  const auto txt = read_embeddings(texts);
  if (img.modality != Modality::kImage || txt.modality != Modality::kText) {
    throw ValidationError("--images must hold image embeddings and --texts text embeddings");
  }
  UmapParams params;
  if (g.seed) params.seed = *g.seed;
  DiagnosticsReport report = diagnose(img, txt, params);
  const std::filesystem::path out = g.out;
  Json provenance{{"images", images}, {"texts", texts}};
  if (strict) provenance["similarity_gap_strict"] = similarity_gap(img.vectors, txt.vectors, img.labels, true);
  write_diagnostics(out / "diagnostics.json", report, provenance);
  for (const auto& w : export_density_figure(out / "density.svg", report.projection, report.labels, report.modality,
                                             txt.class_names, {"embedding density", "", !hide_text, 80})) {
    info("warning: " + w);
  }
  std::cout << report.summary_json().dump(2) << "\n";
  return 0;
}

int render(const ExperimentConfig& cfg, const std::vector<RunRecord>& records, const ResultTable& table) {
  const auto summary = render_report(table, records, report_options(cfg, records));
  for (const auto& w : summary.warnings) info("warning: " + w);
  info("report written to " + (cfg.output / "report").string() + " (" + std::to_string(summary.files.size()) +
       " files)");
  return 0;
}

int cmd_report(const Globals& g) {
  const ExperimentConfig cfg = load_config(g);
  const auto records = RecordStore(cfg.output / "records.jsonl").read_all();
  return render(cfg, records, aggregate(records));
}

int cmd_run_grid(const Globals& g) {
  const ExperimentConfig cfg = load_config(g);
  GridOptions opt;
  opt.resume = g.resume;
  opt.log = info;
  const auto outcome = run_grid(cfg, opt);
  info("computed " + std::to_string(outcome.computed) + ", reused " + std::to_string(outcome.skipped) + ", failed " +
       std::to_string(outcome.failed));
  return render(cfg, outcome.records, outcome.table);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot adaptation benchmark for contrastive vision-language models"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "Override the master seed");
  app.add_option("--out", g.out, "Output directory (or file for plan-splits)");
  app.add_flag("--resume", g.resume, "Reuse matching records in an existing result store");
  app.fallthrough();

  SyntheticOptions syn;
  auto* synthesize = app.add_subcommand("synthesize", "Write a synthetic separable dataset and example config");
  synthesize->add_option("--train-per-class", syn.train_per_class_per_wsi, "Patches per class per training slide");
  synthesize->add_option("--val-per-class", syn.val_per_class_per_wsi, "Patches per class per validation slide");
  synthesize->add_option("--separation", syn.color_separation, "Color amplitude separating the classes");

  std::string annotations, slides, classes;
  int expansion = kDefaultExpansion;
  auto* prepare = app.add_subcommand("prepare", "Extract square glomerulus patches from slides");
  prepare->add_option("--annotations", annotations, "Annotation JSONL")->required();
  prepare->add_option("--slides", slides, "Directory of <wsi_id>.png slides")->required();
  prepare->add_option("--classes", classes, "Comma-separated class list")->required();
  prepare->add_option("--expansion", expansion, "Pixels added on every side of the box");

  std::string manifest, split;
  int runs = 0, superset = 0;
  auto* plan = app.add_subcommand("plan-splits", "Sample nested shot supersets for every run");
  plan->add_option("--manifest", manifest);
  plan->add_option("--split", split);
  plan->add_option("--runs", runs);
  plan->add_option("--superset", superset);

  std::string backbone = "toy", strategy = "vanilla", checkpoint;
  int shots = 1, run = 0;
  auto* train_cmd = app.add_subcommand("train", "Adapt and train one (backbone, strategy, shots, run) cell");
  train_cmd->add_option("--backbone", backbone);
  train_cmd->add_option("--strategy", strategy);
  train_cmd->add_option("--shots", shots);
  train_cmd->add_option("--run", run);

  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate zero-shot or a strategy checkpoint on the validation set");
  eval_cmd->add_option("--backbone", backbone);
  eval_cmd->add_option("--checkpoint", checkpoint, "Strategy delta written by train");

  std::string images, texts;
  bool strict = false, hide_text = false;
  auto* diag = app.add_subcommand("diagnose", "Alignment, gap, ICD, silhouette and density figure from embeddings");
  diag->add_option("--images", images)->required();
  diag->add_option("--texts", texts)->required();
  diag->add_flag("--strict", strict, "Also report the gap without same-class negatives");
  diag->add_flag("--no-text", hide_text, "Omit text markers from the figure");

  auto* report = app.add_subcommand("report", "Render tables and figures from the result store");
  auto* grid = app.add_subcommand("run-grid", "Run the full grid and render the report");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed;
  try {
    if (*synthesize) return cmd_synthesize(g, syn);
    if (*prepare) return cmd_prepare(g, annotations, slides, classes, expansion);
    if (*plan) return cmd_plan(g, manifest, split, runs, superset);
    if (*train_cmd) return cmd_train(g, backbone, strategy, shots, run);
    if (*eval_cmd) return cmd_evaluate(g, backbone, checkpoint);
    if (*diag) return cmd_diagnose(g, images, texts, strict, hide_text);
    if (*report) return cmd_report(g);
    if (*grid) return cmd_run_grid(g);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
