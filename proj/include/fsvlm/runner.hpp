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

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fsvlm/adapt.hpp"
#include "fsvlm/diagnostics.hpp"
#include "fsvlm/metrics.hpp"
#include "fsvlm/sampler.hpp"

namespace fsvlm {

inline constexpr const char* kZeroShot = "zero-shot";

struct ExperimentConfig {
  std::vector<std::string> backbones{"toy"};
  std::vector<Strategy> strategies{Strategy::kVanilla, Strategy::kLora, Strategy::kAdapter, Strategy::kClassifier};
  std::vector<int> shots{0, 1, 2, 4, 8, 16, 32};
  int n_runs = 10;
  std::uint64_t master_seed = 0;
  int superset_size = 0;  // 0 means the largest shot count
  std::string prompt_template{kDefaultPromptTemplate};
  TrainSchedule schedule;
  std::map<Strategy, double> learning_rates{{Strategy::kVanilla, 1e-5},
                                            {Strategy::kLora, 1e-4},
                                            {Strategy::kAdapter, 1e-4},
                                            {Strategy::kClassifier, 1e-4}};
  std::map<Strategy, AdaptationConfig> adaptation;  // missing entries use defaults
  UmapParams projection;
  std::filesystem::path manifest;
  std::filesystem::path split;
  std::filesystem::path output{"results"};
  std::filesystem::path cache_dir;  // empty means FSVLM_CACHE / default
  bool save_checkpoints = false;

  int effective_superset() const;
  AdaptationConfig adaptation_for(Strategy s) const;
  TrainSchedule schedule_for(Strategy s) const;
  // Throws ConfigError on a broken invariant.
  void validate() const;

  Json to_json() const;
  // Relative paths resolve against `base_dir`.
  static ExperimentConfig from_json(const Json& j, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
};

// Hex SHA-256 of the canonical (sorted-key) JSON dump.
std::string fingerprint(const Json& j);
std::string experiment_fingerprint(const ExperimentConfig& cfg);

struct RunRecord {
  std::string backbone;
  std::string strategy;  // strategy name, or kZeroShot for shot 0
  int shots = 0;
  int run_id = 0;
  std::uint64_t seed = 0;
  std::string status = "ok";
  std::string error;
  EvalResult eval;
  DiagnosticsReport diagnostics;  // scalars only; projections live in the run directory
  TrainHistory history;
  double wall_time = 0;
  std::string fingerprint;
  std::string artifacts;  // run directory relative to the output root

  bool ok() const { return status == "ok"; }
  std::string key() const;
  Json to_json() const;
  static RunRecord from_json(const Json& j);
};

// Append-only JSONL store. Appends are serialized and flushed per record.
class RecordStore {
 public:
  explicit RecordStore(std::filesystem::path path);
  const std::filesystem::path& path() const { return path_; }
  std::vector<RunRecord> read_all() const;
  void append(const RunRecord& record);

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
};

struct CellStats {
  double mean = 0;
  double sd = 0;
  int n = 0;
  bool single = false;  // n == 1; sd reported as 0
};
CellStats summarize(const std::vector<double>& values);

inline const std::vector<std::string>& table_metrics() {
  static const std::vector<std::string> m{"accuracy", "macro_auc", "macro_f1", "alignment",
                                          "similarity_gap", "intra_class_distance", "silhouette"};
  return m;
}

struct ResultTable {
  // (backbone, strategy, shots) -> metric -> stats. Shot 0 is stored under
  // kZeroShot and repeated per strategy only when rendered.
  std::map<std::tuple<std::string, std::string, int>, std::map<std::string, CellStats>> cells;

  const CellStats* find(const std::string& backbone, const std::string& strategy, int shots,
                        const std::string& metric) const;
};

// Mean and sample SD over the successful records of each cell.
ResultTable aggregate(const std::vector<RunRecord>& records);

struct ExperimentData {
  DatasetManifest manifest;
  SplitManifest split;
  PromptSet prompts;
  std::vector<ShotPlan> plans;
  LabeledImages validation;
  std::map<std::string, Image> image_cache;

  const Image& image(const std::string& id);
  LabeledImages training_set(const ShotPlan& plan, int shots);
};

ExperimentData load_experiment_data(const ExperimentConfig& cfg);

std::string cell_name(const std::string& backbone, const std::string& strategy, int shots);

// Runs one grid cell: adapt + train (shots > 0), evaluate, diagnose and
// dump artifacts under `out_root / record.artifacts`. Errors propagate.
RunRecord run_cell(const ExperimentConfig& cfg, ExperimentData& data, const DualEncoder& base,
                   const std::string& strategy, int shots, int run_id, const std::filesystem::path& out_root);

std::string cell_fingerprint(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& backbone,
                             const std::string& strategy, int shots, int run_id);

struct GridOptions {
  bool resume = false;
  std::function<void(const std::string&)> log;
};

struct GridOutcome {
  ResultTable table;
  std::vector<RunRecord> records;
  int computed = 0;
  int skipped = 0;
  int failed = 0;
};

// Records go to <output>/records.jsonl. Without `resume` an existing store
// is an error; with it, records whose fingerprint matches are reused and a
// mismatch raises ConfigError.
GridOutcome run_grid(const ExperimentConfig& cfg, const GridOptions& options = {});

struct ReportOptions {
  std::filesystem::path output_root;  // where run artifacts live
  std::filesystem::path report_dir;
  std::string fingerprint;
  std::vector<std::string> backbones;
  std::vector<std::string> strategies;
  std::vector<int> shots;
  std::vector<std::string> class_names;
};

struct ReportSummary {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> warnings;
};

// Writes tables, ROC grids, per-class AUC boxplots, alignment/gap curves
// and projection panels. An empty record set throws before anything is
// written; output is staged and moved into place on success.
ReportSummary render_report(const ResultTable& table, const std::vector<RunRecord>& records,
                            const ReportOptions& options);
ReportOptions report_options(const ExperimentConfig& cfg, const std::vector<RunRecord>& records);

// Index of the highest-AUC successful record (first on ties).
std::optional<std::size_t> best_auc_record(const std::vector<RunRecord>& records,
                                           const std::vector<std::size_t>& candidates);

}  // namespace fsvlm
