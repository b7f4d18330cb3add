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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fsvlm/error.hpp"
#include "fsvlm/runner.hpp"
#include "fsvlm/synthetic.hpp"

namespace fsvlm {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunRecord fake_record(const std::string& backbone, const std::string& strategy, int shots, int run, double acc) {
  RunRecord r;
  r.backbone = backbone;
  r.strategy = strategy;
  r.shots = shots;
  r.run_id = run;
  nn::Matrix p(4, 2);
  p << 0.9, 0.1, 0.3, 0.7, 0.6, 0.4, 0.2, 0.8;
  const std::vector<int> y{0, 1, 1, 0};
  const std::vector<int> pred{0, 1, 0, 1};
  r.eval = evaluate(p, pred, y, {"A", "B"});
  r.eval.accuracy = acc;
  r.diagnostics.alignment = acc / 2;
  r.diagnostics.silhouette = acc / 3;
  r.artifacts = "emb/" + cell_name(backbone, strategy, shots) + "/run" + std::to_string(run);
  return r;
}

TEST(Summarize, SampleStandardDeviation) {
  const auto s = summarize({0.5, 0.7});
  EXPECT_DOUBLE_EQ(s.mean, 0.6);
  EXPECT_NEAR(s.sd, 0.1414, 1e-4);
  EXPECT_EQ(s.n, 2);
  const auto one = summarize({0.3});
  EXPECT_EQ(one.sd, 0.0);
  EXPECT_TRUE(one.single);
  EXPECT_EQ(summarize({0.4, 0.4, 0.4}).sd, 0.0);
}

TEST(Aggregate, SkipsFailedRecordsAndMapsZeroShot) {
  std::vector<RunRecord> recs{fake_record("toy", kZeroShot, 0, 0, 0.2), fake_record("toy", kZeroShot, 0, 1, 0.2),
                              fake_record("toy", "lora", 4, 0, 0.5), fake_record("toy", "lora", 4, 1, 0.7),
                              fake_record("toy", "lora", 4, 2, 0.0)};
  recs.back().status = "error";
  const auto t = aggregate(recs);
  const auto* c = t.find("toy", "lora", 4, "accuracy");
  ASSERT_NE(c, nullptr);
  EXPECT_DOUBLE_EQ(c->mean, 0.6);
  EXPECT_EQ(c->n, 2);
  const auto* z = t.find("toy", "adapter", 0, "accuracy");
  ASSERT_NE(z, nullptr);
  EXPECT_EQ(z->sd, 0.0);
  EXPECT_EQ(t.find("toy", "lora", 8, "accuracy"), nullptr);
}

TEST(BestAucRecord, ArgmaxFirstOnTies) {
  std::vector<RunRecord> recs{fake_record("t", "v", 1, 0, 0), fake_record("t", "v", 1, 1, 0),
                              fake_record("t", "v", 1, 2, 0)};
  recs[0].eval.macro_auc = 0.5;
  recs[1].eval.macro_auc = 0.9;
  recs[2].eval.macro_auc = 0.9;
  EXPECT_EQ(best_auc_record(recs, {0, 1, 2}), 1u);
  recs[1].status = "error";
  EXPECT_EQ(best_auc_record(recs, {0, 1, 2}), 2u);
  EXPECT_FALSE(best_auc_record(recs, {}).has_value());
}

TEST(RunRecord, JsonRoundTrip) {
  auto r = fake_record("toy", "adapter", 2, 3, 0.8);
  r.history.train_loss = {1.0, 0.5};
  const auto back = RunRecord::from_json(r.to_json());
  EXPECT_EQ(back.to_json(), r.to_json());
  EXPECT_EQ(back.key(), r.key());
}

TEST(Config, RoundTripUnknownKeysAndValidation) {
  ExperimentConfig c;
  c.manifest = "/data/m.jsonl";
  c.split = "/data/s.json";
  c.output = "/data/out";
  const auto back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(experiment_fingerprint(back), experiment_fingerprint(c));
  Json j = c.to_json();
  j["n_rusn"] = 3;
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
  c.shots = {0, 64};
  c.superset_size = 32;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, FingerprintIgnoresOutputLocation) {
  ExperimentConfig a;
  ExperimentConfig b = a;
  b.output = "/elsewhere";
  EXPECT_EQ(experiment_fingerprint(a), experiment_fingerprint(b));
  b.master_seed = 1;
  EXPECT_NE(experiment_fingerprint(a), experiment_fingerprint(b));
}

TEST(Report, EmptyRecordSetIsAnError) {
  ReportOptions o;
  o.report_dir = fs::temp_directory_path() / "fsvlm_empty_report";
  fs::remove_all(o.report_dir);
  EXPECT_THROW(render_report(ResultTable{}, {}, o), InsufficientDataError);
  EXPECT_FALSE(fs::exists(o.report_dir));
}

TEST(Report, TableShapeForThreeBackbones) {
  const std::vector<std::string> backbones{"a", "b", "c"};
  const std::vector<std::string> strategies{"vanilla", "lora", "adapter", "classifier"};
  const std::vector<int> shots{0, 1, 2, 4, 8, 16, 32};
  std::vector<RunRecord> recs;
  for (const auto& b : backbones) {
    for (int r = 0; r < 2; ++r) recs.push_back(fake_record(b, kZeroShot, 0, r, 0.2));
    for (const auto& s : strategies) {
      for (int k : shots) {
        if (k == 0) continue;
        for (int r = 0; r < 2; ++r) recs.push_back(fake_record(b, s, k, r, 0.5 + 0.01 * k + 0.1 * r));
      }
    }
  }
  ReportOptions o;
  o.output_root = fs::temp_directory_path() / "fsvlm_shape_report";
  o.report_dir = o.output_root / "report";
  o.fingerprint = "abc";
  o.backbones = backbones;
  o.strategies = strategies;
  o.shots = shots;
  o.class_names = {"A", "B"};
  fs::remove_all(o.output_root);
  render_report(aggregate(recs), recs, o);

  std::istringstream tsv(slurp(o.report_dir / "table1.tsv"));
  std::string line;
  int rows = 0;
  std::size_t header_cols = 0;
  while (std::getline(tsv, line)) {
    if (line.rfind("metric\t", 0) == 0 || line.empty() || line[0] == '#') {
      if (line.rfind("metric\t", 0) == 0) header_cols = std::count(line.begin(), line.end(), '\t') + 1;
      continue;
    }
    if (line.rfind("accuracy\t", 0) == 0) {
      ++rows;
      EXPECT_EQ(static_cast<std::size_t>(std::count(line.begin(), line.end(), '\t') + 1), header_cols);
      EXPECT_NE(line.find("±"), std::string::npos);
    }
  }
  EXPECT_EQ(rows, 12);
  EXPECT_EQ(header_cols, 3u + 7u);
  for (const char* f : {"per_class_auc.tsv", "roc_a_lora.svg", "boxplot_c_vanilla.svg", "curves_b.svg",
                        "projection_a.svg", "table2.tsv"}) {
    EXPECT_TRUE(fs::exists(o.report_dir / f)) << f;
  }
  fs::remove_all(o.output_root);
}

class GridTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "fsvlm_grid_test";
    fs::remove_all(root_);
    SyntheticOptions opt;
    opt.train_wsis = 2;
    opt.val_wsis = 1;
    opt.train_per_class_per_wsi = 2;
    opt.val_per_class_per_wsi = 2;
    opt.cell = 120;
    const auto ds = generate_synthetic(root_, opt);
    prepare_dataset(read_annotations(ds.annotations, ds.classes), ds.slide_dir, root_ / "dataset", ds.classes);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static ExperimentConfig config(const std::string& out) {
    Json j = synthetic_experiment_json();
    j["strategies"] = {"lora", "classifier"};
    j["shots"] = {0, 1, 2, 4};
    j["n_runs"] = 2;
    j["schedule"]["max_epochs"] = 2;
    j["schedule"]["warmup_steps"] = 1;
    j["projection"] = {{"n_epochs", 20}};
    j["paths"]["output"] = out;
    return ExperimentConfig::from_json(j, root_);
  }

  static fs::path root_;
};

fs::path GridTest::root_;

TEST_F(GridTest, CardinalityResumeAndFingerprint) {
  const auto cfg = config("results");
  const auto first = run_grid(cfg);
  EXPECT_EQ(first.records.size(), 14u);
  EXPECT_EQ(first.computed, 14);
  EXPECT_EQ(first.failed, 0);
  int zero = 0;
  for (const auto& r : first.records) zero += r.strategy == kZeroShot ? 1 : 0;
  EXPECT_EQ(zero, 2);
  // Zero-shot is evaluated once per backbone, so every run agrees.
  EXPECT_EQ(first.table.find("toy", "lora", 0, "accuracy")->sd, 0.0);
  EXPECT_TRUE(fs::exists(cfg.output / "emb" / "toy__lora__k4" / "run1" / "diagnostics.json"));

  EXPECT_THROW(run_grid(cfg), ConfigError);

  const std::string before = slurp(cfg.output / "records.jsonl");
  GridOptions resume;
  resume.resume = true;
  const auto second = run_grid(cfg, resume);
  EXPECT_EQ(second.computed, 0);
  EXPECT_EQ(second.skipped, 14);
  EXPECT_EQ(slurp(cfg.output / "records.jsonl"), before);
  ASSERT_EQ(second.table.cells.size(), first.table.cells.size());
  for (const auto& [key, metrics] : first.table.cells) {
    for (const auto& [m, s] : metrics) {
      const auto& o = second.table.cells.at(key).at(m);
      EXPECT_EQ(o.mean, s.mean);
      EXPECT_EQ(o.sd, s.sd);
    }
  }

  auto changed = cfg;
  changed.schedule.max_epochs = 3;
  EXPECT_THROW(run_grid(changed, resume), ConfigError);
}

TEST_F(GridTest, ResumeFillsInMissingCells) {
  const auto cfg = config("partial");
  run_grid(cfg);
  // Drop the last four records as if the process had been interrupted.
  std::istringstream in(slurp(cfg.output / "records.jsonl"));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  std::ostringstream kept;
  for (std::size_t i = 0; i + 4 < lines.size(); ++i) kept << lines[i] << '\n';
  write_text(cfg.output / "records.jsonl", kept.str());
  GridOptions resume;
  resume.resume = true;
  const auto out = run_grid(cfg, resume);
  EXPECT_EQ(out.computed, 4);
  EXPECT_EQ(out.records.size(), 14u);
}

}  // namespace
}  // namespace fsvlm
