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

// Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
// non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fsvlm/adapt.hpp"
#include "fsvlm/diagnostics.hpp"
#include "fsvlm/error.hpp"
#include "fsvlm/metrics.hpp"
#include "fsvlm/runner.hpp"
#include "fsvlm/synthetic.hpp"
#include "oracles.hpp"

#ifndef FSVLM_CLI_PATH
#define FSVLM_CLI_PATH "fsvlm"
#endif

namespace {

using namespace fsvlm;
namespace fs = std::filesystem;
using nn::Matrix;
using Clock = std::chrono::steady_clock;

struct Outcome {
  enum Kind { kPass, kFail, kSkip } kind = kPass;
  std::vector<std::string> notes;
  void check(bool ok, const std::string& what) {
    if (!ok) {
      kind = kFail;
      notes.push_back("failed: " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Matrix random_unit_rows(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < d; ++k) m(i, k) = g(rng);
    m.row(i).normalize();
  }
  return m;
}

// 1 ------------------------------------------------------------------------

Outcome diagnostic_oracles() {
  Outcome o;
  std::mt19937_64 rng(2024);
  const Matrix img = random_unit_rows(50, 32, rng);
  const Matrix txt = random_unit_rows(5, 32, rng);
  std::vector<int> y(50);
  for (int i = 0; i < 50; ++i) y[i] = i % 5;

  const auto t0 = Clock::now();
  const double a = alignment(img, txt, y);
  const double g = similarity_gap(img, txt, y);
  const double s = silhouette_cosine(img, y);
  const Matrix proj = project_2d(img);
  const double icd = intra_class_distance(proj, y);
  const double elapsed = seconds_since(t0);

  const double da = std::abs(a - oracle::alignment(img, txt, y));
  const double dg = std::abs(g - oracle::similarity_gap(img, txt, y));
  const double ds = std::abs(s - oracle::silhouette_cosine(img, y));
  const double di = std::abs(icd - oracle::intra_class_distance(proj, y));
  o.check(da < 1e-10, "alignment |d| = " + fmt("%.3g", da));
  o.check(dg < 1e-10, "similarity gap |d| = " + fmt("%.3g", dg));
  o.check(ds < 1e-10, "silhouette |d| = " + fmt("%.3g", ds));
  o.check(di < 1e-10, "intra-class distance |d| = " + fmt("%.3g", di));
  o.check(elapsed < 1.0, "runtime " + fmt("%.3f s", elapsed));
  o.note("max |d| " + fmt("%.2g", std::max({da, dg, ds, di})) + ", metrics + projection in " +
         fmt("%.3f s", elapsed));
  return o;
}

// 2 ------------------------------------------------------------------------

Outcome metric_oracles() {
  Outcome o;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0, 1);
  const int n = 100, c = 5;
  Matrix p(n, c);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    y[i] = static_cast<int>(rng() % c);
    double sum = 0;
    for (int k = 0; k < c; ++k) sum += (p(i, k) = u(rng));
    p.row(i) /= sum;
  }
  const auto res = macro_auc(p, y);
  double worst_auc = 0, worst_area = 0, macro = 0;
  int counted = 0;
  for (int k = 0; k < c; ++k) {
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    auto flags = std::make_unique<bool[]>(n);
    for (int i = 0; i < n; ++i) {
      s[i] = p(i, k);
      pos[i] = flags[i] = y[i] == k;
    }
    const double want = oracle::pairwise_auc(s, pos);
    if (!res.per_class[k]) {
      o.check(false, "class " + std::to_string(k) + " has no AUC");
      continue;
    }
    worst_auc = std::max(worst_auc, std::abs(*res.per_class[k] - want));
    const auto pts = roc_points(s, {flags.get(), static_cast<std::size_t>(n)});
    worst_area = std::max(worst_area, std::abs(trapezoid_area(pts) - *res.per_class[k]));
    macro += want;
    ++counted;
  }
  const double dm = std::abs(res.macro - macro / counted);
  o.check(std::max(worst_auc, dm) < 1e-12, "AUC vs pairwise |d| = " + fmt("%.3g", std::max(worst_auc, dm)));
  o.check(worst_area < 1e-9, "trapezoid vs AUC |d| = " + fmt("%.3g", worst_area));
  o.note("AUC |d| " + fmt("%.2g", std::max(worst_auc, dm)) + ", trapezoid |d| " + fmt("%.2g", worst_area));
  return o;
}

// 3 ------------------------------------------------------------------------

Outcome sampler_properties() {
  Outcome o;
  std::mt19937_64 rng(31337);
  const std::vector<int> ks{0, 1, 2, 4, 8, 16, 32};
  int disjoint_cases = 0, violations_built = 0, violations_caught = 0;
  const auto t0 = Clock::now();
  for (int trial = 0; trial < 1000 && o.kind == Outcome::kPass; ++trial) {
    const int n_classes = 1 + static_cast<int>(rng() % 5);
    const int train_wsis = 1 + static_cast<int>(rng() % 4);
    const int val_wsis = 1 + static_cast<int>(rng() % 2);
    const int n_runs = 1 + static_cast<int>(rng() % 10);
    const std::uint64_t seed = rng();
    std::vector<std::string> classes;
    for (int c = 0; c < n_classes; ++c) classes.push_back("class" + std::to_string(c));
    SplitManifest split;
    std::set<std::string> wsis;
    for (int w = 0; w < train_wsis + val_wsis; ++w) {
      const std::string id = "wsi" + std::to_string(w);
      wsis.insert(id);
      (w < train_wsis ? split.train_wsi_ids : split.val_wsi_ids).insert(id);
    }
    std::vector<PatchRecord> patches;
    std::map<std::string, int> pool_size;
    int serial = 0;
    for (const auto& c : classes) {
      const int pool = 32 + static_cast<int>(rng() % 369);
      pool_size[c] = pool;
      for (int i = 0; i < pool; ++i) {
        const std::string wsi = "wsi" + std::to_string(rng() % train_wsis);
        patches.push_back({"p" + std::to_string(serial++), wsi, c, "x.png", {}});
      }
      for (int w = 0; w < val_wsis; ++w) {
        const int nv = 1 + static_cast<int>(rng() % 3);
        for (int i = 0; i < nv; ++i) {
          patches.push_back({"p" + std::to_string(serial++), "wsi" + std::to_string(train_wsis + w), c, "x.png", {}});
        }
      }
    }
    const DatasetManifest m(classes, wsis, patches);

    const auto plans = plan_runs(m, split, n_runs, 32, seed);
    o.check(plans == plan_runs(m, split, n_runs, 32, seed), "determinism (trial " + std::to_string(trial) + ")");

    for (const auto& plan : plans) {
      std::vector<std::vector<ClassShots>> by_k;
      for (int k : ks) by_k.push_back(shot_subset(plan, k));
      for (std::size_t a = 0; a < ks.size(); ++a) {
        for (std::size_t c = 0; c < classes.size(); ++c) {
          const auto& ids = by_k[a][c].ids;
          const bool balanced = ids.size() == static_cast<std::size_t>(ks[a]) &&
                                std::set<std::string>(ids.begin(), ids.end()).size() == ids.size();
          o.check(balanced, "class balance at k=" + std::to_string(ks[a]));
          for (const auto& id : ids) {
            o.check(m.patch(id).label == classes[c] && split.train_wsi_ids.contains(m.patch(id).wsi_id),
                    "shot drawn from the wrong class or slide");
          }
          for (std::size_t b = a + 1; b < ks.size(); ++b) {
            const auto& big = by_k[b][c].ids;
            o.check(std::equal(ids.begin(), ids.end(), big.begin()),
                    "prefix nesting k=" + std::to_string(ks[a]) + " in k=" + std::to_string(ks[b]));
          }
        }
      }
    }

    for (const auto& c : classes) {
      if (pool_size[c] < n_runs * 32) continue;
      ++disjoint_cases;
      std::set<std::string> seen;
      for (const auto& plan : plans) {
        for (const auto& cs : plan.classes) {
          if (cs.label != c) continue;
          for (const auto& id : cs.ids) o.check(seen.insert(id).second, "run supersets overlap for " + c);
        }
      }
    }

    std::vector<std::string> train_ids;
    for (const auto& cs : shot_subset(plans[0], 32)) train_ids.insert(train_ids.end(), cs.ids.begin(), cs.ids.end());
    const auto val_ids = validation_ids(m, split);
    o.check(!check_separation(train_ids, split, val_ids, m).has_value(), "clean split flagged");
    // A validation patch taken from a training slide, and a training patch
    // taken from a validation slide.
    auto leaked_val = val_ids;
    leaked_val.insert(leaked_val.begin() + static_cast<long>(rng() % (leaked_val.size() + 1)),
                      train_ids[rng() % train_ids.size()]);
    auto leaked_train = train_ids;
    leaked_train.push_back(val_ids[rng() % val_ids.size()]);
    for (const auto* pair : {&leaked_val, &leaked_train}) {
      ++violations_built;
      const auto v = pair == &leaked_val ? check_separation(train_ids, split, leaked_val, m)
                                         : check_separation(leaked_train, split, val_ids, m);
      if (v.has_value()) ++violations_caught;
    }
  }
  const double elapsed = seconds_since(t0);
  o.check(violations_caught == violations_built, "separation checker missed " +
                                                     std::to_string(violations_built - violations_caught) +
                                                     " violations");
  o.check(disjoint_cases > 0, "no trial exercised the disjointness rule");
  o.check(elapsed < 30.0, "runtime " + fmt("%.1f s", elapsed));
  o.note("1000 trials, " + std::to_string(disjoint_cases) + " disjointness cases, " +
         std::to_string(violations_caught) + "/" + std::to_string(violations_built) + " violations caught, " +
         fmt("%.2f s", elapsed));
  return o;
}

// 4, 5 ---------------------------------------------------------------------

const std::vector<std::string> kFive{"c0", "c1", "c2", "c3", "c4"};

DualEncoder toy() { return load_backbone("toy", fs::temp_directory_path() / "fsvlm-no-cache"); }

LabeledImages noise_images(int per_class, std::uint64_t seed) {
  Engine rng(seed);
  LabeledImages out;
  for (int c = 0; c < 5; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Image im(16, 16);
      for (auto& px : im.pixels) px = static_cast<std::uint8_t>(40 * c + uniform_index(rng, 60));
      out.images.push_back(std::move(im));
      out.labels.push_back(c);
      out.ids.push_back(std::to_string(c) + "_" + std::to_string(i));
    }
  }
  return out;
}

Matrix logits_of(AdaptedModel& m, const LabeledImages& set) {
  std::vector<const Image*> ptrs;
  for (const auto& im : set.images) ptrs.push_back(&im);
  return m.logits(ptrs, {}).value();
}

AdaptationConfig config_for(Strategy s) {
  AdaptationConfig c;
  c.strategy = s;
  return c;
}

Outcome adaptation_invariants() {
  Outcome o;
  const auto images = noise_images(2, 1);
  AdaptedModel base = adapt(toy(), config_for(Strategy::kVanilla), build_prompts(kFive), 0);
  const Matrix ref = logits_of(base, images);
  for (Strategy s : {Strategy::kLora, Strategy::kAdapter}) {
    AdaptedModel m = adapt(toy(), config_for(s), build_prompts(kFive), 1);
    const double dev = (logits_of(m, images) - ref).cwiseAbs().maxCoeff();
    o.check(dev < 1e-6, strategy_name(s) + " identity at init, deviation " + fmt("%.3g", dev));
  }

  TrainSchedule five;
  five.max_epochs = 5;
  five.warmup_steps = 1;
  five.base_lr = 1e-2;
  five.patience = 100;
  const auto train_set = noise_images(1, 2);
  const auto val_set = noise_images(1, 3);
  for (Strategy s : all_strategies()) {
    AdaptedModel m = adapt(toy(), config_for(s), build_prompts(kFive), 4);
    std::map<std::string, Matrix> before;
    m.visit([&](const std::string& n, const nn::Parameter& p) { before[n] = p.value; });
    const auto names = m.trainable_names();
    const std::set<std::string> trainable(names.begin(), names.end());
    const auto hist = train(m, train_set, val_set, five);
    o.check(hist.steps == 5, strategy_name(s) + " ran " + std::to_string(hist.steps) + " steps");
    int frozen_changed = 0;
    m.visit([&](const std::string& n, const nn::Parameter& p) {
      if (!trainable.contains(n) && !(p.value == before.at(n))) ++frozen_changed;
    });
    o.check(frozen_changed == 0, strategy_name(s) + " freeze audit: " + std::to_string(frozen_changed) +
                                     " frozen tensors changed");
  }

  {
    AdaptedModel m = adapt(toy(), config_for(Strategy::kLora), build_prompts(kFive), 5);
    train(m, noise_images(2, 6), val_set, five);
    int worst = 0;
    auto scan = [&](std::vector<nn::TransformerBlock>& blocks) {
      for (auto& b : blocks) {
        for (const char* t : {"query", "value"}) {
          auto& lin = b.projection(t);
          if (!lin.lora) continue;
          const Matrix d = lin.lora_delta();
          Eigen::JacobiSVD<Matrix> svd(d);
          const auto sv = svd.singularValues();
          int rank = 0;
          for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(0) > 0 && sv(i) > 1e-10 * sv(0) ? 1 : 0;
          worst = std::max(worst, rank);
        }
      }
    };
    scan(m.encoder.vision.blocks);
    scan(m.encoder.text.blocks);
    o.check(worst <= m.config.lora_rank, "LoRA delta rank " + std::to_string(worst));
    o.note("max LoRA delta rank " + std::to_string(worst) + " (r=" + std::to_string(m.config.lora_rank) + ")");
  }

  const std::size_t d = 32, depth = 4, mlp = 4 * d, e = 32, C = 5;
  const AdaptationConfig defaults;
  const std::size_t m_ad = defaults.adapter_bottleneck;
  const std::size_t block = 2 * d + 4 * (d * d + d) + 2 * d + (d * mlp + mlp) + (mlp * d + d);
  const std::map<Strategy, std::size_t> expected{
      {Strategy::kVanilla, 2 * depth * block + (2 * d + d * e) * 2 + 1},
      {Strategy::kLora, 2 * defaults.lora_depth * defaults.lora_targets.size() * defaults.lora_rank * (d + d)},
      {Strategy::kAdapter, 2 * depth * (d * m_ad + m_ad + m_ad * d + d)},
      {Strategy::kClassifier, e * e + e + 2 * e + e * C + C}};
  std::string counts;
  for (const auto& [s, want] : expected) {
    const auto got = adapt(toy(), config_for(s), build_prompts(kFive), 0).trainable_parameter_count();
    o.check(got == want, strategy_name(s) + " has " + std::to_string(got) + " trainable, expected " +
                             std::to_string(want));
    counts += (counts.empty() ? "" : ", ") + strategy_name(s) + " " + std::to_string(got);
  }
  o.note("trainable counts: " + counts);
  return o;
}

Outcome training_contract() {
  Outcome o;
  AdaptedModel m = adapt(toy(), config_for(Strategy::kVanilla), build_prompts(kFive), 0);
  TrainSchedule one;
  one.max_epochs = 1;
  one.warmup_steps = 0;
  const auto h = train(m, noise_images(4, 8), noise_images(1, 9), one);
  o.check(std::abs(h.initial_train_loss - std::log(5.0)) < 0.1, "initial loss " + fmt("%.4f", h.initial_train_loss));

  AdaptedModel c = adapt(toy(), config_for(Strategy::kClassifier), build_prompts(kFive), 0);
  TrainSchedule s;
  s.max_epochs = 100;
  s.warmup_steps = 1;
  s.patience = 7;
  const auto stopped = train(c, noise_images(1, 10), noise_images(1, 11), s,
                             [](AdaptedModel&) { return ValidationOutcome{0.5, 0.2}; });
  o.check(stopped.stopped_epoch == s.patience + 1,
          "constant validation loss stopped at epoch " + std::to_string(stopped.stopped_epoch));
  o.note("initial loss " + fmt("%.4f", h.initial_train_loss) + " (ln 5 = 1.6094); patience 7 stopped at epoch " +
         std::to_string(stopped.stopped_epoch));
  return o;
}

// 6, 7 ---------------------------------------------------------------------

struct GridRun {
  fs::path root;
  ExperimentConfig cfg;
  GridOutcome outcome;
  double seconds = 0;
  bool ok = false;
  std::string error;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome synthetic_end_to_end(GridRun& g) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    g.root = fs::temp_directory_path() / "fsvlm_acceptance";
    fs::remove_all(g.root);
    const auto ds = generate_synthetic(g.root);
    prepare_dataset(read_annotations(ds.annotations, ds.classes), ds.slide_dir, g.root / "dataset", ds.classes);
    const Json j = synthetic_experiment_json();
    write_text(g.root / "experiment.json", j.dump(2) + "\n");
    g.cfg = ExperimentConfig::load(g.root / "experiment.json");
    GridOptions opt;
    opt.log = [](const std::string&) {};
    g.outcome = run_grid(g.cfg, opt);
    g.ok = true;
  } catch (const std::exception& e) {
    g.error = e.what();
    o.check(false, std::string("grid raised: ") + e.what());
    return o;
  }
  g.seconds = seconds_since(t0);
  const auto& recs = g.outcome.records;
  o.check(g.outcome.failed == 0, std::to_string(g.outcome.failed) + " runs failed");

  std::map<int, std::vector<double>> vanilla_acc;
  for (const auto& r : recs) {
    if (!r.ok() || r.backbone != "toy") continue;
    if (r.strategy == "vanilla" || r.strategy == kZeroShot) vanilla_acc[r.shots].push_back(r.eval.accuracy);
  }
  std::string curve;
  double prev = -1;
  bool monotone = true;
  for (int k : g.cfg.shots) {
    const double med = vanilla_acc.count(k) ? median(vanilla_acc[k]) : std::nan("");
    curve += (curve.empty() ? "" : " ") + std::to_string(k) + ":" + fmt("%.3f", med);
    monotone = monotone && med >= prev;
    prev = med;
  }
  o.check(monotone, "(a) vanilla median accuracy not non-decreasing: " + curve);

  const auto* v32 = g.outcome.table.find("toy", "vanilla", 32, "accuracy");
  o.check(v32 && v32->mean >= 0.90, "(b) 32-shot vanilla accuracy " + fmt("%.4f", v32 ? v32->mean : 0.0));

  std::vector<const RunRecord*> zero;
  for (const auto& r : recs) {
    if (r.strategy == kZeroShot) zero.push_back(&r);
  }
  bool identical = !zero.empty();
  for (const auto* r : zero) {
    identical = identical && r->eval.to_json() == zero.front()->eval.to_json() &&
                r->diagnostics.summary_json() == zero.front()->diagnostics.summary_json();
  }
  for (const auto& metric : table_metrics()) {
    const auto* ref = g.outcome.table.find("toy", strategy_name(g.cfg.strategies.front()), 0, metric);
    for (Strategy s : g.cfg.strategies) {
      const auto* c = g.outcome.table.find("toy", strategy_name(s), 0, metric);
      identical = identical && ref && c && c->mean == ref->mean && c->sd == ref->sd;
    }
  }
  o.check(identical, "(c) shot-0 metrics differ across strategies");

  const auto* s0 = g.outcome.table.find("toy", "vanilla", 0, "silhouette");
  std::string sil;
  for (const char* s : {"vanilla", "adapter", "lora"}) {
    const auto* s32 = g.outcome.table.find("toy", s, 32, "silhouette");
    o.check(s0 && s32 && s32->mean > s0->mean, std::string("(d) silhouette did not increase for ") + s);
    if (s32) sil += std::string(" ") + s + " " + fmt("%.3f", s32->mean);
  }
  o.check(g.seconds < 600, "runtime " + fmt("%.1f s", g.seconds));
  o.note(std::to_string(recs.size()) + " records in " + fmt("%.1f s", g.seconds) + "; vanilla median acc " + curve +
         "; 32-shot vanilla mean " + fmt("%.4f", v32 ? v32->mean : 0.0) + "; silhouette k0 " +
         fmt("%.3f", s0 ? s0->mean : 0.0) + " ->" + sil);
  return o;
}

Outcome report_fidelity(GridRun& g) {
  Outcome o;
  if (!g.ok) {
    o.check(false, "synthetic grid did not complete: " + g.error);
    return o;
  }
  const auto opts = report_options(g.cfg, g.outcome.records);
  render_report(g.outcome.table, g.outcome.records, opts);
  const fs::path dir = opts.report_dir;

  std::istringstream t1(slurp(dir / "table1.tsv"));
  int rows = 0;
  bool shaped = true;
  for (std::string line; std::getline(t1, line);) {
    if (line.rfind("metric\t", 0) == 0) {
      shaped = shaped && line.find("\t0-shot\t1-shot\t2-shot\t4-shot\t8-shot\t16-shot\t32-shot") != std::string::npos;
    }
    if (line.rfind("accuracy\t", 0) != 0) continue;
    ++rows;
    const auto cols = std::count(line.begin(), line.end(), '\t') + 1;
    shaped = shaped && cols == 10 && std::count(line.begin(), line.end(), '\xB1') == 7;
  }
  const int want_rows = static_cast<int>(g.cfg.backbones.size() * g.cfg.strategies.size());
  o.check(shaped && rows == want_rows, "table 1 shape (" + std::to_string(rows) + " rows)");

  std::vector<std::string> missing;
  auto need = [&](const std::string& f) {
    if (!fs::exists(dir / f) || fs::file_size(dir / f) == 0) missing.push_back(f);
  };
  for (const char* f : {"table1.md", "table2.tsv", "per_class_auc.tsv", "curves.tsv", "curves_toy.svg",
                        "projection_toy.svg", "best_runs.tsv", "roc_curves.tsv"}) {
    need(f);
  }
  for (Strategy s : g.cfg.strategies) {
    need("roc_toy_" + strategy_name(s) + ".svg");
    need("boxplot_toy_" + strategy_name(s) + ".svg");
  }
  o.check(missing.empty(), "missing report files: " + [&] {
    std::string s;
    for (const auto& m : missing) s += m + " ";
    return s;
  }());

  // The projection panels come from the best-AUC run of each cell.
  std::map<std::tuple<std::string, std::string, int>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < g.outcome.records.size(); ++i) {
    const auto& r = g.outcome.records[i];
    cells[{r.backbone, r.strategy, r.shots}].push_back(i);
  }
  const std::string best_tsv = slurp(dir / "best_runs.tsv");
  int best_found = 0;
  for (const auto& [key, idx] : cells) {
    const auto best = best_auc_record(g.outcome.records, idx);
    if (!best) continue;
    if (best_tsv.find(g.outcome.records[*best].artifacts) != std::string::npos) ++best_found;
  }
  o.check(best_found == static_cast<int>(cells.size()), "best-AUC runs listed for " + std::to_string(best_found) +
                                                            " of " + std::to_string(cells.size()) + " cells");

  std::map<std::string, std::string> tables;
  for (const char* f : {"table1.tsv", "table1.md", "table2.tsv", "table2.md"}) tables[f] = slurp(dir / f);
  const std::string records_before = slurp(g.cfg.output / "records.jsonl");
  const fs::path log = g.root / "resume.log";
  const std::string cmd = std::string("\"") + FSVLM_CLI_PATH + "\" run-grid --config \"" +
                          (g.root / "experiment.json").string() + "\" --resume 2> \"" + log.string() + "\"";
  const auto t0 = Clock::now();
  const int rc = std::system(cmd.c_str());
  const double resume_s = seconds_since(t0);
  const std::string out = slurp(log);
  o.check(rc == 0, "CLI resume exited with " + std::to_string(rc));
  o.check(out.find("computed 0,") != std::string::npos, "resume recomputed runs: " + out.substr(0, 200));
  o.check(slurp(g.cfg.output / "records.jsonl") == records_before, "record store changed on resume");
  for (const auto& [f, before] : tables) o.check(slurp(dir / f) == before, f + " changed on resume");
  o.note(std::to_string(rows) + " table rows x 7 shot columns; resume via CLI in " + fmt("%.2f s", resume_s) +
         ", 0 recomputed, tables byte-identical");
  return o;
}

// 8 ------------------------------------------------------------------------

Outcome pretrained_zero_shot() {
  Outcome o;
  const char* cfg_path = std::getenv("FSVLM_ZERO_SHOT_CONFIG");
  if (cfg_path == nullptr) {
    o.kind = Outcome::kSkip;
    o.note("set FSVLM_ZERO_SHOT_CONFIG to a config naming a pretrained backbone and a user dataset");
    return o;
  }
  try {
    const auto cfg = ExperimentConfig::load(cfg_path);
    auto data = load_experiment_data(cfg);
    const fs::path cache = cfg.cache_dir.empty() ? default_cache_dir() : cfg.cache_dir;
    int checked = 0;
    for (const auto& b : cfg.backbones) {
      if (b == "toy") continue;
      std::vector<double> acc;
      for (int rep = 0; rep < 3; ++rep) {
        AdaptedModel m;
        m.encoder = load_backbone(b, cache);
        m.prompts = data.prompts;
        const auto p = predict(m, data.validation);
        acc.push_back(accuracy(p.classification.predictions, data.validation.labels));
      }
      const auto st = summarize(acc);
      o.check(st.sd == 0.0, b + " zero-shot accuracy varies across repeats");
      o.note(b + " zero-shot accuracy " + fmt("%.4f", st.mean) + " sd " + fmt("%.4f", st.sd));
      ++checked;
    }
    if (checked == 0) {
      o.kind = Outcome::kSkip;
      o.note("config names no pretrained backbone");
    }
  } catch (const IoError& e) {
    o.kind = Outcome::kSkip;
    o.note(std::string("pretrained weights unavailable: ") + e.what());
  } catch (const std::exception& e) {
    o.check(false, e.what());
  }
  return o;
}

}  // namespace

int main() {
  struct Item {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  GridRun grid;
  const std::vector<Item> items{
      {1, "diagnostic oracle equivalence", diagnostic_oracles},
      {2, "metric oracles", metric_oracles},
      {3, "sampler properties", sampler_properties},
      {4, "adaptation invariants", adaptation_invariants},
      {5, "training-loop contract", training_contract},
      {6, "synthetic end-to-end", [&] { return synthetic_end_to_end(grid); }},
      {7, "report fidelity", [&] { return report_fidelity(grid); }},
      {8, "pretrained zero-shot reproducibility", pretrained_zero_shot},
  };
  int failed = 0;
  for (const auto& item : items) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = item.run();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double s = seconds_since(t0);
    const char* tag = o.kind == Outcome::kPass ? "PASS" : o.kind == Outcome::kFail ? "FAIL" : "SKIP";
    std::string detail;
    for (const auto& n : o.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("[%s] criterion %d %s (%.2f s): %s\n", tag, item.id, item.name, s, detail.c_str());
    std::fflush(stdout);
    if (o.kind == Outcome::kFail) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
