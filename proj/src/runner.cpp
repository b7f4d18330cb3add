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

#include "fsvlm/runner.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "fsvlm/error.hpp"

namespace fsvlm {

namespace {

constexpr int kRecordFormat = 1;

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

}  // namespace

int ExperimentConfig::effective_superset() const {
  if (superset_size > 0) return superset_size;
  return shots.empty() ? 0 : std::max(1, *std::max_element(shots.begin(), shots.end()));
}

AdaptationConfig ExperimentConfig::adaptation_for(Strategy s) const {
  auto it = adaptation.find(s);
  AdaptationConfig c = it == adaptation.end() ? AdaptationConfig{} : it->second;
  c.strategy = s;
  return c;
}

TrainSchedule ExperimentConfig::schedule_for(Strategy s) const {
  TrainSchedule t = schedule;
  if (auto it = learning_rates.find(s); it != learning_rates.end()) t.base_lr = it->second;
  return t;
}

void ExperimentConfig::validate() const {
  if (backbones.empty()) throw ConfigError("config: backbones must not be empty");
  std::set<std::string> seen_backbones;
  for (const auto& b : backbones) {
    if (!seen_backbones.insert(b).second) throw ConfigError("config: duplicate backbone '" + b + "'");
    try {
      const auto& desc = backbone_descriptor(b);
      for (auto s : strategies) adaptation_for(s).validate(desc.arch);
    } catch (const LookupError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (strategies.empty()) throw ConfigError("config: strategies must not be empty");
  if (std::set<Strategy>(strategies.begin(), strategies.end()).size() != strategies.size()) {
    throw ConfigError("config: duplicate strategy");
  }
  if (shots.empty()) throw ConfigError("config: shots must not be empty");
  for (std::size_t i = 0; i < shots.size(); ++i) {
    if (shots[i] < 0) throw ConfigError("config: shots must be >= 0");
    if (i > 0 && shots[i] <= shots[i - 1]) throw ConfigError("config: shots must be strictly ascending");
  }
  if (shots.back() > effective_superset()) throw ConfigError("config: largest shot count exceeds superset_size");
  if (n_runs < 1) throw ConfigError("config: n_runs must be >= 1");
  for (const auto& [s, lr] : learning_rates) {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("config: learning rate for " + strategy_name(s) + " must be > 0");
  }
  schedule.validate(-1);
  (void)build_prompts({"a", "b"}, prompt_template);
}

Json ExperimentConfig::to_json() const {
  Json j;
  j["backbones"] = backbones;
  Json st = Json::array();
  for (auto s : strategies) st.push_back(strategy_name(s));
  j["strategies"] = st;
  j["shots"] = shots;
  j["n_runs"] = n_runs;
  j["master_seed"] = master_seed;
  j["superset_size"] = effective_superset();
  j["prompt_template"] = prompt_template;
  Json sched = schedule.to_json();
  sched.erase("augmentation_seed");
  j["schedule"] = sched;
  Json lrs = Json::object();
  for (const auto& [s, lr] : learning_rates) lrs[strategy_name(s)] = lr;
  j["learning_rates"] = lrs;
  Json ad = Json::object();
  for (auto s : all_strategies()) ad[strategy_name(s)] = adaptation_for(s).to_json();
  j["adaptation"] = ad;
  j["projection"] = projection.to_json();
  j["paths"] = Json{{"manifest", manifest.string()}, {"split", split.string()}, {"output", output.string()},
                    {"cache_dir", cache_dir.string()}};
  j["save_checkpoints"] = save_checkpoints;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const Json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{"backbones", "strategies", "shots", "n_runs", "master_seed",
                                           "superset_size", "prompt_template", "schedule", "learning_rates",
                                           "adaptation", "projection", "paths", "save_checkpoints"};
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  ExperimentConfig c;
  try {
    if (j.contains("backbones")) c.backbones = j["backbones"].get<std::vector<std::string>>();
    if (j.contains("strategies")) {
      c.strategies.clear();
      for (const auto& s : j["strategies"]) c.strategies.push_back(parse_strategy(s.get<std::string>()));
    }
    if (j.contains("shots")) c.shots = j["shots"].get<std::vector<int>>();
    if (j.contains("n_runs")) c.n_runs = j["n_runs"].get<int>();
    if (j.contains("master_seed")) c.master_seed = j["master_seed"].get<std::uint64_t>();
    if (j.contains("superset_size")) c.superset_size = j["superset_size"].get<int>();
    if (j.contains("prompt_template")) c.prompt_template = j["prompt_template"].get<std::string>();
    if (j.contains("schedule")) c.schedule = TrainSchedule::from_json(j["schedule"]);
    if (j.contains("learning_rates")) {
      for (const auto& [k, v] : j["learning_rates"].items()) c.learning_rates[parse_strategy(k)] = v.get<double>();
    }
    if (j.contains("adaptation")) {
      for (const auto& [k, v] : j["adaptation"].items()) {
        auto a = AdaptationConfig::from_json(v);
        a.strategy = parse_strategy(k);
        c.adaptation[a.strategy] = a;
      }
    }
    if (j.contains("projection")) c.projection = UmapParams::from_json(j["projection"]);
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      for (const auto& [k, _] : p.items()) {
        if (k != "manifest" && k != "split" && k != "output" && k != "cache_dir") {
          throw ConfigError("unknown paths key '" + k + "'");
        }
      }
      c.manifest = resolve(base_dir, p.value("manifest", ""));
      c.split = resolve(base_dir, p.value("split", ""));
      if (p.contains("output")) c.output = resolve(base_dir, p["output"].get<std::string>());
      c.cache_dir = resolve(base_dir, p.value("cache_dir", ""));
    }
    if (j.contains("save_checkpoints")) c.save_checkpoints = j["save_checkpoints"].get<bool>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  Json j;
  try {
    j = read_json(path);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

std::string fingerprint(const Json& j) { return sha256_hex(j.dump()); }

std::string experiment_fingerprint(const ExperimentConfig& cfg) {
  Json j = cfg.to_json();
  j["paths"].erase("output");
  j["paths"].erase("cache_dir");
  return fingerprint(j);
}

std::string RunRecord::key() const {
  return backbone + "|" + strategy + "|" + std::to_string(shots) + "|" + std::to_string(run_id);
}

Json RunRecord::to_json() const {
  Json j;
  j["format"] = kRecordFormat;
  j["backbone"] = backbone;
  j["strategy"] = strategy;
  j["shots"] = shots;
  j["run_id"] = run_id;
  j["seed"] = seed;
  j["status"] = status;
  if (!error.empty()) j["error"] = error;
  if (ok()) {
    j["eval"] = eval.to_json();
    j["diagnostics"] = diagnostics.summary_json();
    j["history"] = history.to_json();
  }
  j["wall_time"] = wall_time;
  j["fingerprint"] = fingerprint;
  j["artifacts"] = artifacts;
  return j;
}

RunRecord RunRecord::from_json(const Json& j) {
  RunRecord r;
  try {
    r.backbone = j.at("backbone").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.shots = j.at("shots").get<int>();
    r.run_id = j.at("run_id").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.status = j.at("status").get<std::string>();
    r.error = j.value("error", "");
    if (r.ok()) {
      r.eval = EvalResult::from_json(j.at("eval"));
      r.diagnostics = DiagnosticsReport::from_json(j.at("diagnostics"));
      r.history = TrainHistory::from_json(j.at("history"));
    }
    r.wall_time = j.value("wall_time", 0.0);
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.artifacts = j.value("artifacts", "");
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("run record: ") + e.what());
  }
  return r;
}

RecordStore::RecordStore(std::filesystem::path path) : path_(std::move(path)) {}

std::vector<RunRecord> RecordStore::read_all() const {
  std::lock_guard lock(mutex_);
  std::vector<RunRecord> out;
  if (!std::filesystem::exists(path_)) return out;
  for (const auto& j : read_jsonl(path_)) out.push_back(RunRecord::from_json(j));
  return out;
}

void RecordStore::append(const RunRecord& record) {
  std::lock_guard lock(mutex_);
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  const std::string line = record.to_json().dump() + "\n";
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot append to " + path_.string());
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.flush();
  if (!out) throw IoError("short write to " + path_.string());
}

CellStats summarize(const std::vector<double>& values) {
  CellStats s;
  s.n = static_cast<int>(values.size());
  if (values.empty()) return s;
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) {
    s.mean = values.front();
    s.single = s.n == 1;
    return s;
  }
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / s.n;
  if (s.n == 1) {
    s.single = true;
    return s;
  }
  double ss = 0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / (s.n - 1));
  return s;
}

const CellStats* ResultTable::find(const std::string& backbone, const std::string& strategy, int shots,
                                   const std::string& metric) const {
  auto it = cells.find({backbone, shots == 0 ? std::string(kZeroShot) : strategy, shots});
  if (it == cells.end()) return nullptr;
  auto m = it->second.find(metric);
  return m == it->second.end() ? nullptr : &m->second;
}

ResultTable aggregate(const std::vector<RunRecord>& records) {
  std::map<std::tuple<std::string, std::string, int>, std::map<std::string, std::vector<double>>> values;
  for (const auto& r : records) {
    if (!r.ok()) continue;
    auto& cell = values[{r.backbone, r.strategy, r.shots}];
    cell["accuracy"].push_back(r.eval.accuracy);
    cell["macro_auc"].push_back(r.eval.macro_auc);
    cell["macro_f1"].push_back(r.eval.macro_f1);
    cell["alignment"].push_back(r.diagnostics.alignment);
    cell["similarity_gap"].push_back(r.diagnostics.similarity_gap);
    cell["intra_class_distance"].push_back(r.diagnostics.intra_class_distance);
    cell["silhouette"].push_back(r.diagnostics.silhouette);
  }
  ResultTable t;
  for (const auto& [key, metrics] : values) {
    for (const auto& [name, v] : metrics) t.cells[key][name] = summarize(v);
  }
  return t;
}

const Image& ExperimentData::image(const std::string& id) {
  auto it = image_cache.find(id);
  if (it == image_cache.end()) it = image_cache.emplace(id, read_png(manifest.patch_path(manifest.patch(id)))).first;
  return it->second;
}

LabeledImages ExperimentData::training_set(const ShotPlan& plan, int shots) {
  LabeledImages set;
  for (const auto& cls : shot_subset(plan, shots)) {
    const int label = manifest.class_index(cls.label);
    for (const auto& id : cls.ids) {
      set.images.push_back(image(id));
      set.labels.push_back(label);
      set.ids.push_back(id);
    }
  }
  return set;
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  if (cfg.manifest.empty() || cfg.split.empty()) throw ConfigError("config: paths.manifest and paths.split are required");
  ExperimentData d;
  d.manifest = load_manifest(cfg.manifest);
  d.split = load_split(cfg.split);
  for (const auto& w : d.split.train_wsi_ids) {
    if (!d.manifest.wsi_ids().count(w)) throw ValidationError("split names unknown WSI '" + w + "'");
  }
  for (const auto& w : d.split.val_wsi_ids) {
    if (!d.manifest.wsi_ids().count(w)) throw ValidationError("split names unknown WSI '" + w + "'");
  }
  d.prompts = build_prompts(d.manifest.classes(), cfg.prompt_template);
  d.plans = plan_runs(d.manifest, d.split, cfg.n_runs, cfg.effective_superset(), cfg.master_seed);
  for (const auto& id : validation_ids(d.manifest, d.split)) {
    d.validation.images.push_back(read_png(d.manifest.patch_path(d.manifest.patch(id))));
    d.validation.labels.push_back(d.manifest.class_index(d.manifest.patch(id).label));
    d.validation.ids.push_back(id);
  }
  if (d.validation.size() == 0) throw InsufficientDataError("the validation WSIs contain no patches");
  return d;
}

std::string cell_name(const std::string& backbone, const std::string& strategy, int shots) {
  return backbone + "__" + strategy + "__k" + std::to_string(shots);
}

std::string cell_fingerprint(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& backbone,
                             const std::string& strategy, int shots, int run_id) {
  Json j;
  j["format"] = kRecordFormat;
  j["backbone"] = backbone;
  j["strategy"] = strategy;
  j["shots"] = shots;
  j["run_id"] = run_id;
  j["classes"] = data.manifest.classes();
  j["prompts"] = data.prompts.prompts();
  j["validation_ids"] = fingerprint(Json(data.validation.ids));
  j["projection"] = cfg.projection.to_json();
  if (strategy != kZeroShot) {
    const Strategy s = parse_strategy(strategy);
    const auto& plan = data.plans.at(static_cast<std::size_t>(run_id));
    j["seed"] = plan.seed;
    Json ids = Json::array();
    for (const auto& c : shot_subset(plan, shots)) ids.push_back(c.ids);
    j["train_ids"] = ids;
    j["schedule"] = cfg.schedule_for(s).to_json();
    j["adaptation"] = cfg.adaptation_for(s).to_json();
  }
  return fingerprint(j);
}

RunRecord run_cell(const ExperimentConfig& cfg, ExperimentData& data, const DualEncoder& base,
                   const std::string& strategy, int shots, int run_id, const std::filesystem::path& out_root) {
  const auto t0 = std::chrono::steady_clock::now();
  if (run_id < 0 || run_id >= static_cast<int>(data.plans.size())) throw RangeError("run id out of range");
  const ShotPlan& plan = data.plans[static_cast<std::size_t>(run_id)];
  const std::string cell = cell_name(base.descriptor().name, strategy, shots);
  RunRecord rec;
  rec.backbone = base.descriptor().name;
  rec.strategy = strategy;
  rec.shots = shots;
  rec.run_id = run_id;
  rec.seed = plan.seed;
  rec.fingerprint = cell_fingerprint(cfg, data, rec.backbone, strategy, shots, run_id);
  rec.artifacts = "emb/" + cell + "/run" + std::to_string(run_id);

  AdaptedModel model;
  if (strategy == kZeroShot) {
    if (shots != 0) throw ConfigError("zero-shot cells have shots = 0");
    model.encoder = base;
    model.prompts = data.prompts;
  } else {
    if (shots < 1) throw ConfigError("zero-shot is evaluation-only; adapted cells need shots >= 1");
    const Strategy s = parse_strategy(strategy);
    model = adapt(base, cfg.adaptation_for(s), data.prompts, derive_seed(plan.seed, cell));
    LabeledImages train_set = data.training_set(plan, shots);
    if (auto v = check_separation(train_set.ids, data.split, data.validation.ids, data.manifest)) {
      throw ValidationError("WSI separation violated by " + v->patch_id + " (" + v->wsi_id + "): " + v->reason);
    }
    TrainSchedule sched = cfg.schedule_for(s);
    sched.augmentation_seed = derive_seed(plan.seed, "augment:" + cell);
    rec.history = train(model, train_set, data.validation, sched);
  }

  const Prediction pred = predict(model, data.validation);
  rec.eval = evaluate(pred.classification.probabilities, pred.classification.predictions, data.validation.labels,
                      data.manifest.classes());
  rec.diagnostics = diagnose(pred.image_embeddings, pred.text_embeddings, cfg.projection,
                             model.head ? &pred.head_features : nullptr);

  const auto dir = out_root / rec.artifacts;
  write_embeddings(dir / "images", pred.image_embeddings);
  write_embeddings(dir / "texts", pred.text_embeddings);
  write_diagnostics(dir / "diagnostics.json", rec.diagnostics,
                    Json{{"backbone", rec.backbone}, {"strategy", strategy}, {"shots", shots}, {"run_id", run_id},
                         {"fingerprint", rec.fingerprint}});
  write_roc_jsonl(dir / "roc.jsonl", rec.eval);
  if (cfg.save_checkpoints && strategy != kZeroShot) save_checkpoint(dir / "delta.fsvt", model, rec.fingerprint);

  rec.diagnostics.projection.resize(0, 2);
  rec.diagnostics.labels.clear();
  rec.diagnostics.modality.clear();
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

GridOutcome run_grid(const ExperimentConfig& cfg, const GridOptions& options) {
  cfg.validate();
  auto log = [&](const std::string& m) {
    if (options.log) options.log(m);
  };
  ExperimentData data = load_experiment_data(cfg);
  std::filesystem::create_directories(cfg.output);
  RecordStore store(cfg.output / "records.jsonl");
  if (std::filesystem::exists(store.path()) && !options.resume) {
    throw ConfigError(store.path().string() + " already exists; pass --resume to continue it");
  }
  save_plans(cfg.output / "plans.jsonl", data.plans);
  write_text(cfg.output / "config.json", cfg.to_json().dump(2) + "\n");

  std::map<std::string, RunRecord> existing;
  for (auto& r : store.read_all()) existing[r.key()] = std::move(r);

  GridOutcome outcome;
  for (const auto& backbone : cfg.backbones) {
    std::optional<DualEncoder> base;
    std::string load_error;
    try {
      base = load_backbone(backbone, cfg.cache_dir.empty() ? default_cache_dir() : cfg.cache_dir);
    } catch (const Error& e) {
      load_error = e.what();
      log("backbone " + backbone + " unavailable: " + load_error);
    }
    auto run = [&](const std::string& strategy, int shots, int run_id) {
      RunRecord probe;
      probe.backbone = backbone;
      probe.strategy = strategy;
      probe.shots = shots;
      probe.run_id = run_id;
      const std::string fp = cell_fingerprint(cfg, data, backbone, strategy, shots, run_id);
      if (auto it = existing.find(probe.key()); it != existing.end()) {
        if (it->second.fingerprint != fp) {
          throw ConfigError("record " + probe.key() + " in " + store.path().string() +
                            " was produced by a different configuration");
        }
        ++outcome.skipped;
        return;
      }
      RunRecord rec;
      try {
        if (!base) throw IoError(load_error);
        rec = run_cell(cfg, data, *base, strategy, shots, run_id, cfg.output);
        log(probe.key() + " acc=" + std::to_string(rec.eval.accuracy) + " auc=" + std::to_string(rec.eval.macro_auc));
      } catch (const std::exception& e) {
        rec = probe;
        rec.seed = data.plans[static_cast<std::size_t>(run_id)].seed;
        rec.status = "error";
        rec.error = e.what();
        rec.fingerprint = fp;
        ++outcome.failed;
        log(probe.key() + " failed: " + rec.error);
      }
      store.append(rec);
      existing[rec.key()] = rec;
      ++outcome.computed;
    };
    if (std::find(cfg.shots.begin(), cfg.shots.end(), 0) != cfg.shots.end()) {
      // Zero-shot is deterministic: evaluate once, then file one record per run id.
      std::optional<RunRecord> zero;
      for (int r = 0; r < cfg.n_runs; ++r) {
        RunRecord probe;
        probe.backbone = backbone;
        probe.strategy = kZeroShot;
        probe.run_id = r;
        auto it = existing.find(probe.key());
        if (it != existing.end() && it->second.ok() && !zero) zero = it->second;
        if (it != existing.end() || !zero || !zero->ok()) {
          run(kZeroShot, 0, r);
          if (!zero) zero = existing.at(probe.key());
          continue;
        }
        RunRecord copy = *zero;
        copy.run_id = r;
        copy.seed = data.plans[static_cast<std::size_t>(r)].seed;
        copy.fingerprint = cell_fingerprint(cfg, data, backbone, kZeroShot, 0, r);
        copy.wall_time = 0;
        store.append(copy);
        existing[copy.key()] = copy;
        ++outcome.computed;
      }
    }
    for (auto s : cfg.strategies) {
      for (int k : cfg.shots) {
        if (k == 0) continue;
        for (int r = 0; r < cfg.n_runs; ++r) run(strategy_name(s), k, r);
      }
    }
  }
  outcome.records = store.read_all();
  outcome.table = aggregate(outcome.records);
  return outcome;
}

std::optional<std::size_t> best_auc_record(const std::vector<RunRecord>& records,
                                           const std::vector<std::size_t>& candidates) {
  std::optional<std::size_t> best;
  for (auto i : candidates) {
    if (!records[i].ok()) continue;
    if (!best || records[i].eval.macro_auc > records[*best].eval.macro_auc) best = i;
  }
  return best;
}

ReportOptions report_options(const ExperimentConfig& cfg, const std::vector<RunRecord>& records) {
  ReportOptions o;
  o.output_root = cfg.output;
  o.report_dir = cfg.output / "report";
  o.fingerprint = experiment_fingerprint(cfg);
  o.backbones = cfg.backbones;
  for (auto s : cfg.strategies) o.strategies.push_back(strategy_name(s));
  o.shots = cfg.shots;
  for (const auto& r : records) {
    if (r.ok()) {
      o.class_names = r.eval.class_names;
      break;
    }
  }
  return o;
}

}  // namespace fsvlm
