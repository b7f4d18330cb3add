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

#include "fsvlm/sampler.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "fsvlm/error.hpp"
#include "fsvlm/jsonl.hpp"
#include "fsvlm/rng.hpp"

namespace fsvlm {

void validate_split(const SplitManifest& split) {
  for (const auto& w : split.train_wsi_ids) {
    if (split.val_wsi_ids.contains(w)) {
      throw ValidationError("WSI '" + w + "' is in both the training and validation split");
    }
  }
}

SplitManifest load_split(const std::filesystem::path& path) {
  const Json j = read_json(path);
  SplitManifest s;
  try {
    for (const auto& w : j.at("train_wsi_ids")) s.train_wsi_ids.insert(w.get<std::string>());
    for (const auto& w : j.at("val_wsi_ids")) s.val_wsi_ids.insert(w.get<std::string>());
  } catch (const Json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  validate_split(s);
  return s;
}

void save_split(const std::filesystem::path& path, const SplitManifest& split) {
  OrderedJson j;
  j["train_wsi_ids"] = std::vector<std::string>(split.train_wsi_ids.begin(), split.train_wsi_ids.end());
  j["val_wsi_ids"] = std::vector<std::string>(split.val_wsi_ids.begin(), split.val_wsi_ids.end());
  write_text(path, j.dump(2) + "\n");
}

std::vector<std::string> class_pool(const DatasetManifest& manifest, const SplitManifest& split,
                                    const std::string& label, std::uint64_t master_seed) {
  std::vector<std::string> pool;
  for (const auto& p : manifest.patches()) {
    if (p.label == label && split.train_wsi_ids.contains(p.wsi_id)) pool.push_back(p.id);
  }
  std::sort(pool.begin(), pool.end());
  Engine rng(derive_seed(master_seed, label));
  shuffle(pool, rng);
  return pool;
}

std::vector<ShotPlan> plan_runs(const DatasetManifest& manifest, const SplitManifest& split,
                                int n_runs, int superset_size, std::uint64_t master_seed) {
  if (n_runs < 1) throw ConfigError("n_runs must be >= 1");
  if (superset_size < 1) throw ConfigError("superset_size must be >= 1");
  validate_split(split);

  std::vector<ShotPlan> plans(static_cast<std::size_t>(n_runs));
  for (int r = 0; r < n_runs; ++r) {
    plans[r].run_id = r;
    plans[r].seed = master_seed + static_cast<std::uint64_t>(r);
    plans[r].superset_size = superset_size;
  }
  const auto S = static_cast<std::size_t>(superset_size);
  for (const auto& label : manifest.classes()) {
    const auto pool = class_pool(manifest, split, label, master_seed);
    if (pool.size() < S) {
      std::ostringstream os;
      os << "class '" << label << "' has " << pool.size() << " training patches, need "
         << superset_size;
      throw InsufficientDataError(os.str());
    }
    for (int r = 0; r < n_runs; ++r) {
      const std::size_t start = (static_cast<std::size_t>(r) * S) % pool.size();
      std::vector<std::string> ids;
      std::vector<bool> taken(pool.size(), false);
      // With S <= pool size a single lap never revisits a slot; the check
      // keeps the no-duplicates invariant explicit.
      for (std::size_t step = 0; ids.size() < S; ++step) {
        const std::size_t idx = (start + step) % pool.size();
        if (taken[idx]) continue;
        taken[idx] = true;
        ids.push_back(pool[idx]);
      }
      plans[r].classes.push_back({label, std::move(ids)});
    }
  }
  return plans;
}

std::vector<ClassShots> shot_subset(const ShotPlan& plan, int k) {
  if (k < 0 || k > plan.superset_size) {
    throw RangeError("shots " + std::to_string(k) + " outside [0, " +
                     std::to_string(plan.superset_size) + "]");
  }
  std::vector<ClassShots> out;
  out.reserve(plan.classes.size());
  for (const auto& c : plan.classes) {
    out.push_back({c.label, std::vector<std::string>(c.ids.begin(), c.ids.begin() + k)});
  }
  return out;
}

std::optional<SeparationViolation> check_separation(const std::vector<std::string>& train_ids,
                                                    const SplitManifest& split,
                                                    const std::vector<std::string>& val_ids,
                                                    const DatasetManifest& manifest) {
  std::set<std::string> train_slides;
  std::optional<SeparationViolation> first;
  for (const auto& id : train_ids) {
    const auto& p = manifest.patch(id);
    if (!first && !split.train_wsi_ids.contains(p.wsi_id)) {
      first = SeparationViolation{id, p.wsi_id, "training patch from a non-training WSI"};
    }
    train_slides.insert(p.wsi_id);
  }
  for (const auto& id : val_ids) {
    const auto& p = manifest.patch(id);
    if (first) continue;  // still resolve every id
    if (split.train_wsi_ids.contains(p.wsi_id) || train_slides.contains(p.wsi_id)) {
      first = SeparationViolation{id, p.wsi_id, "validation patch shares a training WSI"};
    }
  }
  return first;
}

std::vector<std::string> validation_ids(const DatasetManifest& manifest, const SplitManifest& split) {
  std::vector<std::string> out;
  for (const auto& p : manifest.patches()) {
    if (split.val_wsi_ids.contains(p.wsi_id)) out.push_back(p.id);
  }
  return out;
}

void save_plans(const std::filesystem::path& path, const std::vector<ShotPlan>& plans) {
  std::ostringstream os;
  for (const auto& plan : plans) {
    for (const auto& c : plan.classes) {
      for (std::size_t rank = 0; rank < c.ids.size(); ++rank) {
        OrderedJson r;
        r["run_id"] = plan.run_id;
        r["seed"] = plan.seed;
        r["class"] = c.label;
        r["rank"] = rank;
        r["patch_id"] = c.ids[rank];
        os << r.dump() << '\n';
      }
    }
  }
  write_text(path, os.str());
}

std::vector<ShotPlan> load_plans(const std::filesystem::path& path) {
  std::map<int, ShotPlan> by_run;
  try {
    for (const auto& r : read_jsonl(path)) {
      const int run = r.at("run_id").get<int>();
      auto& plan = by_run[run];
      plan.run_id = run;
      plan.seed = r.at("seed").get<std::uint64_t>();
      const auto label = r.at("class").get<std::string>();
      const auto rank = r.at("rank").get<std::size_t>();
      auto it = std::find_if(plan.classes.begin(), plan.classes.end(),
                             [&](const ClassSuperset& c) { return c.label == label; });
      if (it == plan.classes.end()) {
        plan.classes.push_back({label, {}});
        it = std::prev(plan.classes.end());
      }
      if (rank != it->ids.size()) {
        throw ValidationError(path.string() + ": ranks out of order for run " +
                              std::to_string(run) + " class '" + label + "'");
      }
      it->ids.push_back(r.at("patch_id").get<std::string>());
    }
  } catch (const Json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  std::vector<ShotPlan> out;
  for (auto& [run, plan] : by_run) {
    plan.superset_size = plan.classes.empty() ? 0 : static_cast<int>(plan.classes.front().ids.size());
    for (const auto& c : plan.classes) {
      if (static_cast<int>(c.ids.size()) != plan.superset_size) {
        throw ValidationError(path.string() + ": unequal superset sizes in run " +
                              std::to_string(run));
      }
    }
    out.push_back(std::move(plan));
  }
  return out;
}

}  // namespace fsvlm
