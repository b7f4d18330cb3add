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
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fsvlm/corpus.hpp"

namespace fsvlm {

struct SplitManifest {
  std::set<std::string> train_wsi_ids;
  std::set<std::string> val_wsi_ids;
};

// Throws ValidationError when the two sets overlap.
void validate_split(const SplitManifest& split);
SplitManifest load_split(const std::filesystem::path& path);
void save_split(const std::filesystem::path& path, const SplitManifest& split);

struct ClassSuperset {
  std::string label;
  std::vector<std::string> ids;  // exactly superset_size, no duplicates
  friend bool operator==(const ClassSuperset&, const ClassSuperset&) = default;
};

struct ShotPlan {
  int run_id = 0;
  std::uint64_t seed = 0;
  int superset_size = 0;
  std::vector<ClassSuperset> classes;  // manifest class order

  friend bool operator==(const ShotPlan&, const ShotPlan&) = default;
};

inline constexpr int kDefaultRuns = 10;
inline constexpr int kDefaultSupersetSize = 32;

// Training pool of one class: ids from training WSIs, sorted, then
// Fisher-Yates shuffled under a seed derived from (master_seed, label).
std::vector<std::string> class_pool(const DatasetManifest& manifest, const SplitManifest& split,
                                    const std::string& label, std::uint64_t master_seed);

// Run r takes superset_size consecutive pool positions starting at
// (r * superset_size) mod pool_size, wrapping around the pool. Runs are
// disjoint whenever the pool holds n_runs * superset_size items.
std::vector<ShotPlan> plan_runs(const DatasetManifest& manifest, const SplitManifest& split,
                                int n_runs, int superset_size, std::uint64_t master_seed);

struct ClassShots {
  std::string label;
  std::vector<std::string> ids;
};

// First k ids of every class superset; k = 0 yields empty lists.
std::vector<ClassShots> shot_subset(const ShotPlan& plan, int k);

struct SeparationViolation {
  std::string patch_id;
  std::string wsi_id;
  std::string reason;
};

// nullopt means the split is clean. Unknown ids throw LookupError.
std::optional<SeparationViolation> check_separation(const std::vector<std::string>& train_ids,
                                                    const SplitManifest& split,
                                                    const std::vector<std::string>& val_ids,
                                                    const DatasetManifest& manifest);

// Every patch whose slide is a validation WSI, in manifest order.
std::vector<std::string> validation_ids(const DatasetManifest& manifest, const SplitManifest& split);

// One record per (run_id, class, rank, patch_id).
void save_plans(const std::filesystem::path& path, const std::vector<ShotPlan>& plans);
std::vector<ShotPlan> load_plans(const std::filesystem::path& path);

}  // namespace fsvlm
