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
#include <set>

#include "fsvlm/error.hpp"
#include "fsvlm/sampler.hpp"

namespace fsvlm {
namespace {

// `per_wsi` patches of every class on each of the training and validation
// slides.
DatasetManifest make_manifest(const std::vector<std::string>& classes, int train_wsis, int val_wsis, int per_wsi,
                              SplitManifest& split) {
  std::set<std::string> wsis;
  std::vector<PatchRecord> patches;
  split = {};
  for (int w = 0; w < train_wsis + val_wsis; ++w) {
    const std::string wsi = "wsi" + std::to_string(w);
    wsis.insert(wsi);
    (w < train_wsis ? split.train_wsi_ids : split.val_wsi_ids).insert(wsi);
    for (const auto& c : classes) {
      for (int i = 0; i < per_wsi; ++i) {
        patches.push_back({wsi + "_" + c + "_" + std::to_string(i), wsi, c, "x.png", {}});
      }
    }
  }
  return DatasetManifest(classes, wsis, patches);
}

TEST(Split, OverlapIsRejected) {
  SplitManifest s{{"a", "b"}, {"b"}};
  EXPECT_THROW(validate_split(s), ValidationError);
}

TEST(PlanRuns, DisjointWhenPoolIsLargeEnough) {
  SplitManifest split;
  const auto m = make_manifest({"A"}, 1, 1, 64, split);
  const auto plans = plan_runs(m, split, 2, 32, 0);
  const auto& a = plans[0].classes[0].ids;
  const auto& b = plans[1].classes[0].ids;
  std::set<std::string> sa(a.begin(), a.end());
  for (const auto& id : b) EXPECT_FALSE(sa.contains(id));
}

TEST(PlanRuns, SingleRunTakesShuffledPrefix) {
  SplitManifest split;
  const auto m = make_manifest({"A"}, 1, 1, 50, split);
  const auto pool = class_pool(m, split, "A", 3);
  const auto plans = plan_runs(m, split, 1, 32, 3);
  EXPECT_EQ(plans[0].classes[0].ids, std::vector<std::string>(pool.begin(), pool.begin() + 32));
}

TEST(PlanRuns, WrapAroundReuse) {
  SplitManifest split;
  const auto m = make_manifest({"A"}, 1, 1, 40, split);
  const auto pool = class_pool(m, split, "A", 0);
  const auto plans = plan_runs(m, split, 2, 32, 0);
  const auto& run1 = plans[1].classes[0].ids;
  EXPECT_EQ(run1.front(), pool[32]);
  std::set<std::string> run0(plans[0].classes[0].ids.begin(), plans[0].classes[0].ids.end());
  int reused = 0;
  for (const auto& id : run1) reused += run0.contains(id) ? 1 : 0;
  EXPECT_EQ(reused, 24);
  EXPECT_EQ(std::set<std::string>(run1.begin(), run1.end()).size(), 32u);
}

TEST(PlanRuns, PoolTooSmallNamesClass) {
  SplitManifest split;
  const auto m = make_manifest({"A", "Sparse"}, 1, 1, 10, split);
  try {
    plan_runs(m, split, 1, 32, 0);
    FAIL() << "expected InsufficientDataError";
  } catch (const InsufficientDataError& e) {
    EXPECT_NE(std::string(e.what()).find("'A'"), std::string::npos);
  }
}

TEST(PlanRuns, OnlyTrainingSlidesAreSampled) {
  SplitManifest split;
  const auto m = make_manifest({"A", "B"}, 2, 2, 20, split);
  for (const auto& plan : plan_runs(m, split, 3, 32, 1)) {
    for (const auto& c : plan.classes) {
      for (const auto& id : c.ids) EXPECT_TRUE(split.train_wsi_ids.contains(m.patch(id).wsi_id));
    }
  }
}

TEST(ShotSubset, NestedPrefixesAndBounds) {
  SplitManifest split;
  const auto m = make_manifest({"A", "B", "C"}, 2, 1, 20, split);
  const auto plan = plan_runs(m, split, 1, 32, 9)[0];
  EXPECT_TRUE(shot_subset(plan, 0)[0].ids.empty());
  const auto big = shot_subset(plan, 16);
  for (int k : {1, 2, 4, 8}) {
    const auto small = shot_subset(plan, k);
    for (std::size_t c = 0; c < small.size(); ++c) {
      ASSERT_EQ(small[c].ids.size(), static_cast<std::size_t>(k));
      EXPECT_TRUE(std::equal(small[c].ids.begin(), small[c].ids.end(), big[c].ids.begin()));
    }
  }
  EXPECT_THROW(shot_subset(plan, 33), RangeError);
  EXPECT_THROW(shot_subset(plan, -1), RangeError);
}

TEST(Separation, Checker) {
  SplitManifest split;
  const auto m = make_manifest({"A"}, 1, 1, 4, split);
  const std::vector<std::string> train{"wsi0_A_0"};
  const std::vector<std::string> val{"wsi1_A_0", "wsi1_A_1"};
  EXPECT_FALSE(check_separation(train, split, val, m).has_value());
  EXPECT_FALSE(check_separation({}, split, val, m).has_value());
  const auto bad = check_separation(train, split, {"wsi1_A_0", "wsi0_A_3"}, m);
  ASSERT_TRUE(bad.has_value());
  EXPECT_EQ(bad->patch_id, "wsi0_A_3");
  EXPECT_EQ(bad->wsi_id, "wsi0");
  EXPECT_THROW(check_separation({"nope"}, split, val, m), LookupError);
}

TEST(Plans, DeterministicAndRoundTrip) {
  SplitManifest split;
  const auto m = make_manifest({"A", "B"}, 2, 1, 30, split);
  const auto a = plan_runs(m, split, 4, 32, 77);
  EXPECT_EQ(a, plan_runs(m, split, 4, 32, 77));
  EXPECT_NE(a, plan_runs(m, split, 4, 32, 78));
  const auto path = std::filesystem::temp_directory_path() / "fsvlm_plans_test.jsonl";
  save_plans(path, a);
  EXPECT_EQ(load_plans(path), a);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace fsvlm
