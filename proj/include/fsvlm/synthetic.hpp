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
#include <string>
#include <vector>

#include "fsvlm/corpus.hpp"
#include "fsvlm/jsonl.hpp"
#include "fsvlm/sampler.hpp"

namespace fsvlm {

// Synthetic slides whose glomeruli differ by stain colour and stripe
// orientation per class, so the classes are linearly separable in pixel
// space.
struct SyntheticOptions {
  std::vector<std::string> classes{"Atubular Glomerulus", "Ischemic Glomerulus",
                                   "Segmentally Sclerotic Glomerulus", "Globally Sclerotic Glomerulus",
                                   "Viable Glomerulus"};
  int train_wsis = 4;
  int val_wsis = 2;
  int train_per_class_per_wsi = 16;
  int val_per_class_per_wsi = 10;
  int cell = 200;
  // Amplitude of the per-class color offset around a neutral gray.
  double color_separation = 80;
  std::uint64_t seed = 7;
};

struct SyntheticDataset {
  std::filesystem::path slide_dir;
  std::filesystem::path annotations;
  std::vector<std::string> classes;
  SplitManifest split;
  std::vector<GlomerulusAnnotation> items;
};

// Writes <dir>/slides/<wsi>.png, <dir>/annotations.jsonl and <dir>/split.json.
SyntheticDataset generate_synthetic(const std::filesystem::path& dir, const SyntheticOptions& options = {});

void write_annotations(const std::filesystem::path& path, const std::vector<GlomerulusAnnotation>& items);

// Experiment config for a dataset written by generate_synthetic, with paths
// relative to that directory: toy backbone, all strategies, shots 0..32 and a
// schedule short enough for the whole grid to finish in minutes on one core.
Json synthetic_experiment_json();

}  // namespace fsvlm
