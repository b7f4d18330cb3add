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

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fsvlm/image.hpp"

namespace fsvlm {

// Pixel box with exclusive max corner: (0,0,10,10) covers 10x10 pixels.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct GlomerulusAnnotation {
  std::string wsi_id;
  std::string glom_id;
  std::string label;
  BoundingBox bbox;
};

struct SlidePatch {
  std::string wsi_id;
  std::string glom_id;
  std::string label;
  Image pixels;             // square
  BoundingBox source_bbox;  // annotation box as given
  BoundingBox crop;         // square window actually sampled from the slide
};

inline constexpr int kDefaultExpansion = 50;
inline constexpr std::string_view kDefaultPromptTemplate = "A histopathology image of {label}";

// Square window used by extract_patch: the annotation grown by `expansion`
// on every side, then widened along its short axis to the long side,
// keeping the center (the extra pixel of an odd difference goes to the
// max side).
BoundingBox square_crop_box(const BoundingBox& bbox, int expansion);

// Throws ValidationError when the annotation box is degenerate or not
// inside the slide.
SlidePatch extract_patch(const Image& slide, const GlomerulusAnnotation& ann,
                         int expansion = kDefaultExpansion);

class PromptSet {
 public:
  PromptSet() = default;

  const std::string& prompt_template() const { return template_; }
  const std::vector<std::string>& classes() const { return classes_; }
  const std::vector<std::string>& prompts() const { return prompts_; }
  std::size_t size() const { return prompts_.size(); }
  const std::string& prompt_for(std::string_view label) const;

 private:
  friend PromptSet build_prompts(const std::vector<std::string>&, std::string_view);
  std::string template_;
  std::vector<std::string> classes_;
  std::vector<std::string> prompts_;
};

// The template must contain exactly one "{label}" and no other braces.
PromptSet build_prompts(const std::vector<std::string>& classes,
                        std::string_view prompt_template = kDefaultPromptTemplate);

struct PatchRecord {
  std::string id;  // glom_id; unique within a manifest
  std::string wsi_id;
  std::string label;
  std::string path;  // relative to the manifest directory unless absolute
  BoundingBox source_bbox;
};

class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(std::vector<std::string> classes, std::set<std::string> wsi_ids,
                  std::vector<PatchRecord> patches);

  const std::vector<std::string>& classes() const { return classes_; }
  const std::set<std::string>& wsi_ids() const { return wsi_ids_; }
  const std::vector<PatchRecord>& patches() const { return patches_; }
  const std::filesystem::path& base_dir() const { return base_dir_; }
  void set_base_dir(std::filesystem::path dir) { base_dir_ = std::move(dir); }

  // Throws LookupError for unknown ids / labels.
  const PatchRecord& patch(std::string_view id) const;
  bool contains(std::string_view id) const;
  int class_index(std::string_view label) const;
  std::filesystem::path patch_path(const PatchRecord& rec) const;

 private:
  std::vector<std::string> classes_;
  std::set<std::string> wsi_ids_;
  std::vector<PatchRecord> patches_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
  std::filesystem::path base_dir_;
};

// Line-delimited JSON: one header record followed by one record per patch.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Annotation records, one JSON object per line with wsi_id, glom_id, label,
// x_min, y_min, x_max, y_max. Labels are checked against `classes`.
std::vector<GlomerulusAnnotation> read_annotations(const std::filesystem::path& path,
                                                   const std::vector<std::string>& classes);

struct PrepareResult {
  DatasetManifest manifest;
  std::vector<std::string> rejected;  // "<glom_id>: <reason>"
};

// Extracts every annotation from `slide_dir/<wsi_id>.png`, writes
// `<out_dir>/patches/<wsi_id>__<glom_id>.png` and `<out_dir>/manifest.jsonl`.
// Annotations that fail extraction are reported, not fatal.
PrepareResult prepare_dataset(const std::vector<GlomerulusAnnotation>& annotations,
                              const std::filesystem::path& slide_dir,
                              const std::filesystem::path& out_dir,
                              const std::vector<std::string>& classes,
                              int expansion = kDefaultExpansion);

}  // namespace fsvlm
