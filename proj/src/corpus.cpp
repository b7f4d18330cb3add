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

#include "fsvlm/corpus.hpp"

#include <algorithm>
#include <sstream>

#include "fsvlm/error.hpp"
#include "fsvlm/jsonl.hpp"

namespace fsvlm {

namespace {

constexpr std::string_view kPlaceholder = "{label}";

void check_bbox(const BoundingBox& b, const std::string& who) {
  if (b.x_min >= b.x_max || b.y_min >= b.y_max) {
    std::ostringstream os;
    os << "rejected annotation " << who << ": degenerate bbox (" << b.x_min << "," << b.y_min
       << "," << b.x_max << "," << b.y_max << ")";
    throw ValidationError(os.str());
  }
}

}  // namespace

BoundingBox square_crop_box(const BoundingBox& bbox, int expansion) {
  if (expansion < 0) throw ConfigError("expansion must be >= 0");
  BoundingBox e{bbox.x_min - expansion, bbox.y_min - expansion, bbox.x_max + expansion,
                bbox.y_max + expansion};
  const int side = std::max(e.width(), e.height());
  const int x0 = e.x_min - (side - e.width()) / 2;
  const int y0 = e.y_min - (side - e.height()) / 2;
  return {x0, y0, x0 + side, y0 + side};
}

SlidePatch extract_patch(const Image& slide, const GlomerulusAnnotation& ann, int expansion) {
  check_bbox(ann.bbox, ann.glom_id);
  const auto& b = ann.bbox;
  if (b.x_min < 0 || b.y_min < 0 || b.x_max > slide.width || b.y_max > slide.height) {
    std::ostringstream os;
    os << "rejected annotation " << ann.glom_id << ": bbox (" << b.x_min << "," << b.y_min << ","
       << b.x_max << "," << b.y_max << ") outside slide " << ann.wsi_id << " of size "
       << slide.width << "x" << slide.height;
    throw ValidationError(os.str());
  }
  const BoundingBox crop = square_crop_box(b, expansion);
  SlidePatch patch;
  patch.wsi_id = ann.wsi_id;
  patch.glom_id = ann.glom_id;
  patch.label = ann.label;
  patch.source_bbox = b;
  patch.crop = crop;
  patch.pixels = crop_with_fill(slide, crop.x_min, crop.y_min, crop.width(), crop.height(), 255);
  return patch;
}

const std::string& PromptSet::prompt_for(std::string_view label) const {
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i] == label) return prompts_[i];
  }
  throw LookupError("no prompt for class '" + std::string(label) + "'");
}

PromptSet build_prompts(const std::vector<std::string>& classes, std::string_view prompt_template) {
  const auto pos = prompt_template.find(kPlaceholder);
  if (pos == std::string_view::npos ||
      prompt_template.find(kPlaceholder, pos + 1) != std::string_view::npos) {
    throw ConfigError("prompt template must contain exactly one {label}: '" +
                      std::string(prompt_template) + "'");
  }
  const auto braces = std::count_if(prompt_template.begin(), prompt_template.end(),
                                    [](char c) { return c == '{' || c == '}'; });
  if (braces != 2) {
    throw ConfigError("prompt template has stray braces: '" + std::string(prompt_template) + "'");
  }
  if (classes.empty()) throw ConfigError("no classes configured");
  PromptSet set;
  set.template_ = std::string(prompt_template);
  set.classes_ = classes;
  for (const auto& c : classes) {
    std::string p(prompt_template);
    p.replace(pos, kPlaceholder.size(), c);
    set.prompts_.push_back(std::move(p));
  }
  return set;
}

DatasetManifest::DatasetManifest(std::vector<std::string> classes, std::set<std::string> wsi_ids,
                                 std::vector<PatchRecord> patches)
    : classes_(std::move(classes)), wsi_ids_(std::move(wsi_ids)), patches_(std::move(patches)) {
  if (classes_.empty()) throw ValidationError("manifest has no classes");
  std::set<std::string> seen_classes;
  for (const auto& c : classes_) {
    if (!seen_classes.insert(c).second) throw ValidationError("duplicate class '" + c + "'");
  }
  for (std::size_t i = 0; i < patches_.size(); ++i) {
    const auto& p = patches_[i];
    if (!seen_classes.contains(p.label)) {
      throw ValidationError("patch '" + p.id + "' has unknown label '" + p.label + "'");
    }
    if (!wsi_ids_.contains(p.wsi_id)) {
      throw ValidationError("patch '" + p.id + "' references undeclared WSI '" + p.wsi_id + "'");
    }
    if (!by_id_.emplace(p.id, i).second) {
      throw ValidationError("duplicate patch id '" + p.id + "'");
    }
  }
}

const PatchRecord& DatasetManifest::patch(std::string_view id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw LookupError("unknown patch id '" + std::string(id) + "'");
  return patches_[it->second];
}

bool DatasetManifest::contains(std::string_view id) const { return by_id_.find(id) != by_id_.end(); }

int DatasetManifest::class_index(std::string_view label) const {
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i] == label) return static_cast<int>(i);
  }
  throw LookupError("unknown class '" + std::string(label) + "'");
}

std::filesystem::path DatasetManifest::patch_path(const PatchRecord& rec) const {
  std::filesystem::path p(rec.path);
  return p.is_absolute() ? p : base_dir_ / p;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw IoError("manifest not found: '" + path.string() + "'");
  }
  const auto rows = read_jsonl(path);
  if (rows.empty() || rows.front().value("kind", "") != "header") {
    throw ValidationError(path.string() + ": first record must be the header");
  }
  try {
    const auto& head = rows.front();
    auto classes = head.at("classes").get<std::vector<std::string>>();
    auto wsi_list = head.at("wsi_ids").get<std::vector<std::string>>();
    std::set<std::string> wsi_ids(wsi_list.begin(), wsi_list.end());
    std::vector<PatchRecord> patches;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.value("kind", "") != "patch") {
        throw ValidationError(path.string() + ": record " + std::to_string(i + 1) +
                              " is not a patch record");
      }
      PatchRecord p;
      p.id = r.at("id").get<std::string>();
      p.wsi_id = r.at("wsi_id").get<std::string>();
      p.label = r.at("label").get<std::string>();
      p.path = r.at("path").get<std::string>();
      const auto b = r.at("bbox").get<std::vector<int>>();
      if (b.size() != 4) throw ValidationError("patch '" + p.id + "': bbox needs 4 values");
      p.source_bbox = {b[0], b[1], b[2], b[3]};
      patches.push_back(std::move(p));
    }
    DatasetManifest m(std::move(classes), std::move(wsi_ids), std::move(patches));
    m.set_base_dir(path.parent_path());
    for (const auto& p : m.patches()) {
      if (!std::filesystem::exists(m.patch_path(p))) {
        throw ValidationError("patch '" + p.id + "': file not found: '" + m.patch_path(p).string() + "'");
      }
    }
    return m;
  } catch (const Json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ostringstream os;
  OrderedJson head;
  head["kind"] = "header";
  head["classes"] = manifest.classes();
  head["wsi_ids"] = std::vector<std::string>(manifest.wsi_ids().begin(), manifest.wsi_ids().end());
  os << head.dump() << '\n';
  for (const auto& p : manifest.patches()) {
    OrderedJson r;
    r["kind"] = "patch";
    r["id"] = p.id;
    r["wsi_id"] = p.wsi_id;
    r["label"] = p.label;
    r["path"] = p.path;
    r["bbox"] = {p.source_bbox.x_min, p.source_bbox.y_min, p.source_bbox.x_max,
                 p.source_bbox.y_max};
    os << r.dump() << '\n';
  }
  write_text(path, os.str());
}

std::vector<GlomerulusAnnotation> read_annotations(const std::filesystem::path& path,
                                                   const std::vector<std::string>& classes) {
  const std::set<std::string> known(classes.begin(), classes.end());
  std::vector<GlomerulusAnnotation> out;
  for (const auto& r : read_jsonl(path)) {
    GlomerulusAnnotation a;
    try {
      a.wsi_id = r.at("wsi_id").get<std::string>();
      a.glom_id = r.at("glom_id").get<std::string>();
      a.label = r.at("label").get<std::string>();
      a.bbox = {r.at("x_min").get<int>(), r.at("y_min").get<int>(), r.at("x_max").get<int>(),
                r.at("y_max").get<int>()};
    } catch (const Json::exception& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
    if (!known.contains(a.label)) {
      throw ValidationError("annotation '" + a.glom_id + "' has unknown label '" + a.label + "'");
    }
    check_bbox(a.bbox, a.glom_id);
    out.push_back(std::move(a));
  }
  return out;
}

PrepareResult prepare_dataset(const std::vector<GlomerulusAnnotation>& annotations,
                              const std::filesystem::path& slide_dir,
                              const std::filesystem::path& out_dir,
                              const std::vector<std::string>& classes, int expansion) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "patches");
  std::map<std::string, std::vector<const GlomerulusAnnotation*>> by_slide;
  for (const auto& a : annotations) by_slide[a.wsi_id].push_back(&a);

  PrepareResult result;
  std::vector<PatchRecord> records;
  std::set<std::string> wsi_ids;
  for (const auto& [wsi, anns] : by_slide) {
    const Image slide = read_png(slide_dir / (wsi + ".png"));
    for (const auto* a : anns) {
      SlidePatch patch;
      try {
        patch = extract_patch(slide, *a, expansion);
      } catch (const ValidationError& e) {
        result.rejected.push_back(a->glom_id + ": " + e.what());
        continue;
      }
      const std::string rel = "patches/" + wsi + "__" + a->glom_id + ".png";
      write_png(out_dir / rel, patch.pixels);
      records.push_back({a->glom_id, wsi, a->label, rel, a->bbox});
      wsi_ids.insert(wsi);
    }
  }
  result.manifest = DatasetManifest(classes, std::move(wsi_ids), std::move(records));
  result.manifest.set_base_dir(out_dir);
  save_manifest(out_dir / "manifest.jsonl", result.manifest);
  return result;
}

}  // namespace fsvlm
