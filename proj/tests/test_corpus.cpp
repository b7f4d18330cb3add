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

#include "fsvlm/corpus.hpp"
#include "fsvlm/error.hpp"
#include "fsvlm/jsonl.hpp"

namespace fsvlm {
namespace {

namespace fs = std::filesystem;

Image gradient(int w, int h) {
  Image im(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto* p = im.at(x, y);
      p[0] = static_cast<std::uint8_t>(x % 256);
      p[1] = static_cast<std::uint8_t>(y % 256);
      p[2] = 17;
    }
  }
  return im;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

TEST(SquareCrop, ExpandsAndCentersOnLongSide) {
  const auto c = square_crop_box({100, 100, 200, 180}, 50);
  EXPECT_EQ(c, (BoundingBox{50, 40, 250, 240}));
}

TEST(SquareCrop, ZeroExpansionOnSquareIsIdentity) {
  EXPECT_EQ(square_crop_box({0, 0, 10, 10}, 0), (BoundingBox{0, 0, 10, 10}));
}

TEST(ExtractPatch, EdgeCropIsFilledWhite) {
  const Image slide = gradient(300, 300);
  const GlomerulusAnnotation ann{"w", "g", "A", {5, 5, 55, 105}};
  const auto p = extract_patch(slide, ann, 50);
  // Expanded box is 150 x 200, so the square side is 200.
  EXPECT_EQ(p.pixels.width, 200);
  EXPECT_EQ(p.pixels.height, 200);
  EXPECT_EQ(p.crop, (BoundingBox{-70, -45, 130, 155}));
  for (int y = 0; y < 200; ++y) {
    for (int x = 0; x < 70; ++x) ASSERT_EQ(p.pixels.at(x, y)[0], 255);
  }
  // Inside the slide the pixels are copied verbatim.
  EXPECT_EQ(p.pixels.at(70, 45)[0], 0);
  EXPECT_EQ(p.pixels.at(100, 100)[1], 55);
}

TEST(ExtractPatch, Deterministic) {
  const Image slide = gradient(300, 300);
  const GlomerulusAnnotation ann{"w", "g", "A", {100, 100, 200, 180}};
  EXPECT_EQ(extract_patch(slide, ann).pixels, extract_patch(slide, ann).pixels);
}

TEST(ExtractPatch, RejectsOutOfBoundsBox) {
  const Image slide = gradient(100, 100);
  EXPECT_THROW(extract_patch(slide, {"w", "g", "A", {50, 50, 150, 90}}), ValidationError);
  EXPECT_THROW(extract_patch(slide, {"w", "g", "A", {50, 50, 50, 90}}), ValidationError);
}

TEST(Prompts, DefaultTemplate) {
  const auto p = build_prompts({"Atubular Glomerulus"});
  EXPECT_EQ(p.prompts().front(), "A histopathology image of Atubular Glomerulus");
}

TEST(Prompts, IdentityTemplateAndOrder) {
  const std::vector<std::string> classes{"e", "d", "c", "b", "a"};
  const auto p = build_prompts(classes, "{label}");
  EXPECT_EQ(p.prompts(), classes);
  EXPECT_EQ(p.prompt_for("c"), "c");
  EXPECT_THROW(p.prompt_for("z"), LookupError);
}

TEST(Prompts, MalformedTemplate) {
  EXPECT_THROW(build_prompts({"a"}, "no placeholder"), ConfigError);
  EXPECT_THROW(build_prompts({"a"}, "{label} and {label}"), ConfigError);
}

TEST(Manifest, ValidAndInvalid) {
  const std::vector<PatchRecord> ok{{"g1", "w", "A", "a.png", {}}, {"g2", "w", "B", "b.png", {}}};
  EXPECT_NO_THROW(DatasetManifest({"A", "B"}, {"w"}, ok));
  EXPECT_THROW(DatasetManifest({"A", "B"}, {"w"}, {{"g1", "w", "Foo", "a.png", {}}}), ValidationError);
  EXPECT_THROW(DatasetManifest({"A", "B"}, {"w"}, {{"g1", "w", "A", "a.png", {}}, {"g1", "w", "B", "b.png", {}}}),
               ValidationError);
}

TEST(Manifest, PrepareAndReload) {
  TempDir dir("fsvlm_corpus_test");
  fs::create_directories(dir.path / "slides");
  write_png(dir.path / "slides" / "w1.png", gradient(300, 300));
  const std::vector<GlomerulusAnnotation> anns{{"w1", "g1", "A", {100, 100, 200, 180}},
                                              {"w1", "g2", "B", {10, 10, 60, 60}},
                                              {"w1", "bad", "A", {250, 250, 350, 350}}};
  const auto res = prepare_dataset(anns, dir.path / "slides", dir.path / "out", {"A", "B"});
  EXPECT_EQ(res.manifest.patches().size(), 2u);
  ASSERT_EQ(res.rejected.size(), 1u);
  EXPECT_NE(res.rejected[0].find("bad"), std::string::npos);

  const auto m = load_manifest(dir.path / "out" / "manifest.jsonl");
  EXPECT_EQ(m.classes(), (std::vector<std::string>{"A", "B"}));
  EXPECT_EQ(read_png(m.patch_path(m.patch("g1"))).width, 200);
  EXPECT_EQ(m.patch("g2").source_bbox, (BoundingBox{10, 10, 60, 60}));

  fs::remove(m.patch_path(m.patch("g2")));
  EXPECT_THROW(load_manifest(dir.path / "out" / "manifest.jsonl"), ValidationError);
}

TEST(Annotations, UnknownLabelRejected) {
  TempDir dir("fsvlm_ann_test");
  write_text(dir.path / "a.jsonl",
             R"({"wsi_id":"w","glom_id":"g","label":"Foo","x_min":0,"y_min":0,"x_max":5,"y_max":5})"
             "\n");
  EXPECT_THROW(read_annotations(dir.path / "a.jsonl", {"A"}), ValidationError);
}

}  // namespace
}  // namespace fsvlm
