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

#include "fsvlm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fsvlm/error.hpp"
#include "fsvlm/image.hpp"
#include "fsvlm/jsonl.hpp"
#include "fsvlm/rng.hpp"

namespace fsvlm {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Look {
  double rgb[3];
  double stripe_angle;
};

Look class_look(std::size_t c, std::size_t n, double amplitude) {
  // Hues spread around the wheel; stripes rotate with the class.
  const double hue = 2 * kPi * static_cast<double>(c) / static_cast<double>(n);
  Look l{};
  for (int k = 0; k < 3; ++k) l.rgb[k] = 140 + amplitude * std::cos(hue - 2 * kPi * k / 3.0);
  l.stripe_angle = kPi * static_cast<double>(c) / static_cast<double>(n);
  return l;
}

std::uint8_t clamp_px(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

}  // namespace

void write_annotations(const std::filesystem::path& path, const std::vector<GlomerulusAnnotation>& items) {
  std::string text;
  for (const auto& a : items) {
    OrderedJson j;
    j["wsi_id"] = a.wsi_id;
    j["glom_id"] = a.glom_id;
    j["label"] = a.label;
    j["x_min"] = a.bbox.x_min;
    j["y_min"] = a.bbox.y_min;
    j["x_max"] = a.bbox.x_max;
    j["y_max"] = a.bbox.y_max;
    text += j.dump() + "\n";
  }
  write_text(path, text);
}

SyntheticDataset generate_synthetic(const std::filesystem::path& dir, const SyntheticOptions& opt) {
  if (opt.classes.size() < 2) throw ConfigError("synthetic data needs at least two classes");
  if (opt.train_wsis < 1 || opt.val_wsis < 1) throw ConfigError("synthetic data needs train and val slides");
  if (opt.cell < 120) throw ConfigError("synthetic cell size must be >= 120");

  SyntheticDataset ds;
  ds.slide_dir = dir / "slides";
  ds.annotations = dir / "annotations.jsonl";
  ds.classes = opt.classes;
  std::filesystem::create_directories(ds.slide_dir);

  const std::size_t n_classes = opt.classes.size();
  const int total_wsis = opt.train_wsis + opt.val_wsis;
  for (int w = 0; w < total_wsis; ++w) {
    const bool is_train = w < opt.train_wsis;
    const std::string wsi = (is_train ? "train_wsi_" : "val_wsi_") + std::to_string(is_train ? w : w - opt.train_wsis);
    (is_train ? ds.split.train_wsi_ids : ds.split.val_wsi_ids).insert(wsi);
    Engine rng(derive_seed(opt.seed, wsi));

    const int per_class = is_train ? opt.train_per_class_per_wsi : opt.val_per_class_per_wsi;
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < n_classes; ++c) labels.insert(labels.end(), static_cast<std::size_t>(per_class), c);
    shuffle(labels, rng);
    const int cols = 10;
    const int rows = static_cast<int>((labels.size() + cols - 1) / cols);
    Image slide(cols * opt.cell, rows * opt.cell);
    // Slide-level stain shift mimics scanner variation between slides.
    const double stain = uniform(rng, -12, 12);
    for (int y = 0; y < slide.height; ++y) {
      for (int x = 0; x < slide.width; ++x) {
        auto* p = slide.at(x, y);
        const double n = normal(rng, 0, 6);
        p[0] = clamp_px(238 + n + stain);
        p[1] = clamp_px(222 + n);
        p[2] = clamp_px(230 + n - stain);
      }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const Look look = class_look(labels[i], n_classes, opt.color_separation);
      const int gx = static_cast<int>(i) % cols;
      const int gy = static_cast<int>(i) / cols;
      const double r = uniform(rng, 0.16, 0.21) * opt.cell;
      const double cx = (gx + 0.5) * opt.cell + uniform(rng, -0.05, 0.05) * opt.cell;
      const double cy = (gy + 0.5) * opt.cell + uniform(rng, -0.05, 0.05) * opt.cell;
      const double jitter[3] = {normal(rng, 0, 10), normal(rng, 0, 10), normal(rng, 0, 10)};
      const double phase = uniform(rng, 0, 2 * kPi);
      const double ca = std::cos(look.stripe_angle), sa = std::sin(look.stripe_angle);
      const int x0 = static_cast<int>(std::floor(cx - r)), x1 = static_cast<int>(std::ceil(cx + r));
      const int y0 = static_cast<int>(std::floor(cy - r)), y1 = static_cast<int>(std::ceil(cy + r));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double dx = x - cx, dy = y - cy;
          if (dx * dx + dy * dy > r * r) continue;
          const double stripe = 28 * std::sin(2 * kPi * (ca * dx + sa * dy) / 10.0 + phase);
          auto* p = slide.at(x, y);
          for (int k = 0; k < 3; ++k) p[k] = clamp_px(look.rgb[k] + jitter[k] + stripe + normal(rng, 0, 12));
        }
      }
      GlomerulusAnnotation a;
      a.wsi_id = wsi;
      a.glom_id = wsi + "_g" + std::to_string(i);
      a.label = opt.classes[labels[i]];
      a.bbox = {x0, y0, x1 + 1, y1 + 1};
      ds.items.push_back(std::move(a));
    }
    write_png(ds.slide_dir / (wsi + ".png"), slide);
  }
  write_annotations(ds.annotations, ds.items);
  save_split(dir / "split.json", ds.split);
  return ds;
}

Json synthetic_experiment_json() {
  return Json{{"backbones", {"toy"}},
              {"strategies", {"vanilla", "lora", "adapter", "classifier"}},
              {"shots", {0, 1, 2, 4, 8, 16, 32}},
              {"n_runs", 10},
              {"master_seed", 0},
              {"schedule", {{"max_epochs", 30}, {"patience", 6}, {"warmup_steps", 3}, {"min_delta", 1e-4}}},
              {"learning_rates", {{"vanilla", 1e-3}, {"lora", 3e-3}, {"adapter", 3e-3}, {"classifier", 3e-3}}},
              {"paths", {{"manifest", "dataset/manifest.jsonl"}, {"split", "split.json"}, {"output", "results"}}}};
}

}  // namespace fsvlm
