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
#include <span>
#include <string>
#include <vector>

#include "fsvlm/autograd.hpp"
#include "fsvlm/encoder.hpp"
#include "fsvlm/jsonl.hpp"
#include "fsvlm/svg.hpp"

namespace fsvlm {

// Mean cosine between each image row and the text row of its class.
double alignment(const nn::Matrix& images, const nn::Matrix& texts, std::span<const int> labels);

// Mean positive similarity minus the mean of cos(z_i, w_{y_j}) over all
// ordered pairs i != j. `strict` drops pairs with y_j == y_i from the
// negative term.
double similarity_gap(const nn::Matrix& images, const nn::Matrix& texts, std::span<const int> labels,
                      bool strict = false);

struct UmapParams {
  int n_neighbors = 15;
  double min_dist = 0.1;
  double spread = 1.0;
  int n_epochs = 500;
  int negative_sample_rate = 5;
  double learning_rate = 1.0;
  std::uint64_t seed = 42;

  Json to_json() const;
  static UmapParams from_json(const Json& j);
};

// Curve parameters (a, b) of 1 / (1 + a d^(2b)) fitted to the min_dist/spread
// target.
std::pair<double, double> fit_umap_curve(double min_dist, double spread);

// Fuzzy neighbour-graph embedding into two dimensions, initialised from
// the top two principal components. Needs at least 4 rows.
nn::Matrix project_2d(const nn::Matrix& x, const UmapParams& params = {});

// Average over classes with >= 2 points of the mean pairwise distance.
double intra_class_distance(const nn::Matrix& points, std::span<const int> labels);

// Mean silhouette under cosine distance; singletons score 0.
double silhouette_cosine(const nn::Matrix& x, std::span<const int> labels);
double silhouette_euclidean(const nn::Matrix& x, std::span<const int> labels);

struct DiagnosticsReport {
  double alignment = 0;
  double similarity_gap = 0;
  double intra_class_distance = 0;
  double silhouette = 0;
  bool text_used_in_adaptation = true;
  nn::Matrix projection;  // N x 2
  std::vector<int> labels;
  std::vector<Modality> modality;
  std::vector<std::string> class_names;

  // Scalars only.
  Json summary_json() const;
  Json to_json() const;
  static DiagnosticsReport from_json(const Json& j);
};

// Alignment and gap use the image/text embeddings. Silhouette and the
// projection use `cluster_features` when given (classifier strategy),
// otherwise the image embeddings; text rows join the projection only in
// the latter case. ICD is measured on the projected image rows.
DiagnosticsReport diagnose(const EmbeddingBatch& images, const EmbeddingBatch& texts,
                           const UmapParams& params, const nn::Matrix* cluster_features = nullptr);

void write_diagnostics(const std::filesystem::path& path, const DiagnosticsReport& report, const Json& provenance);

struct DensityFigureOptions {
  std::string title;
  std::string fingerprint;
  bool show_text = true;
  int grid = 80;
};

// Per-class KDE contours over image points with text points overlaid as
// markers. Returns warnings (e.g. classes omitted for lack of points).
std::vector<std::string> export_density_figure(const std::filesystem::path& path, const nn::Matrix& points,
                                               std::span<const int> labels, std::span<const Modality> modality,
                                               const std::vector<std::string>& class_names,
                                               const DensityFigureOptions& options = {});

struct PanelBox {
  double x = 0, y = 0, w = 300, h = 300;
};

// Draws one density panel into `doc`; bandwidths go to `bandwidths` when
// non-null. Returns warnings as export_density_figure does.
std::vector<std::string> draw_density_panel(svg::Document& doc, const PanelBox& box, const nn::Matrix& points,
                                            std::span<const int> labels, std::span<const Modality> modality,
                                            const std::vector<std::string>& class_names, bool show_text,
                                            int grid, Json* bandwidths = nullptr);

}  // namespace fsvlm
