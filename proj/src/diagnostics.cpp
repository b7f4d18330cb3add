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

#include "fsvlm/diagnostics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "fsvlm/error.hpp"
#include "fsvlm/rng.hpp"

namespace fsvlm {

namespace {

using nn::Matrix;

Matrix normalized_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (!(n > 0) || !std::isfinite(n)) throw ValidationError("row " + std::to_string(r) + " has no direction");
    out.row(r) = x.row(r) / n;
  }
  return out;
}

void check_pairing(const Matrix& images, const Matrix& texts, std::span<const int> labels) {
  if (images.rows() == 0) throw ValidationError("no image embeddings");
  if (static_cast<std::size_t>(images.rows()) != labels.size()) {
    throw ValidationError("one label per image embedding is required");
  }
  if (images.cols() != texts.cols()) throw DimensionError("image and text embeddings differ in width");
  for (int y : labels) {
    if (y < 0 || y >= texts.rows()) {
      throw LookupError("no text embedding for class index " + std::to_string(y));
    }
  }
}

// Marching squares over a row-major grid; emits "M x y L x y" segments.
std::string contour_path(const std::vector<double>& f, int gx, int gy, double level,
                         const std::function<std::pair<double, double>(double, double)>& to_svg) {
  std::string d;
  auto at = [&](int i, int j) { return f[static_cast<std::size_t>(j) * gx + i]; };
  auto interp = [&](double i0, double j0, double v0, double i1, double j1, double v1) {
    const double t = (level - v0) / (v1 - v0);
    return std::pair<double, double>{i0 + t * (i1 - i0), j0 + t * (j1 - j0)};
  };
  auto seg = [&](std::pair<double, double> a, std::pair<double, double> b) {
    const auto pa = to_svg(a.first, a.second);
    const auto pb = to_svg(b.first, b.second);
    d += "M" + svg::num(pa.first) + " " + svg::num(pa.second) + "L" + svg::num(pb.first) + " " +
         svg::num(pb.second);
  };
  for (int j = 0; j + 1 < gy; ++j) {
    for (int i = 0; i + 1 < gx; ++i) {
      const double v0 = at(i, j), v1 = at(i + 1, j), v2 = at(i + 1, j + 1), v3 = at(i, j + 1);
      const int code = (v0 > level) | (v1 > level) << 1 | (v2 > level) << 2 | (v3 > level) << 3;
      if (code == 0 || code == 15) continue;
      const auto bottom = [&] { return interp(i, j, v0, i + 1, j, v1); };
      const auto right = [&] { return interp(i + 1, j, v1, i + 1, j + 1, v2); };
      const auto top = [&] { return interp(i, j + 1, v3, i + 1, j + 1, v2); };
      const auto left = [&] { return interp(i, j, v0, i, j + 1, v3); };
      const bool center_high = (v0 + v1 + v2 + v3) / 4 > level;
      switch (code) {
        case 1: case 14: seg(left(), bottom()); break;
        case 2: case 13: seg(bottom(), right()); break;
        case 3: case 12: seg(left(), right()); break;
        case 4: case 11: seg(right(), top()); break;
        case 6: case 9: seg(bottom(), top()); break;
        case 7: case 8: seg(left(), top()); break;
        case 5:
          if (center_high) { seg(left(), top()); seg(bottom(), right()); }
          else { seg(left(), bottom()); seg(right(), top()); }
          break;
        case 10:
          if (center_high) { seg(left(), bottom()); seg(right(), top()); }
          else { seg(left(), top()); seg(bottom(), right()); }
          break;
        default: break;
      }
    }
  }
  return d;
}

}  // namespace

double alignment(const Matrix& images, const Matrix& texts, std::span<const int> labels) {
  check_pairing(images, texts, labels);
  const Matrix z = normalized_rows(images);
  const Matrix w = normalized_rows(texts);
  double sum = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) sum += z.row(i).dot(w.row(labels[static_cast<std::size_t>(i)]));
  return sum / static_cast<double>(z.rows());
}

double similarity_gap(const Matrix& images, const Matrix& texts, std::span<const int> labels, bool strict) {
  check_pairing(images, texts, labels);
  const auto n = images.rows();
  if (n < 2) throw InsufficientDataError("similarity gap needs at least two samples");
  const Matrix z = normalized_rows(images);
  const Matrix w = normalized_rows(texts);
  // Sum of w_{y_j} over all j, and per class counts.
  nn::RowVector total = nn::RowVector::Zero(w.cols());
  std::vector<double> count(static_cast<std::size_t>(w.rows()), 0.0);
  for (int y : labels) {
    total += w.row(y);
    count[static_cast<std::size_t>(y)] += 1;
  }
  double pos = 0, neg = 0, pairs = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const double self = z.row(i).dot(w.row(y));
    pos += self;
    if (strict) {
      neg += z.row(i).dot(total) - count[static_cast<std::size_t>(y)] * self;
      pairs += static_cast<double>(n) - count[static_cast<std::size_t>(y)];
    } else {
      neg += z.row(i).dot(total) - self;
    }
  }
  if (!strict) pairs = static_cast<double>(n) * static_cast<double>(n - 1);
  if (pairs == 0) throw InsufficientDataError("strict similarity gap needs two classes");
  return pos / static_cast<double>(n) - neg / pairs;
}

Json UmapParams::to_json() const {
  return Json{{"n_neighbors", n_neighbors}, {"min_dist", min_dist}, {"spread", spread},
              {"n_epochs", n_epochs}, {"negative_sample_rate", negative_sample_rate},
              {"learning_rate", learning_rate}, {"seed", seed}};
}

UmapParams UmapParams::from_json(const Json& j) {
  UmapParams p;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "n_neighbors") p.n_neighbors = v.get<int>();
      else if (k == "min_dist") p.min_dist = v.get<double>();
      else if (k == "spread") p.spread = v.get<double>();
      else if (k == "n_epochs") p.n_epochs = v.get<int>();
      else if (k == "negative_sample_rate") p.negative_sample_rate = v.get<int>();
      else if (k == "learning_rate") p.learning_rate = v.get<double>();
      else if (k == "seed") p.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown projection key '" + k + "'");
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("projection: ") + e.what());
  }
  if (p.n_neighbors < 2 || p.n_epochs < 1 || !(p.min_dist >= 0) || !(p.spread > 0) ||
      p.negative_sample_rate < 0 || !(p.learning_rate > 0)) {
    throw ConfigError("projection parameters out of range");
  }
  return p;
}

std::pair<double, double> fit_umap_curve(double min_dist, double spread) {
  constexpr int kSamples = 300;
  std::vector<double> xs(kSamples), ys(kSamples);
  for (int k = 0; k < kSamples; ++k) {
    xs[k] = 3.0 * spread * k / (kSamples - 1);
    ys[k] = xs[k] < min_dist ? 1.0 : std::exp(-(xs[k] - min_dist) / spread);
  }
  auto cost = [&](double a, double b) {
    double c = 0;
    for (int k = 0; k < kSamples; ++k) {
      const double r = 1.0 / (1.0 + a * std::pow(xs[k], 2 * b)) - ys[k];
      c += r * r;
    }
    return c;
  };
  // Levenberg-Marquardt on (a, b).
  double a = 1.0, b = 1.0, lambda = 1e-3;
  double current = cost(a, b);
  for (int it = 0; it < 500; ++it) {
    Eigen::Matrix2d jtj = Eigen::Matrix2d::Zero();
    Eigen::Vector2d jtr = Eigen::Vector2d::Zero();
    for (int k = 0; k < kSamples; ++k) {
      const double x = xs[k];
      if (x <= 0) continue;
      const double p = std::pow(x, 2 * b);
      const double den = 1.0 + a * p;
      const double r = 1.0 / den - ys[k];
      Eigen::Vector2d g(-p / (den * den), -a * p * 2.0 * std::log(x) / (den * den));
      jtj += g * g.transpose();
      jtr += g * r;
    }
    Eigen::Matrix2d damped = jtj;
    damped.diagonal() *= 1.0 + lambda;
    const Eigen::Vector2d step = damped.ldlt().solve(-jtr);
    const double na = a + step(0), nb = b + step(1);
    const double next = (na > 0 && nb > 0) ? cost(na, nb) : std::numeric_limits<double>::infinity();
    if (next < current) {
      const bool done = current - next < 1e-14;
      a = na;
      b = nb;
      current = next;
      lambda *= 0.3;
      if (done) break;
    } else {
      lambda *= 10;
      if (lambda > 1e12) break;
    }
  }
  return {a, b};
}

Matrix project_2d(const Matrix& x, const UmapParams& params) {
  const auto n = x.rows();
  if (n < 4) throw InsufficientDataError("projection needs at least 4 rows, got " + std::to_string(n));
  if (!x.allFinite()) throw ValidationError("projection input has non-finite values");
  const int k = static_cast<int>(std::min<Eigen::Index>(params.n_neighbors, n - 1));

  // Exact k nearest neighbours.
  std::vector<std::vector<std::pair<double, int>>> knn(static_cast<std::size_t>(n));
  std::vector<std::pair<double, int>> row(static_cast<std::size_t>(n - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) row[c++] = {(x.row(i) - x.row(j)).norm(), static_cast<int>(j)};
    }
    std::partial_sort(row.begin(), row.begin() + k, row.end());
    knn[static_cast<std::size_t>(i)].assign(row.begin(), row.begin() + k);
  }

  // Smooth kNN distances and membership strengths.
  double mean_all = 0;
  for (const auto& nb : knn) {
    for (const auto& [d, _] : nb) mean_all += d;
  }
  mean_all /= static_cast<double>(n * k);
  const double target = std::log2(static_cast<double>(k));
  std::map<std::pair<int, int>, double> directed;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& nb = knn[static_cast<std::size_t>(i)];
    double rho = 0;
    for (const auto& [d, _] : nb) {
      if (d > 0) {
        rho = d;
        break;
      }
    }
    double lo = 0, hi = std::numeric_limits<double>::infinity(), sigma = 1.0;
    for (int it = 0; it < 64; ++it) {
      double psum = 0;
      for (const auto& [d, _] : nb) psum += std::exp(-std::max(0.0, d - rho) / sigma);
      if (std::abs(psum - target) < 1e-5) break;
      if (psum > target) {
        hi = sigma;
        sigma = (lo + hi) / 2;
      } else {
        lo = sigma;
        sigma = std::isinf(hi) ? sigma * 2 : (lo + hi) / 2;
      }
    }
    double mean_i = 0;
    for (const auto& [d, _] : nb) mean_i += d;
    mean_i /= k;
    sigma = std::max(sigma, 1e-3 * (rho > 0 ? mean_i : mean_all));
    for (const auto& [d, j] : nb) {
      directed[{static_cast<int>(i), j}] = d - rho <= 0 ? 1.0 : std::exp(-(d - rho) / sigma);
    }
  }
  struct Edge {
    int head, tail;
    double weight;
  };
  std::vector<Edge> edges;
  for (const auto& [key, w] : directed) {
    auto rev = directed.find({key.second, key.first});
    const double wt = rev == directed.end() ? 0.0 : rev->second;
    const double sym = w + wt - w * wt;
    edges.push_back({key.first, key.second, sym});
    if (rev == directed.end()) edges.push_back({key.second, key.first, sym});
  }
  std::sort(edges.begin(), edges.end(),
            [](const Edge& a, const Edge& b) { return std::tie(a.head, a.tail) < std::tie(b.head, b.tail); });
  double max_w = 0;
  for (const auto& e : edges) max_w = std::max(max_w, e.weight);
  std::erase_if(edges, [&](const Edge& e) { return e.weight < max_w / params.n_epochs; });

  // Principal-component initialisation scaled to [-10, 10].
  const Matrix centered = x.rowwise() - x.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Eigen::MatrixXd(centered.transpose() * centered));
  Matrix y(n, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(eig.eigenvectors().cols() - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    y.col(c) = centered * v;
  }
  const double extent = y.cwiseAbs().maxCoeff();
  if (extent > 0) y *= 10.0 / extent;
  Engine rng(params.seed);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] += normal(rng, 0.0, 1e-4);

  const auto [a, b] = fit_umap_curve(params.min_dist, params.spread);
  const std::size_t m = edges.size();
  std::vector<double> eps(m), next(m), eps_neg(m), next_neg(m);
  for (std::size_t e = 0; e < m; ++e) {
    eps[e] = max_w / edges[e].weight;
    next[e] = eps[e];
    eps_neg[e] = params.negative_sample_rate > 0 ? eps[e] / params.negative_sample_rate : 0;
    next_neg[e] = eps_neg[e];
  }
  auto clip = [](double v) { return std::clamp(v, -4.0, 4.0); };
  for (int epoch = 0; epoch < params.n_epochs; ++epoch) {
    const double alpha = params.learning_rate * (1.0 - static_cast<double>(epoch) / params.n_epochs);
    for (std::size_t e = 0; e < m; ++e) {
      if (next[e] > epoch) continue;
      const int i = edges[e].head, j = edges[e].tail;
      double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
      double d2 = dx * dx + dy * dy;
      if (d2 > 0) {
        const double g = -2.0 * a * b * std::pow(d2, b - 1.0) / (a * std::pow(d2, b) + 1.0);
        const double gx = clip(g * dx) * alpha, gy = clip(g * dy) * alpha;
        y(i, 0) += gx;
        y(i, 1) += gy;
        y(j, 0) -= gx;
        y(j, 1) -= gy;
      }
      next[e] += eps[e];
      if (params.negative_sample_rate == 0) continue;
      const int n_neg = static_cast<int>((epoch - next_neg[e]) / eps_neg[e]);
      for (int s = 0; s < n_neg; ++s) {
        const auto kk = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
        if (kk == i) continue;
        dx = y(i, 0) - y(kk, 0);
        dy = y(i, 1) - y(kk, 1);
        d2 = dx * dx + dy * dy;
        if (d2 > 0) {
          const double g = 2.0 * b / ((0.001 + d2) * (a * std::pow(d2, b) + 1.0));
          y(i, 0) += clip(g * dx) * alpha;
          y(i, 1) += clip(g * dy) * alpha;
        } else {
          y(i, 0) += 4.0 * alpha;
          y(i, 1) += 4.0 * alpha;
        }
      }
      next_neg[e] += n_neg * eps_neg[e];
    }
  }
  return y;
}

double intra_class_distance(const Matrix& points, std::span<const int> labels) {
  if (static_cast<std::size_t>(points.rows()) != labels.size()) {
    throw ValidationError("intra-class distance: one label per point is required");
  }
  std::map<int, std::vector<Eigen::Index>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<Eigen::Index>(i));
  double sum = 0;
  int classes = 0;
  for (const auto& [_, idx] : members) {
    if (idx.size() < 2) continue;
    double total = 0;
    for (std::size_t p = 0; p < idx.size(); ++p) {
      for (std::size_t q = p + 1; q < idx.size(); ++q) total += (points.row(idx[p]) - points.row(idx[q])).norm();
    }
    const double nc = static_cast<double>(idx.size());
    sum += 2.0 * total / (nc * (nc - 1));
    ++classes;
  }
  if (classes == 0) throw InsufficientDataError("intra-class distance needs a class with at least two points");
  return sum / classes;
}

double silhouette_cosine(const Matrix& x, std::span<const int> labels) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) {
    throw ValidationError("silhouette: one label per row is required");
  }
  const Matrix z = normalized_rows(x);
  std::map<int, std::pair<nn::RowVector, double>> sums;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = sums.try_emplace(labels[i], nn::RowVector::Zero(z.cols()), 0.0);
    it->second.first += z.row(static_cast<Eigen::Index>(i));
    it->second.second += 1;
  }
  if (sums.size() < 2) throw InsufficientDataError("silhouette needs at least two classes");
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = z.row(static_cast<Eigen::Index>(i));
    const auto& [own_sum, own_n] = sums.at(labels[i]);
    if (own_n < 2) continue;
    // Mean cosine distance to the rest of the own class, excluding self.
    const double a = 1.0 - (row.dot(own_sum) - row.squaredNorm()) / (own_n - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, entry] : sums) {
      if (label == labels[i]) continue;
      b = std::min(b, 1.0 - row.dot(entry.first) / entry.second);
    }
    const double denom = std::max(a, b);
    if (denom > 0) total += (b - a) / denom;
  }
  return total / static_cast<double>(labels.size());
}

double silhouette_euclidean(const Matrix& x, std::span<const int> labels) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) {
    throw ValidationError("silhouette: one label per row is required");
  }
  std::map<int, double> count;
  for (int y : labels) count[y] += 1;
  if (count.size() < 2) throw InsufficientDataError("silhouette needs at least two classes");
  double total = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::map<int, double> dist;
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      if (j != i) dist[labels[static_cast<std::size_t>(j)]] += (x.row(i) - x.row(j)).norm();
    }
    const int own = labels[static_cast<std::size_t>(i)];
    if (count[own] < 2) continue;
    const double a = dist[own] / (count[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, n] : count) {
      if (label != own) b = std::min(b, dist[label] / n);
    }
    const double denom = std::max(a, b);
    if (denom > 0) total += (b - a) / denom;
  }
  return total / static_cast<double>(x.rows());
}

Json DiagnosticsReport::summary_json() const {
  return Json{{"alignment", alignment},
              {"similarity_gap", similarity_gap},
              {"intra_class_distance", intra_class_distance},
              {"silhouette", silhouette},
              {"text_used_in_adaptation", text_used_in_adaptation}};
}

Json DiagnosticsReport::to_json() const {
  Json j = summary_json();
  Json pts = Json::array();
  for (Eigen::Index r = 0; r < projection.rows(); ++r) pts.push_back({projection(r, 0), projection(r, 1)});
  Json mods = Json::array();
  for (auto m : modality) mods.push_back(modality_name(m));
  j["projection"] = Json{{"points", pts}, {"labels", labels}, {"modality", mods}, {"class_names", class_names}};
  return j;
}

DiagnosticsReport DiagnosticsReport::from_json(const Json& j) {
  DiagnosticsReport r;
  try {
    r.alignment = j.at("alignment").get<double>();
    r.similarity_gap = j.at("similarity_gap").get<double>();
    r.intra_class_distance = j.at("intra_class_distance").get<double>();
    r.silhouette = j.at("silhouette").get<double>();
    r.text_used_in_adaptation = j.value("text_used_in_adaptation", true);
    if (j.contains("projection")) {
      const auto& p = j.at("projection");
      const auto& pts = p.at("points");
      r.projection.resize(static_cast<Eigen::Index>(pts.size()), 2);
      for (std::size_t i = 0; i < pts.size(); ++i) {
        r.projection(static_cast<Eigen::Index>(i), 0) = pts[i].at(0).get<double>();
        r.projection(static_cast<Eigen::Index>(i), 1) = pts[i].at(1).get<double>();
      }
      r.labels = p.at("labels").get<std::vector<int>>();
      for (const auto& m : p.at("modality")) r.modality.push_back(parse_modality(m.get<std::string>()));
      r.class_names = p.at("class_names").get<std::vector<std::string>>();
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("diagnostics record: ") + e.what());
  }
  return r;
}

DiagnosticsReport diagnose(const EmbeddingBatch& images, const EmbeddingBatch& texts, const UmapParams& params,
                           const Matrix* cluster_features) {
  if (images.labels.size() != static_cast<std::size_t>(images.size())) {
    throw ValidationError("diagnostics need labelled image embeddings");
  }
  DiagnosticsReport r;
  r.class_names = texts.class_names.empty() ? images.class_names : texts.class_names;
  r.alignment = alignment(images.vectors, texts.vectors, images.labels);
  r.similarity_gap = similarity_gap(images.vectors, texts.vectors, images.labels);
  const Matrix& features = cluster_features != nullptr ? *cluster_features : images.vectors;
  if (features.rows() != images.size()) throw DimensionError("cluster features need one row per image");
  r.silhouette = silhouette_cosine(features, images.labels);
  r.labels = images.labels;
  r.modality.assign(static_cast<std::size_t>(images.size()), Modality::kImage);
  if (cluster_features != nullptr) {
    r.text_used_in_adaptation = false;
    r.projection = project_2d(features, params);
  } else {
    Matrix joint(images.size() + texts.size(), images.dim());
    joint << images.vectors, texts.vectors;
    r.projection = project_2d(joint, params);
    for (Eigen::Index c = 0; c < texts.size(); ++c) {
      r.labels.push_back(texts.labels.empty() ? static_cast<int>(c) : texts.labels[static_cast<std::size_t>(c)]);
      r.modality.push_back(Modality::kText);
    }
  }
  r.intra_class_distance = intra_class_distance(r.projection.topRows(images.size()), images.labels);
  return r;
}

void write_diagnostics(const std::filesystem::path& path, const DiagnosticsReport& report, const Json& provenance) {
  OrderedJson j;
  j["provenance"] = provenance;
  const Json body = report.to_json();
  for (const char* key : {"alignment", "similarity_gap", "intra_class_distance", "silhouette",
                          "text_used_in_adaptation", "projection"}) {
    j[key] = body.at(key);
  }
  write_text(path, j.dump(1) + "\n");
}

std::vector<std::string> draw_density_panel(svg::Document& doc, const PanelBox& box, const Matrix& points,
                                            std::span<const int> labels, std::span<const Modality> modality,
                                            const std::vector<std::string>& class_names, bool show_text,
                                            int grid, Json* bandwidths) {
  if (points.cols() != 2 || static_cast<std::size_t>(points.rows()) != labels.size() ||
      labels.size() != modality.size()) {
    throw DimensionError("density panel needs N x 2 points with one label and modality each");
  }
  if (grid < 8) throw ConfigError("density grid must be >= 8");
  std::vector<std::string> warnings;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    if (modality[static_cast<std::size_t>(i)] == Modality::kText && !show_text) continue;
    x0 = std::min(x0, points(i, 0));
    x1 = std::max(x1, points(i, 0));
    y0 = std::min(y0, points(i, 1));
    y1 = std::max(y1, points(i, 1));
  }
  if (!std::isfinite(x0)) throw InsufficientDataError("density panel has no points");
  const double px = std::max(x1 - x0, 1e-9) * 0.1, py = std::max(y1 - y0, 1e-9) * 0.1;
  x0 -= px;
  x1 += px;
  y0 -= py;
  y1 += py;
  auto to_svg = [&](double x, double y) {
    return std::pair<double, double>{box.x + (x - x0) / (x1 - x0) * box.w, box.y + box.h - (y - y0) / (y1 - y0) * box.h};
  };
  auto grid_to_svg = [&](double i, double j) {
    return to_svg(x0 + i / (grid - 1) * (x1 - x0), y0 + j / (grid - 1) * (y1 - y0));
  };
  doc.rect(box.x, box.y, box.w, box.h, "white", "#cccccc");

  Json bw = Json::object();
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == static_cast<int>(c) && modality[i] == Modality::kImage) idx.push_back(static_cast<Eigen::Index>(i));
    }
    if (idx.empty()) {
      warnings.push_back("class '" + class_names[c] + "' has no image points; omitted");
      continue;
    }
    // Scott's rule per axis: sigma * n^(-1/6) in two dimensions.
    const double n = static_cast<double>(idx.size());
    double h[2];
    for (int d = 0; d < 2; ++d) {
      double mean = 0, var = 0;
      for (auto i : idx) mean += points(i, d);
      mean /= n;
      for (auto i : idx) var += (points(i, d) - mean) * (points(i, d) - mean);
      const double sd = idx.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
      h[d] = sd * std::pow(n, -1.0 / 6.0);
      if (!(h[d] > 0)) h[d] = 0.05 * (d == 0 ? x1 - x0 : y1 - y0);
    }
    bw[class_names[c]] = {h[0], h[1]};
    std::vector<double> f(static_cast<std::size_t>(grid) * grid, 0.0);
    double peak = 0;
    for (int j = 0; j < grid; ++j) {
      const double gy = y0 + static_cast<double>(j) / (grid - 1) * (y1 - y0);
      for (int i = 0; i < grid; ++i) {
        const double gx = x0 + static_cast<double>(i) / (grid - 1) * (x1 - x0);
        double s = 0;
        for (auto p : idx) {
          const double u = (gx - points(p, 0)) / h[0], v = (gy - points(p, 1)) / h[1];
          s += std::exp(-0.5 * (u * u + v * v));
        }
        f[static_cast<std::size_t>(j) * grid + i] = s;
        peak = std::max(peak, s);
      }
    }
    const auto& color = svg::palette(c);
    int level_no = 0;
    for (double frac : {0.2, 0.5, 0.8}) {
      const std::string d = contour_path(f, grid, grid, frac * peak, grid_to_svg);
      if (!d.empty()) {
        doc.add("<path class=\"kde c" + std::to_string(c) + "\" d=\"" + d + "\" fill=\"none\" stroke=\"" + color +
                "\" stroke-width=\"" + svg::num(0.8 + 0.5 * level_no) + "\"/>");
      }
      ++level_no;
    }
    for (auto p : idx) {
      const auto [sx, sy] = to_svg(points(p, 0), points(p, 1));
      doc.circle(sx, sy, 1.6, color, 0.45);
    }
  }
  if (show_text) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (modality[i] != Modality::kText) continue;
      const auto [sx, sy] = to_svg(points(static_cast<Eigen::Index>(i), 0), points(static_cast<Eigen::Index>(i), 1));
      const auto& color = svg::palette(static_cast<std::size_t>(labels[i]));
      doc.add("<path class=\"text-marker\" d=\"M" + svg::num(sx) + " " + svg::num(sy - 6) + "L" + svg::num(sx + 5) +
              " " + svg::num(sy) + "L" + svg::num(sx) + " " + svg::num(sy + 6) + "L" + svg::num(sx - 5) + " " +
              svg::num(sy) + "Z\" fill=\"" + color + "\" stroke=\"black\" stroke-width=\"1\"/>");
    }
  }
  if (bandwidths != nullptr) *bandwidths = bw;
  return warnings;
}

std::vector<std::string> export_density_figure(const std::filesystem::path& path, const Matrix& points,
                                               std::span<const int> labels, std::span<const Modality> modality,
                                               const std::vector<std::string>& class_names,
                                               const DensityFigureOptions& options) {
  const double panel = 420, legend_w = 260, margin = 20, title_h = options.title.empty() ? 0 : 24;
  svg::Document doc(panel + legend_w + 3 * margin, panel + 2 * margin + title_h);
  Json bw;
  auto warnings = draw_density_panel(doc, {margin, margin + title_h, panel, panel}, points, labels, modality,
                                     class_names, options.show_text, options.grid, &bw);
  if (!options.title.empty()) doc.text(margin, margin + 14, options.title, 14);
  double ly = margin + title_h + 10;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    if (!bw.contains(class_names[c])) continue;
    doc.rect(2 * margin + panel, ly, 12, 12, svg::palette(c));
    doc.text(2 * margin + panel + 18, ly + 10, class_names[c], 11);
    ly += 18;
  }
  if (options.show_text) {
    doc.text(2 * margin + panel, ly + 14, "diamonds: text prompts; dots: images", 10);
  }
  Json meta{{"kde_bandwidth_rule", "scott"}, {"bandwidths", bw}, {"fingerprint", options.fingerprint},
            {"show_text", options.show_text}};
  doc.metadata(meta.dump());
  write_text(path, doc.str());
  return warnings;
}

}  // namespace fsvlm
