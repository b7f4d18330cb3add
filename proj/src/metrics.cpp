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

#include "fsvlm/metrics.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

#include "fsvlm/error.hpp"

namespace fsvlm {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": length mismatch");
  if (a == 0) throw ValidationError(std::string(what) + ": empty input");
}

}  // namespace

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  check_lengths(predictions.size(), labels.size(), "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double macro_f1(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
  check_lengths(predictions.size(), labels.size(), "macro_f1");
  if (num_classes < 1) throw ValidationError("macro_f1: num_classes must be >= 1");
  std::vector<std::size_t> tp(num_classes), fp(num_classes), fn(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int p = predictions[i], y = labels[i];
    if (p < 0 || p >= num_classes || y < 0 || y >= num_classes) {
      throw ValidationError("macro_f1: class index out of range");
    }
    if (p == y) {
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  double sum = 0;
  for (int c = 0; c < num_classes; ++c) {
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom > 0) sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return sum / num_classes;
}

double binary_auc(std::span<const double> scores, std::span<const bool> positive) {
  check_lengths(scores.size(), positive.size(), "auc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        rank_sum += mid_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("auc: needs at least one positive and one negative");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1) / 2.0) / (np * static_cast<double>(n_neg));
}

AucResult macro_auc(const nn::Matrix& probabilities, std::span<const int> labels) {
  check_lengths(static_cast<std::size_t>(probabilities.rows()), labels.size(), "macro_auc");
  const auto classes = probabilities.cols();
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes));
  for (int y : labels) {
    if (y < 0 || y >= classes) throw ValidationError("macro_auc: label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  if (std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }) < 2) {
    throw ValidationError("macro_auc: undefined with only one class present");
  }
  AucResult r;
  r.per_class.resize(static_cast<std::size_t>(classes));
  std::vector<double> scores(labels.size());
  auto pos = std::make_unique<bool[]>(labels.size());
  double sum = 0;
  int used = 0;
  for (Eigen::Index c = 0; c < classes; ++c) {
    const std::size_t n_pos = counts[static_cast<std::size_t>(c)];
    if (n_pos == 0 || n_pos == labels.size()) continue;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      scores[i] = probabilities(static_cast<Eigen::Index>(i), c);
      pos[i] = labels[i] == c;
    }
    const double auc = binary_auc(scores, std::span<const bool>(pos.get(), labels.size()));
    r.per_class[static_cast<std::size_t>(c)] = auc;
    sum += auc;
    ++used;
  }
  r.macro = sum / used;
  return r;
}

std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const bool> positive) {
  check_lengths(scores.size(), positive.size(), "roc_points");
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("roc_points: needs positives and negatives");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (positive[order[j]] ? tp : fp)++;
      ++j;
    }
    pts.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                   static_cast<double>(tp) / static_cast<double>(n_pos)});
    i = j;
  }
  return pts;
}

double trapezoid_area(std::span<const RocPoint> points) {
  double area = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].fpr - points[i - 1].fpr) * (points[i].tpr + points[i - 1].tpr) / 2.0;
  }
  return area;
}

EvalResult evaluate(const nn::Matrix& probabilities, std::span<const int> predictions,
                    std::span<const int> labels, const std::vector<std::string>& class_names) {
  if (static_cast<Eigen::Index>(class_names.size()) != probabilities.cols()) {
    throw ValidationError("evaluate: class name count differs from probability columns");
  }
  EvalResult r;
  r.class_names = class_names;
  r.accuracy = accuracy(predictions, labels);
  r.macro_f1 = macro_f1(predictions, labels, static_cast<int>(class_names.size()));
  const AucResult auc = macro_auc(probabilities, labels);
  r.macro_auc = auc.macro;
  r.per_class_auc = auc.per_class;
  r.roc.resize(class_names.size());
  std::vector<double> scores(labels.size());
  auto pos = std::make_unique<bool[]>(labels.size());
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    if (!auc.per_class[c]) continue;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      scores[i] = probabilities(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      pos[i] = labels[i] == static_cast<int>(c);
    }
    r.roc[c] = roc_points(scores, std::span<const bool>(pos.get(), labels.size()));
  }
  return r;
}

Json EvalResult::to_json() const {
  Json j;
  j["class_names"] = class_names;
  j["accuracy"] = accuracy;
  j["macro_f1"] = macro_f1;
  j["macro_auc"] = macro_auc;
  Json per = Json::array();
  for (const auto& a : per_class_auc) per.push_back(a ? Json(*a) : Json(nullptr));
  j["per_class_auc"] = per;
  Json roc_j = Json::array();
  for (const auto& curve : roc) {
    Json c = Json::array();
    for (const auto& p : curve) c.push_back({p.fpr, p.tpr});
    roc_j.push_back(c);
  }
  j["roc"] = roc_j;
  return j;
}

EvalResult EvalResult::from_json(const Json& j) {
  EvalResult r;
  try {
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.macro_auc = j.at("macro_auc").get<double>();
    for (const auto& a : j.at("per_class_auc")) {
      r.per_class_auc.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
    }
    for (const auto& curve : j.at("roc")) {
      std::vector<RocPoint> pts;
      for (const auto& p : curve) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      r.roc.push_back(std::move(pts));
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("evaluation record: ") + e.what());
  }
  return r;
}

void write_roc_jsonl(const std::filesystem::path& path, const EvalResult& result) {
  std::string text;
  for (std::size_t c = 0; c < result.roc.size(); ++c) {
    for (const auto& p : result.roc[c]) {
      OrderedJson j;
      j["class"] = result.class_names[c];
      j["fpr"] = p.fpr;
      j["tpr"] = p.tpr;
      text += j.dump() + "\n";
    }
  }
  write_text(path, text);
}

}  // namespace fsvlm
