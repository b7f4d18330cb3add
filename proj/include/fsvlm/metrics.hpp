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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsvlm/autograd.hpp"
#include "fsvlm/jsonl.hpp"

namespace fsvlm {

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

double accuracy(std::span<const int> predictions, std::span<const int> labels);

// Unweighted mean of per-class F1 over `num_classes`; a class with no
// predictions and no labels contributes 0.
double macro_f1(std::span<const int> predictions, std::span<const int> labels, int num_classes);

// One-vs-rest AUC per class via the rank statistic (ties count half).
// Classes without both positives and negatives get no value and are left
// out of the macro mean.
struct AucResult {
  double macro = 0;
  std::vector<std::optional<double>> per_class;
};
AucResult macro_auc(const nn::Matrix& probabilities, std::span<const int> labels);

// Binary AUC; throws ValidationError without both classes present.
double binary_auc(std::span<const double> scores, std::span<const bool> positive);

// Thresholds swept over the distinct scores, highest first, from (0,0)
// to (1,1).
std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const bool> positive);
double trapezoid_area(std::span<const RocPoint> points);

struct EvalResult {
  std::vector<std::string> class_names;
  double accuracy = 0;
  double macro_f1 = 0;
  double macro_auc = 0;
  std::vector<std::optional<double>> per_class_auc;
  std::vector<std::vector<RocPoint>> roc;  // empty for classes without an AUC

  Json to_json() const;
  static EvalResult from_json(const Json& j);
};

EvalResult evaluate(const nn::Matrix& probabilities, std::span<const int> predictions,
                    std::span<const int> labels, const std::vector<std::string>& class_names);

// One {"class","fpr","tpr"} line per curve point.
void write_roc_jsonl(const std::filesystem::path& path, const EvalResult& result);

}  // namespace fsvlm
