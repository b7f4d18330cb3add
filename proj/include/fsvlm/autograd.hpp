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

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fsvlm::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

// A named tensor owned by a module. `grad` is only allocated while a
// backward pass needs it.
struct Parameter {
  Matrix value;
  Matrix grad;
  bool trainable = false;

  Parameter() = default;
  explicit Parameter(Matrix v) : value(std::move(v)) {}
  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.resize(0, 0); }
};

struct Node {
  Matrix value;
  const Matrix* external = nullptr;  // parameter leaves alias the parameter
  Matrix grad;
  bool requires_grad = false;
  Parameter* param = nullptr;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  const Matrix& val() const { return external != nullptr ? *external : value; }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Matrix& value() const { return node_->val(); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  double scalar() const { return value()(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

// Forward-pass switches. `grad` controls whether trainable parameters
// become differentiable leaves; `training` selects batch statistics in
// batch normalization.
struct Context {
  bool grad = false;
  bool training = false;
};

Var constant(Matrix value);
Var leaf(Parameter& p, const Context& ctx);

// Reverse sweep from a 1x1 loss; accumulates into Parameter::grad.
void backward(const Var& loss);

enum class Activation { kGelu, kRelu, kSilu, kQuickGelu };
Activation parse_activation(const std::string& name);
std::string activation_name(Activation a);

// Contiguous row ranges of a stacked batch; attention never crosses them.
struct Segment {
  Eigen::Index start = 0;
  Eigen::Index length = 0;
};

Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// s is 1x1; result is s * a.
Var scale_by(const Var& a, const Var& s);
Var exp(const Var& a);
// x W^T (+ b), W is out x in, b is 1 x out.
Var linear(const Var& x, const Var& w, const Var* b);
Var matmul(const Var& a, const Var& b);
// a b^T
Var matmul_bt(const Var& a, const Var& b);
Var activation(const Var& x, Activation kind);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Batch normalization over rows. Running statistics are updated in place
// when ctx.training is set.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, RowVector& running_mean,
               RowVector& running_var, const Context& ctx, double momentum = 0.1,
               double eps = 1e-5);
Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads,
                         std::span<const Segment> segments, bool causal);
Var gather_rows(const Var& table, std::vector<Eigen::Index> indices);
Var concat_rows(const std::vector<Var>& parts);
Var l2_normalize_rows(const Var& x);
// Mean cross-entropy of row-wise softmax(logits) against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

// Row-wise softmax without autograd.
Matrix softmax_rows(const Matrix& logits);

}  // namespace fsvlm::nn
