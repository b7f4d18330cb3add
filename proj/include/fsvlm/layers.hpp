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
#include <optional>
#include <string>
#include <vector>

#include "fsvlm/autograd.hpp"
#include "fsvlm/rng.hpp"

namespace fsvlm::nn {

using ParamVisitor = std::function<void(const std::string& name, Parameter& p)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Parameter& p)>;

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Engine& rng);

// Low-rank update dW = scale * B A with A: r x in, B: out x r.
struct LoraDelta {
  Parameter a;
  Parameter b;
  int rank = 0;
  double alpha = 0;
  double scale() const { return alpha / rank; }
};

struct Linear {
  Parameter weight;  // out x in
  Parameter bias;    // 1 x out, empty when has_bias is false
  bool has_bias = true;
  std::optional<LoraDelta> lora;

  Linear() = default;
  Linear(int in, int out, bool with_bias, double init_std, Engine& rng);

  int in_features() const { return static_cast<int>(weight.value.cols()); }
  int out_features() const { return static_cast<int>(weight.value.rows()); }

  Var forward(const Var& x, const Context& ctx);
  // Zero-initialized B, Gaussian A; throws ConfigError if rank is out of range.
  void attach_lora(int rank, double alpha, Engine& rng);
  Matrix lora_delta() const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct LayerNorm {
  Parameter gamma;
  Parameter beta;

  LayerNorm() = default;
  explicit LayerNorm(int width);
  Var forward(const Var& x, const Context& ctx);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Sequential bottleneck: h + up(act(down(h))). The up projection starts at
// zero so a fresh adapter is the identity.
struct BottleneckAdapter {
  Linear down;
  Linear up;
  Activation act = Activation::kGelu;

  BottleneckAdapter() = default;
  BottleneckAdapter(int width, int bottleneck, Activation act, Engine& rng);
  Var forward(const Var& h, const Context& ctx);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Pre-norm transformer block.
struct TransformerBlock {
  LayerNorm ln1;
  Linear query, key, value, out;
  LayerNorm ln2;
  Linear fc1, fc2;
  Activation act = Activation::kGelu;
  int heads = 1;
  bool causal = false;
  std::optional<BottleneckAdapter> adapter;

  TransformerBlock() = default;
  TransformerBlock(int width, int heads, int mlp_width, Activation act, bool causal, Engine& rng);
  Var forward(const Var& x, std::span<const Segment> segments, const Context& ctx);
  Linear& projection(const std::string& name);  // query|key|value|output
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

enum class HeadVariant { kLinear, kMlp, kMlpBn };
HeadVariant parse_head_variant(const std::string& name);
std::string head_variant_name(HeadVariant v);

// Classification head over frozen image embeddings.
struct ClassifierHead {
  HeadVariant variant = HeadVariant::kMlpBn;
  Linear fc1;  // d -> hidden (or d -> C for kLinear)
  Linear fc2;  // hidden -> C; unused for kLinear
  Parameter bn_gamma, bn_beta;
  RowVector running_mean, running_var;
  Activation act = Activation::kRelu;

  ClassifierHead() = default;
  ClassifierHead(HeadVariant variant, int in, int hidden, int classes, Activation act, Engine& rng);
  // Penultimate activations; the logits themselves for kLinear.
  Var features(const Var& x, const Context& ctx);
  Var forward(const Var& x, const Context& ctx);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

}  // namespace fsvlm::nn
