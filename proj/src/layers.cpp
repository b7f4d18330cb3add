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

#include "fsvlm/layers.hpp"

#include <cmath>

#include "fsvlm/error.hpp"

namespace fsvlm::nn {

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Engine& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng, 0.0, stddev);
  return m;
}

Linear::Linear(int in, int out, bool with_bias, double init_std, Engine& rng)
    : weight(random_normal(out, in, init_std, rng)), has_bias(with_bias) {
  if (has_bias) bias = Parameter(Matrix::Zero(1, out));
}

Var Linear::forward(const Var& x, const Context& ctx) {
  Var w = leaf(weight, ctx);
  Var y;
  if (has_bias) {
    Var b = leaf(bias, ctx);
    y = linear(x, w, &b);
  } else {
    y = linear(x, w, nullptr);
  }
  if (lora) {
    Var a = leaf(lora->a, ctx);
    Var bm = leaf(lora->b, ctx);
    y = add(y, scale(linear(linear(x, a, nullptr), bm, nullptr), lora->scale()));
  }
  return y;
}

void Linear::attach_lora(int rank, double alpha, Engine& rng) {
  const int limit = std::min(in_features(), out_features());
  if (rank < 1 || rank > limit) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " outside [1, " + std::to_string(limit) + "]");
  }
  if (!(alpha > 0)) throw ConfigError("LoRA alpha must be > 0");
  LoraDelta d;
  d.rank = rank;
  d.alpha = alpha;
  // Kaiming-uniform-like scale for A, exact zeros for B.
  d.a = Parameter(random_normal(rank, in_features(), 1.0 / std::sqrt(in_features()), rng));
  d.b = Parameter(Matrix::Zero(out_features(), rank));
  lora = std::move(d);
}

Matrix Linear::lora_delta() const {
  if (!lora) return Matrix::Zero(out_features(), in_features());
  return lora->scale() * (lora->b.value * lora->a.value);
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight);
  if (has_bias) fn(prefix + ".bias", bias);
  if (lora) {
    fn(prefix + ".lora_a", lora->a);
    fn(prefix + ".lora_b", lora->b);
  }
}

LayerNorm::LayerNorm(int width)
    : gamma(Matrix::Ones(1, width)), beta(Matrix::Zero(1, width)) {}

Var LayerNorm::forward(const Var& x, const Context& ctx) {
  return layer_norm(x, leaf(gamma, ctx), leaf(beta, ctx));
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gamma", gamma);
  fn(prefix + ".beta", beta);
}

BottleneckAdapter::BottleneckAdapter(int width, int bottleneck, Activation a, Engine& rng)
    : down(width, bottleneck, true, 1.0 / std::sqrt(width), rng),
      up(bottleneck, width, true, 0.0, rng),
      act(a) {
  up.weight.value.setZero();
}

Var BottleneckAdapter::forward(const Var& h, const Context& ctx) {
  return add(h, up.forward(activation(down.forward(h, ctx), act), ctx));
}

void BottleneckAdapter::visit(const std::string& prefix, const ParamVisitor& fn) {
  down.visit(prefix + ".down", fn);
  up.visit(prefix + ".up", fn);
}

TransformerBlock::TransformerBlock(int width, int n_heads, int mlp_width, Activation a,
                                   bool is_causal, Engine& rng)
    : ln1(width),
      query(width, width, true, 1.0 / std::sqrt(width), rng),
      key(width, width, true, 1.0 / std::sqrt(width), rng),
      value(width, width, true, 1.0 / std::sqrt(width), rng),
      out(width, width, true, 1.0 / std::sqrt(width), rng),
      ln2(width),
      fc1(width, mlp_width, true, 1.0 / std::sqrt(width), rng),
      fc2(mlp_width, width, true, 1.0 / std::sqrt(mlp_width), rng),
      act(a),
      heads(n_heads),
      causal(is_causal) {
  if (width % n_heads != 0) throw ConfigError("block width must be divisible by head count");
}

Var TransformerBlock::forward(const Var& x, std::span<const Segment> segments, const Context& ctx) {
  Var h = ln1.forward(x, ctx);
  Var attn = multi_head_attention(query.forward(h, ctx), key.forward(h, ctx), value.forward(h, ctx),
                                  heads, segments, causal);
  Var y = add(x, out.forward(attn, ctx));
  Var ff = fc2.forward(activation(fc1.forward(ln2.forward(y, ctx), ctx), act), ctx);
  if (adapter) ff = adapter->forward(ff, ctx);
  return add(y, ff);
}

Linear& TransformerBlock::projection(const std::string& name) {
  if (name == "query") return query;
  if (name == "key") return key;
  if (name == "value") return value;
  if (name == "output") return out;
  throw ConfigError("unknown attention projection '" + name + "'");
}

void TransformerBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  ln1.visit(prefix + ".ln1", fn);
  query.visit(prefix + ".attn.query", fn);
  key.visit(prefix + ".attn.key", fn);
  value.visit(prefix + ".attn.value", fn);
  out.visit(prefix + ".attn.output", fn);
  ln2.visit(prefix + ".ln2", fn);
  fc1.visit(prefix + ".mlp.fc1", fn);
  fc2.visit(prefix + ".mlp.fc2", fn);
  if (adapter) adapter->visit(prefix + ".adapter", fn);
}

HeadVariant parse_head_variant(const std::string& name) {
  if (name == "linear") return HeadVariant::kLinear;
  if (name == "mlp") return HeadVariant::kMlp;
  if (name == "mlp_bn") return HeadVariant::kMlpBn;
  throw ConfigError("unknown head variant '" + name + "'");
}

std::string head_variant_name(HeadVariant v) {
  switch (v) {
    case HeadVariant::kLinear: return "linear";
    case HeadVariant::kMlp: return "mlp";
    case HeadVariant::kMlpBn: return "mlp_bn";
  }
  return "mlp_bn";
}

ClassifierHead::ClassifierHead(HeadVariant v, int in, int hidden, int classes, Activation a,
                               Engine& rng)
    : variant(v), act(a) {
  if (classes < 2) throw ConfigError("classifier head needs at least two classes");
  if (variant == HeadVariant::kLinear) {
    fc1 = Linear(in, classes, true, 1.0 / std::sqrt(in), rng);
    return;
  }
  if (hidden < 1) throw ConfigError("classifier head hidden width must be >= 1");
  fc1 = Linear(in, hidden, true, 1.0 / std::sqrt(in), rng);
  fc2 = Linear(hidden, classes, true, 1.0 / std::sqrt(hidden), rng);
  if (variant == HeadVariant::kMlpBn) {
    bn_gamma = Parameter(Matrix::Ones(1, hidden));
    bn_beta = Parameter(Matrix::Zero(1, hidden));
    running_mean = RowVector::Zero(hidden);
    running_var = RowVector::Ones(hidden);
  }
}

Var ClassifierHead::features(const Var& x, const Context& ctx) {
  Var h = fc1.forward(x, ctx);
  if (variant == HeadVariant::kLinear) return h;
  if (variant == HeadVariant::kMlpBn) {
    h = batch_norm(h, leaf(bn_gamma, ctx), leaf(bn_beta, ctx), running_mean, running_var, ctx);
  }
  return activation(h, act);
}

Var ClassifierHead::forward(const Var& x, const Context& ctx) {
  Var h = features(x, ctx);
  if (variant == HeadVariant::kLinear) return h;
  return fc2.forward(h, ctx);
}

void ClassifierHead::visit(const std::string& prefix, const ParamVisitor& fn) {
  fc1.visit(prefix + ".fc1", fn);
  if (variant == HeadVariant::kLinear) return;
  if (variant == HeadVariant::kMlpBn) {
    fn(prefix + ".bn.gamma", bn_gamma);
    fn(prefix + ".bn.beta", bn_beta);
  }
  fc2.visit(prefix + ".fc2", fn);
}

}  // namespace fsvlm::nn
