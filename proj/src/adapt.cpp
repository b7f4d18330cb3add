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

#include "fsvlm/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "fsvlm/error.hpp"
#include "fsvlm/tensor_io.hpp"

namespace fsvlm {

namespace {

using nn::Matrix;
using nn::Var;

constexpr double kPi = 3.14159265358979323846;

template <typename T>
void read_field(const Json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(std::string("field '") + key + "': " + e.what());
    }
  }
}

void reject_unknown(const Json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(std::string("unknown ") + what + " key '" + key + "'");
    }
  }
}

void freeze_all(DualEncoder& enc) {
  enc.visit([](const std::string&, nn::Parameter& p) { p.trainable = false; });
}

void set_trainable(const std::string& prefix, const std::function<void(const std::string&, const nn::ParamVisitor&)>& visit) {
  visit(prefix, [](const std::string&, nn::Parameter& p) { p.trainable = true; });
}

AdaptedModel base_model(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts) {
  if (prompts.size() < 2) throw ConfigError("adaptation needs at least two classes");
  cfg.validate(base.arch());
  AdaptedModel m;
  m.encoder = std::move(base);
  m.config = cfg;
  m.prompts = std::move(prompts);
  freeze_all(m.encoder);
  return m;
}

std::vector<const Image*> pointers(const std::vector<Image>& images, std::span<const std::size_t> idx) {
  std::vector<const Image*> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(&images[i]);
  return out;
}

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
  return i;
}

struct AdamState {
  Matrix m;
  Matrix v;
};

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kVanilla: return "vanilla";
    case Strategy::kLora: return "lora";
    case Strategy::kAdapter: return "adapter";
    case Strategy::kClassifier: return "classifier";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  for (auto st : all_strategies()) {
    if (strategy_name(st) == s) return st;
  }
  throw ConfigError("unknown strategy '" + s + "'");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> v{Strategy::kVanilla, Strategy::kLora, Strategy::kAdapter,
                                       Strategy::kClassifier};
  return v;
}

void AdaptationConfig::validate(const ArchitectureSpec& arch) const {
  const int depth = arch.depth();
  if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
  if (!(lora_alpha > 0) || !std::isfinite(lora_alpha)) throw ConfigError("lora_alpha must be > 0");
  if (adapter_bottleneck < 1) throw ConfigError("adapter_bottleneck must be >= 1");
  if (lora_depth < 1 || lora_depth > depth) {
    throw ConfigError("lora_depth must be in [1, " + std::to_string(depth) + "]");
  }
  if (vanilla_unfreeze_depth < 1 || vanilla_unfreeze_depth > depth) {
    throw ConfigError("vanilla_unfreeze_depth must be in [1, " + std::to_string(depth) + "]");
  }
  if (head_hidden < 0) throw ConfigError("head_hidden must be >= 0");
  if (lora_targets.empty()) throw ConfigError("lora_targets must not be empty");
  std::set<std::string> seen;
  for (const auto& t : lora_targets) {
    if (t != "query" && t != "key" && t != "value" && t != "output") {
      throw ConfigError("unknown LoRA target '" + t + "'");
    }
    if (!seen.insert(t).second) throw ConfigError("duplicate LoRA target '" + t + "'");
  }
  const int width = std::min(arch.vision_width, arch.text_width);
  if (strategy == Strategy::kLora && lora_rank > width) {
    throw ConfigError("lora_rank " + std::to_string(lora_rank) + " exceeds min(d_in, d_out) = " +
                      std::to_string(width));
  }
  if (strategy == Strategy::kAdapter && adapter_bottleneck >= width) {
    throw ConfigError("adapter_bottleneck must be smaller than the hidden width " + std::to_string(width));
  }
}

Json AdaptationConfig::to_json() const {
  Json j;
  j["strategy"] = strategy_name(strategy);
  j["lora_rank"] = lora_rank;
  j["lora_alpha"] = lora_alpha;
  j["lora_targets"] = lora_targets;
  j["lora_depth"] = lora_depth;
  j["adapter_bottleneck"] = adapter_bottleneck;
  j["adapter_nonlinearity"] = nn::activation_name(adapter_nonlinearity);
  j["head_variant"] = nn::head_variant_name(head_variant);
  j["head_hidden"] = head_hidden;
  j["head_nonlinearity"] = nn::activation_name(head_nonlinearity);
  j["vanilla_unfreeze_depth"] = vanilla_unfreeze_depth;
  return j;
}

AdaptationConfig AdaptationConfig::from_json(const Json& j) {
  reject_unknown(j,
                 {"strategy", "lora_rank", "lora_alpha", "lora_targets", "lora_depth", "adapter_bottleneck",
                  "adapter_nonlinearity", "head_variant", "head_hidden", "head_nonlinearity",
                  "vanilla_unfreeze_depth"},
                 "adaptation");
  AdaptationConfig c;
  std::string s;
  if (j.contains("strategy")) {
    read_field(j, "strategy", s);
    c.strategy = parse_strategy(s);
  }
  read_field(j, "lora_rank", c.lora_rank);
  read_field(j, "lora_alpha", c.lora_alpha);
  read_field(j, "lora_targets", c.lora_targets);
  read_field(j, "lora_depth", c.lora_depth);
  read_field(j, "adapter_bottleneck", c.adapter_bottleneck);
  read_field(j, "head_hidden", c.head_hidden);
  read_field(j, "vanilla_unfreeze_depth", c.vanilla_unfreeze_depth);
  try {
    if (j.contains("adapter_nonlinearity")) {
      c.adapter_nonlinearity = nn::parse_activation(j["adapter_nonlinearity"].get<std::string>());
    }
    if (j.contains("head_nonlinearity")) {
      c.head_nonlinearity = nn::parse_activation(j["head_nonlinearity"].get<std::string>());
    }
    if (j.contains("head_variant")) c.head_variant = nn::parse_head_variant(j["head_variant"].get<std::string>());
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("adaptation: ") + e.what());
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

int TrainSchedule::effective_batch(std::size_t n_train) const {
  if (batch_size > 0) return batch_size;
  return static_cast<int>(std::min<std::size_t>(32, std::max<std::size_t>(1, n_train)));
}

void TrainSchedule::validate(int total_steps) const {
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(base_lr > 0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be > 0");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (batch_size < 0) throw ConfigError("batch_size must be >= 0");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(min_delta >= 0)) throw ConfigError("min_delta must be >= 0");
  if (total_steps >= 0 && warmup_steps >= total_steps) {
    throw ConfigError("warmup_steps (" + std::to_string(warmup_steps) + ") must be below the total step count (" +
                      std::to_string(total_steps) + ")");
  }
}

Json TrainSchedule::to_json() const {
  Json j;
  j["max_epochs"] = max_epochs;
  j["base_lr"] = base_lr;
  j["warmup_steps"] = warmup_steps;
  j["batch_size"] = batch_size;
  j["patience"] = patience;
  j["min_delta"] = min_delta;
  j["augmentation_seed"] = augmentation_seed;
  j["augment"] = augment;
  return j;
}

TrainSchedule TrainSchedule::from_json(const Json& j) {
  reject_unknown(j,
                 {"max_epochs", "base_lr", "warmup_steps", "batch_size", "patience", "min_delta",
                  "augmentation_seed", "augment"},
                 "schedule");
  TrainSchedule s;
  read_field(j, "max_epochs", s.max_epochs);
  read_field(j, "base_lr", s.base_lr);
  read_field(j, "warmup_steps", s.warmup_steps);
  read_field(j, "batch_size", s.batch_size);
  read_field(j, "patience", s.patience);
  read_field(j, "min_delta", s.min_delta);
  read_field(j, "augmentation_seed", s.augmentation_seed);
  read_field(j, "augment", s.augment);
  s.validate(-1);
  return s;
}

double learning_rate(const TrainSchedule& s, int step, int total_steps) {
  if (step < s.warmup_steps) return s.base_lr * (step + 1) / s.warmup_steps;
  const double remaining = static_cast<double>(total_steps - step) / (total_steps - s.warmup_steps);
  return s.base_lr * std::clamp(remaining, 0.0, 1.0);
}

Json TrainHistory::to_json() const {
  Json j;
  j["initial_train_loss"] = initial_train_loss;
  j["train_loss"] = train_loss;
  j["val_loss"] = val_loss;
  j["val_accuracy"] = val_accuracy;
  j["stopped_epoch"] = stopped_epoch;
  j["best_epoch"] = best_epoch;
  j["steps"] = steps;
  return j;
}

TrainHistory TrainHistory::from_json(const Json& j) {
  TrainHistory h;
  read_field(j, "initial_train_loss", h.initial_train_loss);
  read_field(j, "train_loss", h.train_loss);
  read_field(j, "val_loss", h.val_loss);
  read_field(j, "val_accuracy", h.val_accuracy);
  read_field(j, "stopped_epoch", h.stopped_epoch);
  read_field(j, "best_epoch", h.best_epoch);
  read_field(j, "steps", h.steps);
  return h;
}

void AdaptedModel::visit(const nn::ParamVisitor& fn) {
  encoder.visit(fn);
  if (head) head->visit("head", fn);
}

void AdaptedModel::visit(const nn::ConstParamVisitor& fn) const {
  const_cast<AdaptedModel*>(this)->visit(
      nn::ParamVisitor([&fn](const std::string& name, nn::Parameter& p) { fn(name, p); }));
}

std::vector<std::string> AdaptedModel::trainable_names() const {
  std::vector<std::string> names;
  visit([&](const std::string& name, const nn::Parameter& p) {
    if (p.trainable) names.push_back(name);
  });
  return names;
}

std::size_t AdaptedModel::trainable_parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const nn::Parameter& p) {
    if (p.trainable) n += static_cast<std::size_t>(p.size());
  });
  return n;
}

Matrix AdaptedModel::head_input(std::span<const Image* const> images) {
  return encode_image_set(encoder, images, {}, {}, prompts.classes()).vectors;
}

Var AdaptedModel::logits(std::span<const Image* const> images, const nn::Context& ctx) {
  if (head) return head->forward(nn::constant(head_input(images)), ctx);
  Var z = encoder.embed_images(images, ctx);
  Var w = encoder.embed_texts(prompts.prompts(), ctx);
  return nn::scale_by(nn::matmul_bt(z, w), encoder.logit_scale(ctx));
}

AdaptedModel select_vanilla_trainables(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts) {
  AdaptedModel m = base_model(std::move(base), cfg, std::move(prompts));
  m.config.strategy = Strategy::kVanilla;
  auto& v = m.encoder.vision;
  auto& t = m.encoder.text;
  const int k = cfg.vanilla_unfreeze_depth;
  for (std::size_t i = v.blocks.size() - k; i < v.blocks.size(); ++i) {
    set_trainable("", [&](const std::string& p, const nn::ParamVisitor& fn) { v.blocks[i].visit(p, fn); });
  }
  for (std::size_t i = t.blocks.size() - k; i < t.blocks.size(); ++i) {
    set_trainable("", [&](const std::string& p, const nn::ParamVisitor& fn) { t.blocks[i].visit(p, fn); });
  }
  set_trainable("", [&](const std::string& p, const nn::ParamVisitor& fn) { v.ln_post.visit(p, fn); });
  set_trainable("", [&](const std::string& p, const nn::ParamVisitor& fn) { v.projection.visit(p, fn); });
  set_trainable("", [&](const std::string& p, const nn::ParamVisitor& fn) { t.ln_final.visit(p, fn); });
  set_trainable("", [&](const std::string& p, const nn::ParamVisitor& fn) { t.projection.visit(p, fn); });
  if (m.encoder.descriptor().has_learned_logit_scale) m.encoder.log_logit_scale.trainable = true;
  return m;
}

AdaptedModel apply_lora(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts, std::uint64_t seed) {
  AdaptedModel m = base_model(std::move(base), cfg, std::move(prompts));
  m.config.strategy = Strategy::kLora;
  Engine rng(derive_seed(seed, "lora"));
  auto attach = [&](std::vector<nn::TransformerBlock>& blocks) {
    for (std::size_t i = blocks.size() - cfg.lora_depth; i < blocks.size(); ++i) {
      for (const auto& target : cfg.lora_targets) {
        auto& lin = blocks[i].projection(target);
        lin.attach_lora(cfg.lora_rank, cfg.lora_alpha, rng);
        lin.lora->a.trainable = true;
        lin.lora->b.trainable = true;
      }
    }
  };
  attach(m.encoder.vision.blocks);
  attach(m.encoder.text.blocks);
  return m;
}

AdaptedModel apply_adapter(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts,
                           std::uint64_t seed) {
  AdaptedModel m = base_model(std::move(base), cfg, std::move(prompts));
  m.config.strategy = Strategy::kAdapter;
  Engine rng(derive_seed(seed, "adapter"));
  auto insert = [&](std::vector<nn::TransformerBlock>& blocks, int width) {
    for (auto& blk : blocks) {
      blk.adapter = nn::BottleneckAdapter(width, cfg.adapter_bottleneck, cfg.adapter_nonlinearity, rng);
      blk.adapter->visit("", [](const std::string&, nn::Parameter& p) { p.trainable = true; });
    }
  };
  insert(m.encoder.vision.blocks, m.encoder.arch().vision_width);
  insert(m.encoder.text.blocks, m.encoder.arch().text_width);
  return m;
}

AdaptedModel apply_classifier_head(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts,
                                   std::uint64_t seed) {
  AdaptedModel m = base_model(std::move(base), cfg, std::move(prompts));
  m.config.strategy = Strategy::kClassifier;
  Engine rng(derive_seed(seed, "head"));
  const int d = m.encoder.arch().embed_dim;
  const int hidden = cfg.head_hidden > 0 ? cfg.head_hidden : d;
  m.head = nn::ClassifierHead(cfg.head_variant, d, hidden, static_cast<int>(m.num_classes()),
                              cfg.head_nonlinearity, rng);
  m.head->visit("head", [](const std::string&, nn::Parameter& p) { p.trainable = true; });
  return m;
}

AdaptedModel adapt(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts, std::uint64_t seed) {
  switch (cfg.strategy) {
    case Strategy::kVanilla: return select_vanilla_trainables(std::move(base), cfg, std::move(prompts));
    case Strategy::kLora: return apply_lora(std::move(base), cfg, std::move(prompts), seed);
    case Strategy::kAdapter: return apply_adapter(std::move(base), cfg, std::move(prompts), seed);
    case Strategy::kClassifier: return apply_classifier_head(std::move(base), cfg, std::move(prompts), seed);
  }
  throw ConfigError("unknown strategy");
}

Image augment(const Image& src, Engine& rng) {
  const bool hflip = uniform01(rng) < 0.5;
  const bool vflip = uniform01(rng) < 0.5;
  const double angle = uniform(rng, -15.0, 15.0) * kPi / 180.0;
  const double contrast = 1.0 + uniform(rng, -0.1, 0.1);
  const double brightness = uniform(rng, -0.1, 0.1) * 255.0;

  const int w = src.width;
  const int h = src.height;
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  const double ca = std::cos(angle);
  const double sa = std::sin(angle);
  Image out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: rotate the destination back, then undo the flips.
      const double dx = x - cx;
      const double dy = y - cy;
      double sx = ca * dx + sa * dy + cx;
      double sy = -sa * dx + ca * dy + cy;
      if (hflip) sx = (w - 1) - sx;
      if (vflip) sy = (h - 1) - sy;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0;
      const double fy = sy - y0;
      const int xa = reflect101(x0, w), xb = reflect101(x0 + 1, w);
      const int ya = reflect101(y0, h), yb = reflect101(y0 + 1, h);
      auto* dst = out.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fx) * (1 - fy) * src.at(xa, ya)[c] + fx * (1 - fy) * src.at(xb, ya)[c] +
                         (1 - fx) * fy * src.at(xa, yb)[c] + fx * fy * src.at(xb, yb)[c];
        const double j = (v - 127.5) * contrast + 127.5 + brightness;
        dst[c] = static_cast<std::uint8_t>(std::lround(std::clamp(j, 0.0, 255.0)));
      }
    }
  }
  return out;
}

Prediction predict(AdaptedModel& model, const LabeledImages& set) {
  if (set.size() == 0) throw ValidationError("predict: empty image set");
  std::vector<const Image*> ptrs;
  for (const auto& im : set.images) ptrs.push_back(&im);
  Prediction p;
  p.image_embeddings = encode_image_set(model.encoder, ptrs, set.labels, set.ids, model.prompts.classes());
  p.text_embeddings = encode_prompts(model.encoder, model.prompts);
  if (model.head) {
    const nn::Context eval{};
    Var x = nn::constant(p.image_embeddings.vectors);
    p.head_features = model.head->features(x, eval).value();
    const Matrix logits = model.head->forward(x, eval).value();
    p.classification.probabilities = nn::softmax_rows(logits);
    p.classification.predictions = argmax_rows(logits);
  } else {
    p.classification = classify(p.image_embeddings, p.text_embeddings, model.encoder.logit_scale_value());
  }
  return p;
}

ValidationOutcome validate_model(AdaptedModel& model, const LabeledImages& val) {
  if (val.labels.size() != val.size()) throw ValidationError("validation set needs one label per image");
  const Prediction p = predict(model, val);
  const auto& probs = p.classification.probabilities;
  ValidationOutcome out;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const double q = probs(static_cast<Eigen::Index>(i), val.labels[i]);
    out.loss -= std::log(std::max(q, std::numeric_limits<double>::min()));
    if (p.classification.predictions[i] == val.labels[i]) ++correct;
  }
  out.loss /= static_cast<double>(val.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(val.size());
  return out;
}

TrainHistory train(AdaptedModel& model, const LabeledImages& train_set, const LabeledImages& val_set,
                   const TrainSchedule& schedule, const Validator& validator) {
  const std::size_t n = train_set.size();
  if (n == 0) throw ConfigError("training needs at least one shot per class; zero-shot is evaluation-only");
  if (train_set.labels.size() != n) throw ValidationError("training set needs one label per image");
  const int classes = static_cast<int>(model.num_classes());
  for (int l : train_set.labels) {
    if (l < 0 || l >= classes) throw ValidationError("training label out of range");
  }
  if (!validator && val_set.size() == 0) throw ConfigError("training needs a validation set");

  const int batch = schedule.effective_batch(n);
  const int steps_per_epoch = static_cast<int>((n + batch - 1) / batch);
  const int total_steps = schedule.max_epochs * steps_per_epoch;
  schedule.validate(total_steps);

  std::vector<std::pair<std::string, nn::Parameter*>> params;
  model.visit([&](const std::string& name, nn::Parameter& p) {
    if (p.trainable) params.emplace_back(name, &p);
  });
  if (params.empty()) throw ConfigError("model has no trainable parameters");

  const int side = model.encoder.arch().image_size;
  std::vector<Image> sized;
  sized.reserve(n);
  for (const auto& im : train_set.images) {
    sized.push_back(im.width == side && im.height == side ? im : resize(im, side, side));
  }

  TrainHistory history;
  {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    const auto ptrs = pointers(sized, all);
    history.initial_train_loss =
        nn::cross_entropy(model.logits(ptrs, nn::Context{}), train_set.labels).scalar();
  }

  auto snapshot = [&] {
    std::vector<Matrix> s;
    for (auto& [_, p] : params) s.push_back(p->value);
    if (model.head && model.head->variant == nn::HeadVariant::kMlpBn) {
      s.push_back(model.head->running_mean);
      s.push_back(model.head->running_var);
    }
    return s;
  };
  auto restore = [&](const std::vector<Matrix>& s) {
    std::size_t i = 0;
    for (auto& [_, p] : params) p->value = s[i++];
    if (model.head && model.head->variant == nn::HeadVariant::kMlpBn) {
      model.head->running_mean = s[i++];
      model.head->running_var = s[i++];
    }
  };

  std::map<nn::Parameter*, AdamState> adam;
  for (auto& [_, p] : params) {
    adam[p] = {Matrix::Zero(p->value.rows(), p->value.cols()), Matrix::Zero(p->value.rows(), p->value.cols())};
  }

  Engine order_rng(derive_seed(schedule.augmentation_seed, "order"));
  Engine aug_rng(derive_seed(schedule.augmentation_seed, "augment"));
  double best = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_state = snapshot();
  int stale = 0;
  int step = 0;

  std::vector<std::size_t> order(n);
  for (int epoch = 1; epoch <= schedule.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, order_rng);
    double epoch_loss = 0;
    // Balanced batch sizes so no batch degenerates to a single sample.
    std::size_t begin = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      const std::size_t len = n / steps_per_epoch + (static_cast<std::size_t>(s) < n % steps_per_epoch ? 1 : 0);
      std::vector<Image> images;
      std::vector<int> labels;
      for (std::size_t i = begin; i < begin + len; ++i) {
        images.push_back(schedule.augment ? augment(sized[order[i]], aug_rng) : sized[order[i]]);
        labels.push_back(train_set.labels[order[i]]);
      }
      begin += len;
      std::vector<const Image*> ptrs;
      for (const auto& im : images) ptrs.push_back(&im);

      for (auto& [_, p] : params) p->zero_grad();
      const nn::Context ctx{true, true};
      Var loss = nn::cross_entropy(model.logits(ptrs, ctx), labels);
      const double lr = learning_rate(schedule, step, total_steps);
      if (!std::isfinite(loss.scalar())) {
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step) + " (lr " + std::to_string(lr) + ", strategy " +
                            strategy_name(model.config.strategy) + ")");
      }
      nn::backward(loss);
      ++step;
      const double bc1 = 1 - std::pow(kBeta1, step);
      const double bc2 = 1 - std::pow(kBeta2, step);
      for (auto& [name, p] : params) {
        if (p->grad.size() == 0) continue;
        auto& st = adam[p];
        st.m = kBeta1 * st.m + (1 - kBeta1) * p->grad;
        st.v = kBeta2 * st.v + (1 - kBeta2) * p->grad.cwiseProduct(p->grad);
        p->value.array() -= lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + kAdamEps);
      }
      epoch_loss += loss.scalar() * static_cast<double>(len);
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(n));

    const ValidationOutcome vo = validator ? validator(model) : validate_model(model, val_set);
    if (!std::isfinite(vo.loss)) {
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    history.val_loss.push_back(vo.loss);
    history.val_accuracy.push_back(vo.accuracy);
    history.stopped_epoch = epoch;
    if (vo.loss < best - schedule.min_delta) {
      best = vo.loss;
      history.best_epoch = epoch;
      best_state = snapshot();
      stale = 0;
    } else if (++stale >= schedule.patience) {
      break;
    }
  }
  history.steps = step;
  restore(best_state);
  for (auto& [_, p] : params) p->zero_grad();
  return history;
}

void save_checkpoint(const std::filesystem::path& path, const AdaptedModel& model,
                     const std::string& fingerprint) {
  TensorFile file;
  file.header["format"] = "fsvlm-delta";
  file.header["fingerprint"] = fingerprint;
  file.header["backbone"] = model.encoder.descriptor().name;
  file.header["adaptation"] = model.config.to_json();
  file.header["classes"] = model.prompts.classes();
  file.header["prompt_template"] = model.prompts.prompt_template();
  model.visit([&](const std::string& name, const nn::Parameter& p) {
    if (p.trainable) file.tensors[name] = p.value;
  });
  if (model.head && model.head->variant == nn::HeadVariant::kMlpBn) {
    file.tensors["head.bn.running_mean"] = model.head->running_mean;
    file.tensors["head.bn.running_var"] = model.head->running_var;
  }
  write_tensor_file(path, file);
}

AdaptedModel load_checkpoint(const std::filesystem::path& path, DualEncoder base, PromptSet prompts,
                             std::string* fingerprint) {
  TensorFile file = read_tensor_file(path);
  if (file.header.value("format", "") != "fsvlm-delta") throw IoError(path.string() + " is not a strategy delta");
  if (file.header.value("backbone", "") != base.descriptor().name) {
    throw ConfigError(path.string() + " was trained on backbone '" + file.header.value("backbone", "?") + "'");
  }
  if (file.header.value("classes", std::vector<std::string>{}) != prompts.classes()) {
    throw ConfigError(path.string() + " was trained on a different class list");
  }
  const auto cfg = AdaptationConfig::from_json(file.header.at("adaptation"));
  AdaptedModel m = adapt(std::move(base), cfg, std::move(prompts), 0);
  std::size_t used = 0;
  auto take = [&](const std::string& name, Matrix& dst) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw IoError(path.string() + ": missing tensor '" + name + "'");
    if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols()) {
      throw IoError(path.string() + ": tensor '" + name + "' has the wrong shape");
    }
    dst = it->second;
    ++used;
  };
  m.visit([&](const std::string& name, nn::Parameter& p) {
    if (p.trainable) take(name, p.value);
  });
  if (m.head && m.head->variant == nn::HeadVariant::kMlpBn) {
    Matrix mean = m.head->running_mean;
    Matrix var = m.head->running_var;
    take("head.bn.running_mean", mean);
    take("head.bn.running_var", var);
    m.head->running_mean = mean;
    m.head->running_var = var;
  }
  if (used != file.tensors.size()) throw IoError(path.string() + ": unexpected extra tensors");
  if (fingerprint != nullptr) *fingerprint = file.header.value("fingerprint", "");
  return m;
}

}  // namespace fsvlm
