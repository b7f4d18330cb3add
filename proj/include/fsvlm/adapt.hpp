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
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fsvlm/encoder.hpp"
#include "fsvlm/jsonl.hpp"

namespace fsvlm {

enum class Strategy { kVanilla, kLora, kAdapter, kClassifier };
std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s);
const std::vector<Strategy>& all_strategies();

struct AdaptationConfig {
  Strategy strategy = Strategy::kVanilla;
  int lora_rank = 8;
  double lora_alpha = 16.0;
  std::vector<std::string> lora_targets{"query", "value"};
  int lora_depth = 4;
  int adapter_bottleneck = 16;
  nn::Activation adapter_nonlinearity = nn::Activation::kSilu;
  nn::HeadVariant head_variant = nn::HeadVariant::kMlpBn;
  int head_hidden = 0;  // 0 means the embedding width
  nn::Activation head_nonlinearity = nn::Activation::kRelu;
  int vanilla_unfreeze_depth = 4;

  // Throws ConfigError when a field is out of range for `arch`.
  void validate(const ArchitectureSpec& arch) const;
  Json to_json() const;
  static AdaptationConfig from_json(const Json& j);
};

struct TrainSchedule {
  int max_epochs = 100;
  double base_lr = 1e-4;
  int warmup_steps = 10;
  int batch_size = 0;  // 0 means min(32, number of training images)
  int patience = 10;
  double min_delta = 1e-4;
  std::uint64_t augmentation_seed = 0;
  bool augment = true;

  int effective_batch(std::size_t n_train) const;
  void validate(int total_steps) const;
  Json to_json() const;
  static TrainSchedule from_json(const Json& j);
};

// Linear warm-up over `warmup_steps`, then linear decay reaching zero at
// `total_steps`. `step` is zero-based.
double learning_rate(const TrainSchedule& s, int step, int total_steps);

struct TrainHistory {
  double initial_train_loss = 0;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_accuracy;
  int stopped_epoch = 0;  // 1-based; last epoch that ran
  int best_epoch = 0;     // 1-based
  int steps = 0;

  Json to_json() const;
  static TrainHistory from_json(const Json& j);
};

struct LabeledImages {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return images.size(); }
};

// A backbone plus one adaptation strategy. Frozen tensors are never
// written by the training loop.
struct AdaptedModel {
  DualEncoder encoder;
  AdaptationConfig config;
  PromptSet prompts;
  std::optional<nn::ClassifierHead> head;

  std::size_t num_classes() const { return prompts.size(); }
  void visit(const nn::ParamVisitor& fn);
  void visit(const nn::ConstParamVisitor& fn) const;
  std::vector<std::string> trainable_names() const;
  std::size_t trainable_parameter_count() const;

  // N x C logits: scaled prompt similarity, or head logits for the
  // classifier strategy.
  nn::Var logits(std::span<const Image* const> images, const nn::Context& ctx);
  // Image features the head consumes (unit-norm encoder output).
  nn::Matrix head_input(std::span<const Image* const> images);
};

AdaptedModel select_vanilla_trainables(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts);
AdaptedModel apply_lora(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts, std::uint64_t seed);
AdaptedModel apply_adapter(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts, std::uint64_t seed);
AdaptedModel apply_classifier_head(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts,
                                   std::uint64_t seed);
// Dispatches on cfg.strategy.
AdaptedModel adapt(DualEncoder base, const AdaptationConfig& cfg, PromptSet prompts, std::uint64_t seed);

// Flips, rotation within +-15 degrees, brightness/contrast jitter.
Image augment(const Image& src, Engine& rng);

struct ValidationOutcome {
  double loss = 0;
  double accuracy = 0;
};
using Validator = std::function<ValidationOutcome(AdaptedModel&)>;

ValidationOutcome validate_model(AdaptedModel& model, const LabeledImages& val);

// Adam over the trainable tensors with early stopping on validation loss;
// the best epoch's weights are restored before returning. Throws
// ConfigError for an empty training set and TrainingError on a
// non-finite loss. `validator` replaces the default validation pass.
TrainHistory train(AdaptedModel& model, const LabeledImages& train_set, const LabeledImages& val_set,
                   const TrainSchedule& schedule, const Validator& validator = {});

// Probabilities and predictions on `images` through the same path used
// for reporting.
struct Prediction {
  EmbeddingBatch image_embeddings;
  EmbeddingBatch text_embeddings;
  nn::Matrix head_features;  // classifier strategy only
  Classification classification;
};
Prediction predict(AdaptedModel& model, const LabeledImages& images);

// Only trainable tensors (plus batch-norm statistics) are stored, with the
// configuration fingerprint in the header.
void save_checkpoint(const std::filesystem::path& path, const AdaptedModel& model,
                     const std::string& fingerprint);
AdaptedModel load_checkpoint(const std::filesystem::path& path, DualEncoder base, PromptSet prompts,
                             std::string* fingerprint = nullptr);

}  // namespace fsvlm
