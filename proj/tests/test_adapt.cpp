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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "fsvlm/adapt.hpp"
#include "fsvlm/error.hpp"

namespace fsvlm {
namespace {

using nn::Matrix;

const std::vector<std::string> kClasses{"c0", "c1", "c2", "c3", "c4"};

DualEncoder toy() { return load_backbone("toy", std::filesystem::temp_directory_path() / "fsvlm-no-cache"); }

LabeledImages make_images(int per_class, std::uint64_t seed) {
  Engine rng(seed);
  LabeledImages out;
  for (int c = 0; c < 5; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Image im(16, 16);
      for (auto& px : im.pixels) px = static_cast<std::uint8_t>(40 * c + uniform_index(rng, 60));
      out.images.push_back(std::move(im));
      out.labels.push_back(c);
      out.ids.push_back("c" + std::to_string(c) + "_" + std::to_string(i));
    }
  }
  return out;
}

Matrix logits_of(AdaptedModel& m, const LabeledImages& set) {
  std::vector<const Image*> ptrs;
  for (const auto& im : set.images) ptrs.push_back(&im);
  return m.logits(ptrs, {}).value();
}

AdaptationConfig config_for(Strategy s) {
  AdaptationConfig c;
  c.strategy = s;
  return c;
}

std::map<std::string, Matrix> snapshot(const AdaptedModel& m) {
  std::map<std::string, Matrix> out;
  m.visit([&](const std::string& name, const nn::Parameter& p) { out[name] = p.value; });
  return out;
}

TrainSchedule short_schedule(int epochs) {
  TrainSchedule s;
  s.max_epochs = epochs;
  s.warmup_steps = 1;
  s.base_lr = 1e-2;
  s.patience = 100;
  s.augment = false;
  return s;
}

TEST(Strategy, NamesRoundTrip) {
  for (Strategy s : all_strategies()) EXPECT_EQ(parse_strategy(strategy_name(s)), s);
  EXPECT_THROW(parse_strategy("prefix"), ConfigError);
}

TEST(AdaptationConfig, JsonRoundTripAndUnknownKeys) {
  AdaptationConfig c = config_for(Strategy::kLora);
  c.lora_rank = 4;
  c.lora_targets = {"query", "key", "value", "output"};
  const auto back = AdaptationConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  Json j = c.to_json();
  j["lora_rnak"] = 3;
  EXPECT_THROW(AdaptationConfig::from_json(j), ConfigError);
}

TEST(AdaptationConfig, RangeChecks) {
  const auto arch = toy().arch();
  auto c = config_for(Strategy::kLora);
  c.lora_rank = 33;
  EXPECT_THROW(c.validate(arch), ConfigError);
  c = config_for(Strategy::kAdapter);
  c.adapter_bottleneck = 32;
  EXPECT_THROW(c.validate(arch), ConfigError);
  c = config_for(Strategy::kVanilla);
  c.vanilla_unfreeze_depth = 5;
  EXPECT_THROW(c.validate(arch), ConfigError);
}

TEST(Identity, LoraAndAdapterMatchBaseAtInit) {
  const auto images = make_images(2, 1);
  AdaptedModel base = adapt(toy(), config_for(Strategy::kVanilla), build_prompts(kClasses), 0);
  const Matrix ref = logits_of(base, images);
  AdaptedModel lora = adapt(toy(), config_for(Strategy::kLora), build_prompts(kClasses), 1);
  AdaptedModel adapter = adapt(toy(), config_for(Strategy::kAdapter), build_prompts(kClasses), 1);
  EXPECT_LT((logits_of(lora, images) - ref).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((logits_of(adapter, images) - ref).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FreezeAudit, FrozenTensorsUntouchedAfterTraining) {
  const auto train_set = make_images(1, 2);
  const auto val_set = make_images(1, 3);
  for (Strategy s : all_strategies()) {
    AdaptedModel m = adapt(toy(), config_for(s), build_prompts(kClasses), 4);
    const auto before = snapshot(m);
    const auto trainable = m.trainable_names();
    const std::set<std::string> train_names(trainable.begin(), trainable.end());
    const auto hist = train(m, train_set, val_set, short_schedule(5));
    EXPECT_EQ(hist.steps, 5);
    bool any_changed = false;
    for (const auto& [name, value] : snapshot(m)) {
      if (train_names.contains(name)) {
        any_changed = any_changed || !(value == before.at(name));
      } else {
        EXPECT_TRUE(value == before.at(name)) << strategy_name(s) << " " << name;
      }
    }
    EXPECT_TRUE(any_changed) << strategy_name(s);
  }
}

TEST(Lora, DeltaRankBoundedByR) {
  auto cfg = config_for(Strategy::kLora);
  cfg.lora_rank = 3;
  AdaptedModel m = adapt(toy(), cfg, build_prompts(kClasses), 5);
  train(m, make_images(2, 6), make_images(1, 7), short_schedule(3));
  auto& lin = m.encoder.vision.blocks.back().query;
  const Matrix d = lin.lora_delta();
  ASSERT_GT(d.norm(), 0);
  Eigen::JacobiSVD<Matrix> svd(d);
  const auto sv = svd.singularValues();
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > 1e-10 * sv(0) ? 1 : 0;
  EXPECT_LE(rank, 3);
  EXPECT_EQ(d.rows(), 32);
}

TEST(ParameterCounts, ClosedForm) {
  const auto arch = toy().arch();
  const std::size_t d = 32, depth = 4, mlp = 4 * d, e = 32, C = 5;
  {
    auto c = config_for(Strategy::kLora);
    const std::size_t per = c.lora_rank * (d + d);
    EXPECT_EQ(adapt(toy(), c, build_prompts(kClasses), 0).trainable_parameter_count(),
              2 * c.lora_depth * c.lora_targets.size() * per);
  }
  {
    auto c = config_for(Strategy::kAdapter);
    const std::size_t m = c.adapter_bottleneck;
    EXPECT_EQ(adapt(toy(), c, build_prompts(kClasses), 0).trainable_parameter_count(),
              2 * depth * (d * m + m + m * d + d));
  }
  {
    auto c = config_for(Strategy::kClassifier);
    const std::size_t h = e;
    EXPECT_EQ(adapt(toy(), c, build_prompts(kClasses), 0).trainable_parameter_count(),
              e * h + h + 2 * h + h * C + C);
    c.head_variant = nn::HeadVariant::kLinear;
    EXPECT_EQ(adapt(toy(), c, build_prompts(kClasses), 0).trainable_parameter_count(), e * C + C);
    c.head_variant = nn::HeadVariant::kMlp;
    c.head_hidden = 7;
    EXPECT_EQ(adapt(toy(), c, build_prompts(kClasses), 0).trainable_parameter_count(), e * 7 + 7 + 7 * C + C);
  }
  {
    auto c = config_for(Strategy::kVanilla);
    const std::size_t block = 2 * d + 4 * (d * d + d) + 2 * d + (d * mlp + mlp) + (mlp * d + d);
    const std::size_t heads = 2 * d + d * e + 2 * d + d * e + 1;
    EXPECT_EQ(adapt(toy(), c, build_prompts(kClasses), 0).trainable_parameter_count(),
              2 * depth * block + heads);
    c.vanilla_unfreeze_depth = 2;
    EXPECT_EQ(adapt(toy(), c, build_prompts(kClasses), 0).trainable_parameter_count(), 2 * 2 * block + heads);
  }
  (void)arch;
}

TEST(Vanilla, DepthSelectsTopBlocks) {
  auto c = config_for(Strategy::kVanilla);
  c.vanilla_unfreeze_depth = 2;
  const auto names = adapt(toy(), c, build_prompts(kClasses), 0).trainable_names();
  auto has = [&](const std::string& prefix) {
    return std::any_of(names.begin(), names.end(), [&](const auto& n) { return n.rfind(prefix, 0) == 0; });
  };
  EXPECT_TRUE(has("visual.blocks.2."));
  EXPECT_TRUE(has("visual.blocks.3."));
  EXPECT_TRUE(has("text.blocks.3."));
  EXPECT_FALSE(has("visual.blocks.1."));
  EXPECT_FALSE(has("text.blocks.0."));
  EXPECT_TRUE(has("visual.projection"));
  EXPECT_TRUE(has("text.projection"));
  EXPECT_FALSE(has("visual.patch_embed"));
}

TEST(Train, InitialLossIsLogOfClassCount) {
  AdaptedModel m = adapt(toy(), config_for(Strategy::kVanilla), build_prompts(kClasses), 0);
  auto s = short_schedule(1);
  s.warmup_steps = 0;
  const auto h = train(m, make_images(4, 8), make_images(1, 9), s);
  EXPECT_NEAR(h.initial_train_loss, std::log(5.0), 0.1);
}

TEST(Train, EarlyStopOnConstantValidationLoss) {
  AdaptedModel m = adapt(toy(), config_for(Strategy::kClassifier), build_prompts(kClasses), 0);
  auto s = short_schedule(50);
  s.patience = 3;
  const auto h = train(m, make_images(1, 10), make_images(1, 11), s,
                       [](AdaptedModel&) { return ValidationOutcome{0.7, 0.2}; });
  EXPECT_EQ(h.stopped_epoch, 4);
  EXPECT_EQ(h.best_epoch, 1);
  EXPECT_EQ(h.val_loss.size(), 4u);
}

TEST(Train, RestoresBestEpochWeights) {
  AdaptedModel m = adapt(toy(), config_for(Strategy::kClassifier), build_prompts(kClasses), 0);
  std::map<std::string, Matrix> at_best;
  int epoch = 0;
  const auto h = train(m, make_images(1, 12), make_images(1, 13), short_schedule(6), [&](AdaptedModel& mm) {
    ++epoch;
    if (epoch == 2) at_best = snapshot(mm);
    return ValidationOutcome{epoch == 2 ? 0.1 : 1.0, 0.0};
  });
  EXPECT_EQ(h.best_epoch, 2);
  for (const auto& [name, value] : snapshot(m)) EXPECT_TRUE(value == at_best.at(name)) << name;
}

TEST(Train, RefusesZeroShotAndNonFiniteLoss) {
  AdaptedModel m = adapt(toy(), config_for(Strategy::kVanilla), build_prompts(kClasses), 0);
  auto s = short_schedule(1);
  s.warmup_steps = 0;
  EXPECT_THROW(train(m, LabeledImages{}, make_images(1, 1), s), ConfigError);
  m.encoder.vision.ln_pre.gamma.value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train(m, make_images(1, 1), make_images(1, 2), s), TrainingError);
}

TEST(Train, DeterministicForFixedSeed) {
  auto run = [] {
    AdaptedModel m = adapt(toy(), config_for(Strategy::kLora), build_prompts(kClasses), 3);
    auto s = short_schedule(3);
    s.augment = true;
    s.augmentation_seed = 99;
    return train(m, make_images(2, 14), make_images(1, 15), s).to_json();
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, WarmupThenLinearDecay) {
  TrainSchedule s;
  s.base_lr = 1.0;
  s.warmup_steps = 4;
  EXPECT_DOUBLE_EQ(learning_rate(s, 0, 12), 0.25);
  EXPECT_DOUBLE_EQ(learning_rate(s, 3, 12), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(s, 4, 12), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(s, 8, 12), 0.5);
  EXPECT_DOUBLE_EQ(learning_rate(s, 12, 12), 0.0);
}

TEST(Schedule, EffectiveBatchAndJson) {
  TrainSchedule s;
  EXPECT_EQ(s.effective_batch(5), 5);
  EXPECT_EQ(s.effective_batch(160), 32);
  s.batch_size = 8;
  EXPECT_EQ(s.effective_batch(160), 8);
  EXPECT_EQ(TrainSchedule::from_json(s.to_json()).to_json(), s.to_json());
}

TEST(Augment, KeepsShapeAndIsSeeded) {
  const auto set = make_images(1, 16);
  Engine a(1), b(1);
  const Image x = augment(set.images[0], a);
  EXPECT_EQ(x.width, 16);
  EXPECT_EQ(x, augment(set.images[0], b));
}

TEST(Checkpoint, RoundTripReproducesLogits) {
  const auto images = make_images(1, 17);
  for (Strategy s : all_strategies()) {
    AdaptedModel m = adapt(toy(), config_for(s), build_prompts(kClasses), 6);
    train(m, make_images(2, 18), images, short_schedule(2));
    const auto path = std::filesystem::temp_directory_path() / "fsvlm_ckpt_test" / "delta.fsvt";
    save_checkpoint(path, m, "fp-123");
    std::string fp;
    AdaptedModel back = load_checkpoint(path, toy(), build_prompts(kClasses), &fp);
    EXPECT_EQ(fp, "fp-123");
    EXPECT_TRUE(logits_of(back, images) == logits_of(m, images)) << strategy_name(s);
    std::filesystem::remove_all(path.parent_path());
  }
}

TEST(Predict, ClassifierReportsHeadFeatures) {
  AdaptedModel m = adapt(toy(), config_for(Strategy::kClassifier), build_prompts(kClasses), 0);
  const auto p = predict(m, make_images(1, 19));
  EXPECT_EQ(p.head_features.rows(), 5);
  EXPECT_EQ(p.head_features.cols(), 32);
  EXPECT_EQ(p.classification.probabilities.rows(), 5);
}

}  // namespace
}  // namespace fsvlm
