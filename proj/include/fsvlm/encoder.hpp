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

#include "fsvlm/corpus.hpp"
#include "fsvlm/image.hpp"
#include "fsvlm/layers.hpp"

namespace fsvlm {

enum class ArchitectureFamily { kDualContrastive, kCocaStyle };

// Shapes of both towers. Pretrained checkpoints converted into the
// harness tensor format must match these exactly.
struct ArchitectureSpec {
  int image_size = 16;
  int patch_size = 8;
  int vision_width = 32;
  int vision_depth = 4;
  int vision_heads = 4;
  int text_vocab = 256;
  int text_context = 16;
  int text_width = 32;
  int text_depth = 4;
  int text_heads = 4;
  int mlp_ratio = 4;
  int embed_dim = 32;
  nn::Activation activation = nn::Activation::kGelu;
  double init_logit_scale = 1.0;

  int depth() const { return std::min(vision_depth, text_depth); }
};

struct BackboneDescriptor {
  std::string name;
  int embed_dim = 512;
  int input_size = 224;
  bool has_learned_logit_scale = true;
  ArchitectureFamily family = ArchitectureFamily::kDualContrastive;
  ArchitectureSpec arch;
};

inline constexpr double kDefaultLogitScale = 100.0;
inline constexpr std::uint64_t kToyBackboneSeed = 20240607;

// Built-in descriptors: "clip-vit-b16", "plip", "conch", "toy".
std::vector<std::string> backbone_names();
const BackboneDescriptor& backbone_descriptor(const std::string& name);
// Adds or replaces nothing: a duplicate name throws ConfigError.
void register_backbone(BackboneDescriptor descriptor);

// Lower-cased alphanumeric words hashed into the vocabulary, wrapped in
// start/end markers and truncated to the context length.
std::vector<int> tokenize(const std::string& text, int vocab, int context);

class VisionTower {
 public:
  VisionTower() = default;
  VisionTower(const ArchitectureSpec& arch, Engine& rng);

  // `patches` is (batch * tokens_per_image) x patch_dim, already normalized.
  nn::Var forward(const nn::Matrix& patches, int batch, const nn::Context& ctx);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);

  nn::Linear patch_embed;
  nn::Parameter class_token;
  nn::Parameter positions;
  nn::LayerNorm ln_pre;
  std::vector<nn::TransformerBlock> blocks;
  nn::LayerNorm ln_post;
  nn::Linear projection;
};

class TextTower {
 public:
  TextTower() = default;
  TextTower(const ArchitectureSpec& arch, Engine& rng);

  nn::Var forward(const std::vector<std::vector<int>>& tokens, const nn::Context& ctx);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);

  nn::Parameter token_embedding;
  nn::Parameter positions;
  std::vector<nn::TransformerBlock> blocks;
  nn::LayerNorm ln_final;
  nn::Linear projection;
};

// Two towers projecting into one L2-normalized embedding space.
class DualEncoder {
 public:
  DualEncoder() = default;
  static DualEncoder random(const BackboneDescriptor& descriptor, std::uint64_t seed);

  const BackboneDescriptor& descriptor() const { return descriptor_; }
  const ArchitectureSpec& arch() const { return descriptor_.arch; }

  // Image rows in input order; images of any size are resized first.
  nn::Var embed_images(std::span<const Image* const> images, const nn::Context& ctx);
  nn::Var embed_texts(const std::vector<std::string>& texts, const nn::Context& ctx);
  nn::Var logit_scale(const nn::Context& ctx);
  double logit_scale_value() const;

  void visit(const nn::ParamVisitor& fn);
  void visit(const nn::ConstParamVisitor& fn) const;

  VisionTower vision;
  TextTower text;
  nn::Parameter log_logit_scale;  // 1x1; meaningful only with a learned scale

 private:
  BackboneDescriptor descriptor_;
};

// Resize + per-channel normalization + patchify; (P x patch_dim).
nn::Matrix image_to_patches(const Image& image, const ArchitectureSpec& arch);

std::filesystem::path default_cache_dir();

// "toy" is generated from kToyBackboneSeed; anything else is read from
// <cache_dir>/<name>/weights.fsvt. Throws IoError when unavailable.
DualEncoder load_backbone(const std::string& name, const std::filesystem::path& cache_dir);
void save_backbone_weights(const std::filesystem::path& path, const DualEncoder& model);

enum class Modality { kImage, kText };
std::string modality_name(Modality m);
Modality parse_modality(const std::string& s);

// Rows are unit-norm and exactly representable in float32, so the
// exchange format round-trips bit-exactly.
struct EmbeddingBatch {
  nn::Matrix vectors;  // N x d
  Modality modality = Modality::kImage;
  std::vector<std::string> class_names;
  std::vector<int> labels;  // empty or one per row
  std::vector<std::string> ids;

  Eigen::Index size() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
  // Throws ValidationError on broken invariants.
  void validate() const;
};

// Normalizes each row and rounds it to float32 precision.
nn::Matrix finalize_embeddings(const nn::Matrix& raw);

EmbeddingBatch encode_images(DualEncoder& model, std::span<const SlidePatch> patches,
                             const std::vector<std::string>& classes);
EmbeddingBatch encode_image_set(DualEncoder& model, std::span<const Image* const> images,
                                std::vector<int> labels, std::vector<std::string> ids,
                                const std::vector<std::string>& classes);
EmbeddingBatch encode_prompts(DualEncoder& model, const PromptSet& prompts);

struct Classification {
  nn::Matrix probabilities;  // N x C
  std::vector<int> predictions;
};

// Softmax over scale * cosine. Ties go to the lowest class index.
Classification classify(const EmbeddingBatch& images, const EmbeddingBatch& texts, double logit_scale);
std::vector<int> argmax_rows(const nn::Matrix& m);

// <dir>/embeddings.bin (little-endian float32, row-major) + <dir>/meta.json.
void write_embeddings(const std::filesystem::path& dir, const EmbeddingBatch& batch);
EmbeddingBatch read_embeddings(const std::filesystem::path& dir);

}  // namespace fsvlm
