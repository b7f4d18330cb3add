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

#include "fsvlm/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>

#include "fsvlm/error.hpp"
#include "fsvlm/jsonl.hpp"
#include "fsvlm/tensor_io.hpp"

namespace fsvlm {

namespace {

using nn::Matrix;
using nn::Var;

constexpr double kChannelMean[3] = {0.48145466, 0.4578275, 0.40821073};
constexpr double kChannelStd[3] = {0.26862954, 0.26130258, 0.27577711};
constexpr int kStartToken = 1;
constexpr int kEndToken = 2;
constexpr int kFirstWordToken = 3;

ArchitectureSpec vit_b16(int image_size, int text_width) {
  ArchitectureSpec a;
  a.image_size = image_size;
  a.patch_size = 16;
  a.vision_width = 768;
  a.vision_depth = 12;
  a.vision_heads = 12;
  a.text_vocab = 49408;
  a.text_context = 77;
  a.text_width = text_width;
  a.text_depth = 12;
  a.text_heads = text_width / 64;
  a.mlp_ratio = 4;
  a.embed_dim = 512;
  a.activation = nn::Activation::kQuickGelu;
  a.init_logit_scale = 1.0 / 0.07;
  return a;
}

std::vector<BackboneDescriptor>& registry() {
  static std::vector<BackboneDescriptor> r = [] {
    std::vector<BackboneDescriptor> v;
    v.push_back({"clip-vit-b16", 512, 224, true, ArchitectureFamily::kDualContrastive, vit_b16(224, 512)});
    v.push_back({"plip", 512, 224, true, ArchitectureFamily::kDualContrastive, vit_b16(224, 512)});
    auto conch = vit_b16(448, 768);
    conch.activation = nn::Activation::kGelu;
    v.push_back({"conch", 512, 448, true, ArchitectureFamily::kCocaStyle, conch});
    ArchitectureSpec toy;
    v.push_back({"toy", toy.embed_dim, toy.image_size, true, ArchitectureFamily::kDualContrastive, toy});
    return v;
  }();
  return r;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

void check_arch(const ArchitectureSpec& a) {
  if (a.image_size <= 0 || a.patch_size <= 0 || a.image_size % a.patch_size != 0) {
    throw ConfigError("image size must be a positive multiple of the patch size");
  }
  if (a.embed_dim <= 0 || a.vision_width <= 0 || a.text_width <= 0) {
    throw ConfigError("embedding and tower widths must be positive");
  }
  if (a.vision_depth < 1 || a.text_depth < 1) throw ConfigError("tower depth must be >= 1");
  if (a.text_vocab <= kFirstWordToken || a.text_context < 3) {
    throw ConfigError("text vocabulary/context too small");
  }
}

}  // namespace

std::vector<std::string> backbone_names() {
  std::lock_guard lock(registry_mutex());
  std::vector<std::string> names;
  for (const auto& d : registry()) names.push_back(d.name);
  return names;
}

const BackboneDescriptor& backbone_descriptor(const std::string& name) {
  std::lock_guard lock(registry_mutex());
  for (const auto& d : registry()) {
    if (d.name == name) return d;
  }
  throw LookupError("unknown backbone '" + name + "'");
}

void register_backbone(BackboneDescriptor descriptor) {
  check_arch(descriptor.arch);
  if (descriptor.embed_dim != descriptor.arch.embed_dim ||
      descriptor.input_size != descriptor.arch.image_size) {
    throw ConfigError("descriptor and architecture disagree for '" + descriptor.name + "'");
  }
  std::lock_guard lock(registry_mutex());
  for (const auto& d : registry()) {
    if (d.name == descriptor.name) throw ConfigError("backbone '" + d.name + "' already registered");
  }
  registry().push_back(std::move(descriptor));
}

std::vector<int> tokenize(const std::string& text, int vocab, int context) {
  std::vector<int> out{kStartToken};
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    if (static_cast<int>(out.size()) < context - 1) {
      out.push_back(kFirstWordToken +
                    static_cast<int>(fnv1a64(word) % static_cast<std::uint64_t>(vocab - kFirstWordToken)));
    }
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  out.push_back(kEndToken);
  return out;
}

VisionTower::VisionTower(const ArchitectureSpec& a, Engine& rng) {
  const int w = a.vision_width;
  const int grid = a.image_size / a.patch_size;
  const int tokens = grid * grid + 1;
  const int patch_dim = a.patch_size * a.patch_size * 3;
  const double s = 1.0 / std::sqrt(static_cast<double>(w));
  patch_embed = nn::Linear(patch_dim, w, false, 1.0 / std::sqrt(static_cast<double>(patch_dim)), rng);
  class_token = nn::Parameter(nn::random_normal(1, w, s, rng));
  positions = nn::Parameter(nn::random_normal(tokens, w, s, rng));
  ln_pre = nn::LayerNorm(w);
  for (int i = 0; i < a.vision_depth; ++i) {
    blocks.emplace_back(w, a.vision_heads, w * a.mlp_ratio, a.activation, false, rng);
  }
  ln_post = nn::LayerNorm(w);
  projection = nn::Linear(w, a.embed_dim, false, s, rng);
}

Var VisionTower::forward(const Matrix& patches, int batch, const nn::Context& ctx) {
  const auto per_image = patches.rows() / batch;
  const auto tokens = per_image + 1;
  Var embedded = patch_embed.forward(nn::constant(patches), ctx);
  Var table = nn::concat_rows({nn::leaf(class_token, ctx), embedded});
  std::vector<Eigen::Index> order, pos_index;
  std::vector<nn::Segment> segments;
  order.reserve(static_cast<std::size_t>(batch * tokens));
  for (int b = 0; b < batch; ++b) {
    segments.push_back({b * tokens, tokens});
    order.push_back(0);
    pos_index.push_back(0);
    for (Eigen::Index i = 0; i < per_image; ++i) {
      order.push_back(1 + b * per_image + i);
      pos_index.push_back(1 + i);
    }
  }
  Var x = nn::add(nn::gather_rows(table, std::move(order)),
                  nn::gather_rows(nn::leaf(positions, ctx), std::move(pos_index)));
  x = ln_pre.forward(x, ctx);
  for (auto& blk : blocks) x = blk.forward(x, segments, ctx);
  std::vector<Eigen::Index> cls_rows;
  for (int b = 0; b < batch; ++b) cls_rows.push_back(b * tokens);
  Var pooled = ln_post.forward(nn::gather_rows(x, std::move(cls_rows)), ctx);
  return projection.forward(pooled, ctx);
}

void VisionTower::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  patch_embed.visit(prefix + ".patch_embed", fn);
  fn(prefix + ".class_token", class_token);
  fn(prefix + ".positions", positions);
  ln_pre.visit(prefix + ".ln_pre", fn);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(prefix + ".blocks." + std::to_string(i), fn);
  }
  ln_post.visit(prefix + ".ln_post", fn);
  projection.visit(prefix + ".projection", fn);
}

TextTower::TextTower(const ArchitectureSpec& a, Engine& rng) {
  const int w = a.text_width;
  const double s = 1.0 / std::sqrt(static_cast<double>(w));
  token_embedding = nn::Parameter(nn::random_normal(a.text_vocab, w, 1.0, rng));
  positions = nn::Parameter(nn::random_normal(a.text_context, w, s, rng));
  for (int i = 0; i < a.text_depth; ++i) {
    blocks.emplace_back(w, a.text_heads, w * a.mlp_ratio, a.activation, true, rng);
  }
  ln_final = nn::LayerNorm(w);
  projection = nn::Linear(w, a.embed_dim, false, s, rng);
}

Var TextTower::forward(const std::vector<std::vector<int>>& tokens, const nn::Context& ctx) {
  std::vector<Eigen::Index> ids, pos, last;
  std::vector<nn::Segment> segments;
  Eigen::Index start = 0;
  for (const auto& seq : tokens) {
    const auto n = static_cast<Eigen::Index>(seq.size());
    segments.push_back({start, n});
    for (Eigen::Index i = 0; i < n; ++i) {
      ids.push_back(seq[static_cast<std::size_t>(i)]);
      pos.push_back(i);
    }
    start += n;
    last.push_back(start - 1);
  }
  Var x = nn::add(nn::gather_rows(nn::leaf(token_embedding, ctx), std::move(ids)),
                  nn::gather_rows(nn::leaf(positions, ctx), std::move(pos)));
  for (auto& blk : blocks) x = blk.forward(x, segments, ctx);
  Var pooled = ln_final.forward(nn::gather_rows(x, std::move(last)), ctx);
  return projection.forward(pooled, ctx);
}

void TextTower::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  fn(prefix + ".token_embedding", token_embedding);
  fn(prefix + ".positions", positions);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(prefix + ".blocks." + std::to_string(i), fn);
  }
  ln_final.visit(prefix + ".ln_final", fn);
  projection.visit(prefix + ".projection", fn);
}

DualEncoder DualEncoder::random(const BackboneDescriptor& descriptor, std::uint64_t seed) {
  check_arch(descriptor.arch);
  DualEncoder m;
  m.descriptor_ = descriptor;
  Engine vision_rng(derive_seed(seed, "vision"));
  Engine text_rng(derive_seed(seed, "text"));
  m.vision = VisionTower(descriptor.arch, vision_rng);
  m.text = TextTower(descriptor.arch, text_rng);
  m.log_logit_scale = nn::Parameter(Matrix::Constant(1, 1, std::log(descriptor.arch.init_logit_scale)));
  return m;
}

Var DualEncoder::embed_images(std::span<const Image* const> images, const nn::Context& ctx) {
  if (images.empty()) throw ValidationError("embed_images: no images");
  const auto& a = arch();
  const int grid = a.image_size / a.patch_size;
  const int per_image = grid * grid;
  Matrix patches(static_cast<Eigen::Index>(images.size()) * per_image, a.patch_size * a.patch_size * 3);
  for (std::size_t i = 0; i < images.size(); ++i) {
    patches.middleRows(static_cast<Eigen::Index>(i) * per_image, per_image) = image_to_patches(*images[i], a);
  }
  return nn::l2_normalize_rows(vision.forward(patches, static_cast<int>(images.size()), ctx));
}

Var DualEncoder::embed_texts(const std::vector<std::string>& texts, const nn::Context& ctx) {
  if (texts.empty()) throw ValidationError("embed_texts: no texts");
  std::vector<std::vector<int>> tokens;
  for (const auto& t : texts) tokens.push_back(tokenize(t, arch().text_vocab, arch().text_context));
  return nn::l2_normalize_rows(text.forward(tokens, ctx));
}

Var DualEncoder::logit_scale(const nn::Context& ctx) {
  if (!descriptor_.has_learned_logit_scale) {
    return nn::constant(Matrix::Constant(1, 1, kDefaultLogitScale));
  }
  return nn::exp(nn::leaf(log_logit_scale, ctx));
}

double DualEncoder::logit_scale_value() const {
  return descriptor_.has_learned_logit_scale ? std::exp(log_logit_scale.value(0, 0)) : kDefaultLogitScale;
}

void DualEncoder::visit(const nn::ParamVisitor& fn) {
  vision.visit("visual", fn);
  text.visit("text", fn);
  if (descriptor_.has_learned_logit_scale) fn("logit_scale", log_logit_scale);
}

void DualEncoder::visit(const nn::ConstParamVisitor& fn) const {
  const_cast<DualEncoder*>(this)->visit(
      nn::ParamVisitor([&fn](const std::string& name, nn::Parameter& p) { fn(name, p); }));
}

Matrix image_to_patches(const Image& image, const ArchitectureSpec& a) {
  if (image.empty()) throw ValidationError("image_to_patches: empty image");
  const Image sized = (image.width == a.image_size && image.height == a.image_size)
                          ? image
                          : resize(image, a.image_size, a.image_size);
  const int grid = a.image_size / a.patch_size;
  const int ps = a.patch_size;
  Matrix out(grid * grid, ps * ps * 3);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      int col = 0;
      for (int y = 0; y < ps; ++y) {
        for (int x = 0; x < ps; ++x) {
          const auto* p = sized.at(gx * ps + x, gy * ps + y);
          for (int c = 0; c < 3; ++c) {
            out(row, col++) = (p[c] / 255.0 - kChannelMean[c]) / kChannelStd[c];
          }
        }
      }
    }
  }
  return out;
}

std::filesystem::path default_cache_dir() {
  if (const char* env = std::getenv("FSVLM_CACHE"); env != nullptr && *env != '\0') return env;
  if (const char* home = std::getenv("HOME"); home != nullptr && *home != '\0') {
    return std::filesystem::path(home) / ".cache" / "fsvlm";
  }
  return ".fsvlm_cache";
}

DualEncoder load_backbone(const std::string& name, const std::filesystem::path& cache_dir) {
  const auto& desc = backbone_descriptor(name);
  if (name == "toy") return DualEncoder::random(desc, kToyBackboneSeed);
  const auto path = cache_dir / name / "weights.fsvt";
  if (!std::filesystem::exists(path)) {
    throw IoError("weights for backbone '" + name + "' not found at " + path.string() +
                  " (set FSVLM_CACHE or convert the checkpoint first)");
  }
  const TensorFile file = read_tensor_file(path);
  if (file.header.value("backbone", "") != name) {
    throw IoError(path.string() + " holds weights for '" + file.header.value("backbone", "?") + "'");
  }
  DualEncoder model = DualEncoder::random(desc, 0);
  std::size_t matched = 0;
  model.visit([&](const std::string& pname, nn::Parameter& p) {
    auto it = file.tensors.find(pname);
    if (it == file.tensors.end()) throw IoError(path.string() + ": missing tensor '" + pname + "'");
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw IoError(path.string() + ": tensor '" + pname + "' has the wrong shape");
    }
    p.value = it->second;
    ++matched;
  });
  if (matched != file.tensors.size()) throw IoError(path.string() + ": unexpected extra tensors");
  return model;
}

void save_backbone_weights(const std::filesystem::path& path, const DualEncoder& model) {
  TensorFile file;
  file.header["backbone"] = model.descriptor().name;
  model.visit([&](const std::string& name, const nn::Parameter& p) { file.tensors[name] = p.value; });
  write_tensor_file(path, file);
}

std::string modality_name(Modality m) { return m == Modality::kImage ? "image" : "text"; }

Modality parse_modality(const std::string& s) {
  if (s == "image") return Modality::kImage;
  if (s == "text") return Modality::kText;
  throw ValidationError("unknown modality '" + s + "'");
}

void EmbeddingBatch::validate() const {
  if (vectors.rows() < 1) throw ValidationError("embedding batch is empty");
  if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != vectors.rows()) {
    throw ValidationError("embedding batch: label count differs from row count");
  }
  if (!ids.empty() && static_cast<Eigen::Index>(ids.size()) != vectors.rows()) {
    throw ValidationError("embedding batch: id count differs from row count");
  }
  for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
    const double n = vectors.row(r).norm();
    if (!std::isfinite(n) || std::abs(n - 1.0) >= 1e-5) {
      throw ValidationError("embedding row " + std::to_string(r) + " is not unit-norm (" +
                            std::to_string(n) + ")");
    }
  }
  for (int l : labels) {
    if (l < 0 || (!class_names.empty() && l >= static_cast<int>(class_names.size()))) {
      throw ValidationError("embedding batch: label out of range");
    }
  }
}

Matrix finalize_embeddings(const Matrix& raw) {
  Matrix out(raw.rows(), raw.cols());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    const double n = raw.row(r).norm();
    if (!(n > 0) || !std::isfinite(n)) throw ValidationError("cannot normalize embedding row");
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
      out(r, c) = static_cast<double>(static_cast<float>(raw(r, c) / n));
    }
  }
  return out;
}

EmbeddingBatch encode_image_set(DualEncoder& model, std::span<const Image* const> images,
                                std::vector<int> labels, std::vector<std::string> ids,
                                const std::vector<std::string>& classes) {
  if (images.empty()) throw ValidationError("encode_images: no images");
  constexpr std::size_t kChunk = 64;
  const nn::Context eval{};
  Matrix all(static_cast<Eigen::Index>(images.size()), model.arch().embed_dim);
  for (std::size_t s = 0; s < images.size(); s += kChunk) {
    const auto n = std::min(kChunk, images.size() - s);
    all.middleRows(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(n)) =
        model.embed_images(images.subspan(s, n), eval).value();
  }
  EmbeddingBatch b;
  b.vectors = finalize_embeddings(all);
  b.modality = Modality::kImage;
  b.class_names = classes;
  b.labels = std::move(labels);
  b.ids = std::move(ids);
  b.validate();
  return b;
}

EmbeddingBatch encode_images(DualEncoder& model, std::span<const SlidePatch> patches,
                             const std::vector<std::string>& classes) {
  std::vector<const Image*> images;
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (const auto& p : patches) {
    images.push_back(&p.pixels);
    auto it = std::find(classes.begin(), classes.end(), p.label);
    if (it == classes.end()) throw LookupError("patch label '" + p.label + "' is not a configured class");
    labels.push_back(static_cast<int>(it - classes.begin()));
    ids.push_back(p.glom_id);
  }
  return encode_image_set(model, images, std::move(labels), std::move(ids), classes);
}

EmbeddingBatch encode_prompts(DualEncoder& model, const PromptSet& prompts) {
  EmbeddingBatch b;
  b.vectors = finalize_embeddings(model.embed_texts(prompts.prompts(), nn::Context{}).value());
  b.modality = Modality::kText;
  b.class_names = prompts.classes();
  for (std::size_t i = 0; i < prompts.size(); ++i) b.labels.push_back(static_cast<int>(i));
  b.ids = prompts.classes();
  b.validate();
  return b;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) > m(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

Classification classify(const EmbeddingBatch& images, const EmbeddingBatch& texts, double logit_scale) {
  if (images.dim() != texts.dim()) {
    throw DimensionError("classify: image dim " + std::to_string(images.dim()) + " != text dim " +
                         std::to_string(texts.dim()));
  }
  if (texts.size() < 1 || images.size() < 1) throw DimensionError("classify: empty batch");
  if (!std::isfinite(logit_scale) || logit_scale < 0) {
    throw ValidationError("classify: logit scale must be finite and non-negative");
  }
  if (!images.vectors.allFinite() || !texts.vectors.allFinite()) {
    throw ValidationError("classify: non-finite embeddings");
  }
  Matrix a = images.vectors.rowwise().normalized();
  Matrix b = texts.vectors.rowwise().normalized();
  Matrix cos = a * b.transpose();
  Classification out;
  out.probabilities = nn::softmax_rows(cos * logit_scale);
  out.predictions = argmax_rows(cos);
  return out;
}

void write_embeddings(const std::filesystem::path& dir, const EmbeddingBatch& batch) {
  batch.validate();
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "embeddings.bin", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "embeddings.bin").string());
  for (Eigen::Index r = 0; r < batch.vectors.rows(); ++r) {
    for (Eigen::Index c = 0; c < batch.vectors.cols(); ++c) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(batch.vectors(r, c)));
      const unsigned char le[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                   static_cast<unsigned char>(bits >> 16),
                                   static_cast<unsigned char>(bits >> 24)};
      out.write(reinterpret_cast<const char*>(le), 4);
    }
  }
  if (!out) throw IoError("short write to " + (dir / "embeddings.bin").string());
  OrderedJson meta;
  meta["n"] = batch.vectors.rows();
  meta["d"] = batch.vectors.cols();
  meta["modality"] = modality_name(batch.modality);
  meta["class_names"] = batch.class_names;
  meta["labels"] = batch.labels;
  meta["ids"] = batch.ids;
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

EmbeddingBatch read_embeddings(const std::filesystem::path& dir) {
  const Json meta = read_json(dir / "meta.json");
  EmbeddingBatch b;
  Eigen::Index n = 0, d = 0;
  try {
    n = meta.at("n").get<Eigen::Index>();
    d = meta.at("d").get<Eigen::Index>();
    b.modality = parse_modality(meta.at("modality").get<std::string>());
    b.class_names = meta.at("class_names").get<std::vector<std::string>>();
    b.labels = meta.at("labels").get<std::vector<int>>();
    b.ids = meta.at("ids").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw ValidationError((dir / "meta.json").string() + ": " + e.what());
  }
  std::ifstream in(dir / "embeddings.bin", std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / "embeddings.bin").string());
  b.vectors.resize(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) {
      unsigned char le[4];
      in.read(reinterpret_cast<char*>(le), 4);
      if (!in) throw IoError((dir / "embeddings.bin").string() + " is shorter than n*d floats");
      const std::uint32_t bits = le[0] | (le[1] << 8) | (le[2] << 16) | (static_cast<std::uint32_t>(le[3]) << 24);
      b.vectors(r, c) = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IoError((dir / "embeddings.bin").string() + " is longer than n*d floats");
  }
  b.validate();
  return b;
}

}  // namespace fsvlm
