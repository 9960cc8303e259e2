// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "kdpl/autodiff.hpp"
#include "kdpl/errors.hpp"
#include "kdpl/jsonio.hpp"
#include "kdpl/rng.hpp"
#include "kdpl/tokenizer.hpp"

namespace kdpl {

enum class Role { teacher, student };
enum class ImageBranch { vit, feature };

struct EncoderConfig {
  int shared_dim = 64;      // d
  int text_token_dim = 64;  // d_w
  int patch_dim = 64;       // d_v
  int num_layers = 2;
  int num_patches = 4;  // U
  int vocab_size = 32768;
  int max_text_len = 32;
  ImageBranch image_branch = ImageBranch::vit;
  int feature_dim = 64;  // input dim of the feature branch

  void validate() const {
    auto pos = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
    };
    pos(shared_dim, "shared_dim");
    pos(text_token_dim, "text_token_dim");
    pos(patch_dim, "patch_dim");
    pos(num_patches, "num_patches");
    pos(vocab_size, "vocab_size");
    pos(max_text_len, "max_text_len");
    if (num_layers < 0) throw ConfigError("num_layers must be >= 0");
    if (image_branch == ImageBranch::feature) pos(feature_dim, "feature_dim");
  }
};

/// A tokenized text: one row per token, each of dim d_w.
struct TokenSequence {
  Matrix embeddings;  // L x d_w
  Eigen::Index length() const { return embeddings.rows(); }
};

/// Lazy token-embedding table: rows are a pure function of (seed, id) unless
/// explicitly overridden. Keeps checkpoints compact and planting exact while
/// behaving like a dense vocab_size x dim table.
class TokenEmbedder {
public:
  TokenEmbedder() = default;
  TokenEmbedder(int vocab_size, int dim, std::uint64_t seed)
      : vocab_size_(vocab_size), dim_(dim), seed_(seed) {}

  Vector row(int id) const {
    if (id < 0 || id >= vocab_size_) throw ShapeError("token id out of range");
    auto it = overrides_.find(id);
    if (it != overrides_.end()) return it->second;
    SplitMix64 rng(derive_seed(seed_, 0x70ffee, static_cast<std::uint64_t>(id)));
    Vector v(dim_);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim_));
    for (int i = 0; i < dim_; ++i) v(i) = rng.next_symmetric(s);
    return v;
  }

  Matrix embed(const std::vector<int>& ids) const {
    Matrix m(static_cast<Eigen::Index>(ids.size()), dim_);
    for (std::size_t i = 0; i < ids.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = row(ids[i]).transpose();
    return m;
  }

  void set_row(int id, const Vector& v) {
    if (id < 0 || id >= vocab_size_) throw ShapeError("token id out of range");
    if (v.size() != dim_) throw ShapeError("override dim mismatch");
    overrides_[id] = v;
  }

  int dim() const { return dim_; }
  int vocab_size() const { return vocab_size_; }
  std::uint64_t seed() const { return seed_; }
  const std::map<int, Vector>& overrides() const { return overrides_; }

  Json to_json() const {
    Json j;
    j["vocab_size"] = vocab_size_;
    j["dim"] = dim_;
    j["seed"] = seed_;
    Json ov = Json::object();
    for (const auto& [id, v] : overrides_) {
      Json arr = Json::array();
      for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
      ov[std::to_string(id)] = std::move(arr);
    }
    j["overrides"] = std::move(ov);
    return j;
  }

  static TokenEmbedder from_json(const Json& j) {
    TokenEmbedder e(j.at("vocab_size").get<int>(), j.at("dim").get<int>(),
                    j.at("seed").get<std::uint64_t>());
    for (const auto& [key, arr] : j.at("overrides").items()) {
      Vector v(static_cast<Eigen::Index>(arr.size()));
      for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
      e.overrides_[std::stoi(key)] = std::move(v);
    }
    return e;
  }

private:
  int vocab_size_ = 0;
  int dim_ = 0;
  std::uint64_t seed_ = 0;
  std::map<int, Vector> overrides_;
};

/// Pre-norm transformer block: x + Attn(x), LN, + MLP, LN. Single head.
struct AttentionBlockParams {
  Matrix wq, wk, wv, wo;  // dim x dim
  Matrix w1, w2;          // dim x hidden, hidden x dim

  Json to_json() const {
    Json j;
    j["wq"] = matrix_to_json(wq);
    j["wk"] = matrix_to_json(wk);
    j["wv"] = matrix_to_json(wv);
    j["wo"] = matrix_to_json(wo);
    j["w1"] = matrix_to_json(w1);
    j["w2"] = matrix_to_json(w2);
    return j;
  }
  static AttentionBlockParams from_json(const Json& j) {
    AttentionBlockParams b;
    b.wq = matrix_from_json(j.at("wq"));
    b.wk = matrix_from_json(j.at("wk"));
    b.wv = matrix_from_json(j.at("wv"));
    b.wo = matrix_from_json(j.at("wo"));
    b.w1 = matrix_from_json(j.at("w1"));
    b.w2 = matrix_from_json(j.at("w2"));
    return b;
  }
};

struct TowerParams {
  std::vector<AttentionBlockParams> blocks;
  Matrix proj;  // tower dim x shared dim
};

/// Injection plans. Entry for layer 0 prepends/inserts tokens at the input;
/// entries for layer i >= 1 replace the prompt rows before block i runs.
/// Token counts must match across layers of one plan.
struct TextInjectionAD {
  int num_ctx = 0;
  std::map<int, ad::Value> per_layer;
};
struct VisualInjectionAD {
  int num_tokens = 0;
  std::map<int, ad::Value> per_layer;
};

/// Image input: raw patch rows (U x d_v) for the ViT branch, or a flat
/// feature vector for the feature branch.
using ImageInput = std::variant<Matrix, Vector>;

class DualEncoderModel {
public:
  EncoderConfig config;
  Role role = Role::student;
  bool frozen = false;
  std::string backbone_id;

  TokenEmbedder embedder;
  TowerParams text;
  Matrix patch_proj;  // d_v x d_v (vit)
  Matrix cls;         // 1 x d_v   (vit)
  TowerParams image;  // vit tower
  Matrix feature_proj;  // feature_dim x d (feature branch)

  mutable std::uint64_t text_encode_calls = 0;
  mutable std::uint64_t image_encode_calls = 0;

  bool is_vit() const { return config.image_branch == ImageBranch::vit; }

  // ---- forward passes -----------------------------------------------------

  /// Runs one tower over a row-matrix of token/patch embeddings.
  ad::Value run_tower_ad(ad::Tape& t, const TowerParams& tower, ad::Value rows,
                         const std::map<int, ad::Value>* injections, int inject_row0,
                         int inject_count) const {
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(rows->value.cols()));
    for (std::size_t li = 0; li < tower.blocks.size(); ++li) {
      if (injections && li > 0) {
        auto it = injections->find(static_cast<int>(li));
        if (it != injections->end()) {
          std::vector<ad::Value> parts;
          if (inject_row0 > 0) parts.push_back(ad::slice_rows(t, rows, 0, inject_row0));
          parts.push_back(it->second);
          Eigen::Index tail0 = inject_row0 + inject_count;
          parts.push_back(ad::slice_rows(t, rows, tail0, rows->value.rows() - tail0));
          rows = ad::concat_rows(t, parts);
        }
      }
      const auto& b = tower.blocks[li];
      auto wq = t.constant(b.wq), wk = t.constant(b.wk), wv = t.constant(b.wv),
           wo = t.constant(b.wo), w1 = t.constant(b.w1), w2 = t.constant(b.w2);
      auto q = ad::matmul(t, rows, wq);
      auto k = ad::matmul(t, rows, wk);
      auto v = ad::matmul(t, rows, wv);
      auto scores = ad::scale(t, ad::matmul_nt(t, q, k), att_scale);
      auto att = ad::matmul(t, ad::row_softmax(t, scores), v);
      auto h1 = ad::layer_norm_rows(t, ad::add(t, rows, ad::matmul(t, att, wo)));
      auto mlp = ad::matmul(t, ad::tanh_op(t, ad::matmul(t, h1, w1)), w2);
      rows = ad::layer_norm_rows(t, ad::add(t, h1, mlp));
    }
    return rows;
  }

  /// Text tower: [ctx?, tokens] -> blocks -> mean pool -> linear projection.
  ad::Value encode_text_ad(ad::Tape& t, const ad::Value& tokens,
                           const TextInjectionAD* plan = nullptr) const {
    ++text_encode_calls;
    if (tokens->value.cols() != config.text_token_dim)
      throw ShapeError("token dim != text_token_dim");
    ad::Value rows = tokens;
    int num_ctx = 0;
    if (plan) {
      num_ctx = plan->num_ctx;
      auto it = plan->per_layer.find(0);
      if (it != plan->per_layer.end()) rows = ad::concat_rows(t, {it->second, tokens});
    }
    if (rows->value.rows() > config.max_text_len)
      throw ShapeError("token sequence longer than max_text_len");
    rows = run_tower_ad(t, text, rows, plan ? &plan->per_layer : nullptr, 0, num_ctx);
    auto pooled = ad::mean_rows(t, rows);
    return ad::matmul(t, pooled, t.constant(text.proj));  // 1 x d
  }

  Vector encode_text(const TokenSequence& tokens) const {
    ad::Tape t;
    auto out = encode_text_ad(t, t.constant(tokens.embeddings));
    return out->value.row(0).transpose();
  }

  /// Image tower. ViT branch: patches projected, CLS at row 0, prompt tokens
  /// (when present) inserted after CLS, blocks, final CLS row projected.
  ad::Value encode_image_ad(ad::Tape& t, const ImageInput& input,
                            const VisualInjectionAD* plan = nullptr) const {
    ++image_encode_calls;
    if (config.image_branch == ImageBranch::feature) {
      if (plan) throw UnsupportedBackboneError("visual prompts require a ViT image encoder");
      const auto* feat = std::get_if<Vector>(&input);
      if (!feat) throw ShapeError("feature-branch model expects a feature vector");
      if (feat->size() != config.feature_dim) throw ShapeError("feature dim mismatch");
      auto row = t.constant(feat->transpose());
      return ad::matmul(t, row, t.constant(feature_proj));  // 1 x d
    }
    Matrix patch_rows;
    if (const auto* patches = std::get_if<Matrix>(&input)) {
      patch_rows = *patches;
    } else {
      // flat features are patchified row-major: U x d_v
      const auto& feat = std::get<Vector>(input);
      if (feat.size() != static_cast<Eigen::Index>(config.num_patches) * config.patch_dim)
        throw ShapeError("feature length does not match num_patches x patch_dim");
      patch_rows.resize(config.num_patches, config.patch_dim);
      for (int r = 0; r < config.num_patches; ++r)
        patch_rows.row(r) = feat.segment(static_cast<Eigen::Index>(r) * config.patch_dim,
                                         config.patch_dim).transpose();
    }
    if (patch_rows.rows() != config.num_patches || patch_rows.cols() != config.patch_dim)
      throw ShapeError("patch matrix must be num_patches x patch_dim");
    auto embedded = ad::matmul(t, t.constant(patch_rows), t.constant(patch_proj));
    ad::Value rows;
    int num_tokens = 0;
    if (plan) {
      num_tokens = plan->num_tokens;
      auto it = plan->per_layer.find(0);
      if (it == plan->per_layer.end())
        throw ContractViolation("visual injection plan missing layer-0 tokens");
      rows = ad::concat_rows(t, {t.constant(cls), it->second, embedded});
    } else {
      rows = ad::concat_rows(t, {t.constant(cls), embedded});
    }
    rows = run_tower_ad(t, image, rows, plan ? &plan->per_layer : nullptr, 1, num_tokens);
    auto cls_out = ad::slice_rows(t, rows, 0, 1);
    return ad::matmul(t, cls_out, t.constant(image.proj));  // 1 x d
  }

  Vector encode_image(const ImageInput& input) const {
    ad::Tape t;
    auto out = encode_image_ad(t, input);
    return out->value.row(0).transpose();
  }

  // ---- construction / io --------------------------------------------------

  static Matrix init_matrix(Eigen::Index rows, Eigen::Index cols, SplitMix64& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(rows));
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.next_symmetric(s);
    return m;
  }

  static TowerParams init_tower(int dim, int shared_dim, int num_layers, SplitMix64& rng) {
    TowerParams tp;
    int hidden = 2 * dim;
    for (int i = 0; i < num_layers; ++i) {
      AttentionBlockParams b;
      b.wq = init_matrix(dim, dim, rng);
      b.wk = init_matrix(dim, dim, rng);
      b.wv = init_matrix(dim, dim, rng);
      b.wo = init_matrix(dim, dim, rng);
      b.w1 = init_matrix(dim, hidden, rng);
      b.w2 = init_matrix(hidden, dim, rng);
      tp.blocks.push_back(std::move(b));
    }
    tp.proj = init_matrix(dim, shared_dim, rng);
    return tp;
  }

  static DualEncoderModel make(const EncoderConfig& cfg, Role role, std::uint64_t seed,
                               std::string backbone_id = "toy") {
    cfg.validate();
    DualEncoderModel m;
    m.config = cfg;
    m.role = role;
    m.frozen = (role == Role::teacher);  // teacher role implies frozen
    m.backbone_id = std::move(backbone_id);
    m.embedder = TokenEmbedder(cfg.vocab_size, cfg.text_token_dim, derive_seed(seed, 1));
    SplitMix64 rng(derive_seed(seed, 2));
    m.text = init_tower(cfg.text_token_dim, cfg.shared_dim, cfg.num_layers, rng);
    if (cfg.image_branch == ImageBranch::vit) {
      m.patch_proj = init_matrix(cfg.patch_dim, cfg.patch_dim, rng);
      m.cls = init_matrix(1, cfg.patch_dim, rng);
      m.image = init_tower(cfg.patch_dim, cfg.shared_dim, cfg.num_layers, rng);
    } else {
      m.feature_proj = init_matrix(cfg.feature_dim, cfg.shared_dim, rng);
    }
    return m;
  }

  Json to_json() const {
    Json j;
    j["format"] = "kdpl.model.v1";
    Json cfg;
    cfg["shared_dim"] = config.shared_dim;
    cfg["text_token_dim"] = config.text_token_dim;
    cfg["patch_dim"] = config.patch_dim;
    cfg["num_layers"] = config.num_layers;
    cfg["num_patches"] = config.num_patches;
    cfg["vocab_size"] = config.vocab_size;
    cfg["max_text_len"] = config.max_text_len;
    cfg["image_branch"] = config.image_branch == ImageBranch::vit ? "vit" : "feature";
    cfg["feature_dim"] = config.feature_dim;
    j["config"] = std::move(cfg);
    j["role"] = role == Role::teacher ? "teacher" : "student";
    j["frozen"] = frozen;
    j["backbone_id"] = backbone_id;
    j["token_embedder"] = embedder.to_json();
    Json tb = Json::array();
    for (const auto& b : text.blocks) tb.push_back(b.to_json());
    j["text_blocks"] = std::move(tb);
    j["text_proj"] = matrix_to_json(text.proj);
    if (config.image_branch == ImageBranch::vit) {
      j["patch_proj"] = matrix_to_json(patch_proj);
      j["cls"] = matrix_to_json(cls);
      Json ib = Json::array();
      for (const auto& b : image.blocks) ib.push_back(b.to_json());
      j["image_blocks"] = std::move(ib);
      j["image_proj"] = matrix_to_json(image.proj);
    } else {
      j["feature_proj"] = matrix_to_json(feature_proj);
    }
    return j;
  }

  static DualEncoderModel from_json(const Json& j) {
    if (j.value("format", "") != "kdpl.model.v1") throw ParseError("not a kdpl model checkpoint");
    DualEncoderModel m;
    const auto& cfg = j.at("config");
    m.config.shared_dim = cfg.at("shared_dim").get<int>();
    m.config.text_token_dim = cfg.at("text_token_dim").get<int>();
    m.config.patch_dim = cfg.at("patch_dim").get<int>();
    m.config.num_layers = cfg.at("num_layers").get<int>();
    m.config.num_patches = cfg.at("num_patches").get<int>();
    m.config.vocab_size = cfg.at("vocab_size").get<int>();
    m.config.max_text_len = cfg.at("max_text_len").get<int>();
    m.config.image_branch =
        cfg.at("image_branch").get<std::string>() == "vit" ? ImageBranch::vit : ImageBranch::feature;
    m.config.feature_dim = cfg.at("feature_dim").get<int>();
    m.role = j.at("role").get<std::string>() == "teacher" ? Role::teacher : Role::student;
    m.frozen = j.at("frozen").get<bool>();
    m.backbone_id = j.value("backbone_id", "toy");
    m.embedder = TokenEmbedder::from_json(j.at("token_embedder"));
    for (const auto& b : j.at("text_blocks")) m.text.blocks.push_back(AttentionBlockParams::from_json(b));
    m.text.proj = matrix_from_json(j.at("text_proj"));
    if (m.config.image_branch == ImageBranch::vit) {
      m.patch_proj = matrix_from_json(j.at("patch_proj"));
      m.cls = matrix_from_json(j.at("cls"));
      for (const auto& b : j.at("image_blocks"))
        m.image.blocks.push_back(AttentionBlockParams::from_json(b));
      m.image.proj = matrix_from_json(j.at("image_proj"));
    } else {
      m.feature_proj = matrix_from_json(j.at("feature_proj"));
    }
    return m;
  }

  void save(const std::string& path) const { write_json_file(path, to_json()); }
  static DualEncoderModel load(const std::string& path) { return from_json(read_json_file(path)); }
};

}  // namespace kdpl
