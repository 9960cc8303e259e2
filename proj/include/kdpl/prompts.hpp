// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kdpl/encoder.hpp"
#include "kdpl/errors.hpp"
#include "kdpl/jsonio.hpp"
#include "kdpl/rng.hpp"
#include "kdpl/tokenizer.hpp"

namespace kdpl {

enum class PromptMethod { coop, cocoop, vpt_shallow, vpt_deep, maple, promptsrc };

inline std::string method_name(PromptMethod m) {
  switch (m) {
    case PromptMethod::coop: return "coop";
    case PromptMethod::cocoop: return "cocoop";
    case PromptMethod::vpt_shallow: return "vpt_shallow";
    case PromptMethod::vpt_deep: return "vpt_deep";
    case PromptMethod::maple: return "maple";
    case PromptMethod::promptsrc: return "promptsrc";
  }
  throw ContractViolation("unknown prompt method");
}

inline PromptMethod method_from_name(const std::string& s) {
  if (s == "coop") return PromptMethod::coop;
  if (s == "cocoop") return PromptMethod::cocoop;
  if (s == "vpt_shallow") return PromptMethod::vpt_shallow;
  if (s == "vpt_deep") return PromptMethod::vpt_deep;
  if (s == "maple") return PromptMethod::maple;
  if (s == "promptsrc") return PromptMethod::promptsrc;
  throw ConfigError("unknown method: " + s);
}

inline bool method_uses_visual_prompts(PromptMethod m) {
  return m == PromptMethod::vpt_shallow || m == PromptMethod::vpt_deep ||
         m == PromptMethod::maple || m == PromptMethod::promptsrc;
}
inline bool method_uses_text_prompts(PromptMethod m) {
  return m != PromptMethod::vpt_shallow && m != PromptMethod::vpt_deep;
}

struct PromptOptions {
  int text_tokens = 4;   // M
  int visual_tokens = 8; // P
  int vision_depth = 12; // vpt-deep injected layers (clamped to the model)
  int prompt_depth = 9;  // maple / promptsrc depth (clamped to the model)
  std::string init_text = "a photo of a";
  double init_scale = 0.02;
};

/// The sole trainable state of the system. One layout per method family.
/// All matrices returned by named_params() are trainable; nothing else is.
class PromptParameters {
public:
  PromptMethod method = PromptMethod::coop;
  PromptOptions options;

  // coop / cocoop
  Matrix contexts;  // M x d_w
  // cocoop meta net: pi = relu(psi w1 + b1) w2 + b2, final layer zero-init
  Matrix meta_w1, meta_b1, meta_w2, meta_b2;
  // vpt: one entry (shallow) or one per injected layer (deep)
  std::vector<Matrix> visual_tokens;  // each P x d_v
  // maple: per-layer text contexts + per-layer coupling F (d_w x d_v)
  // promptsrc: per-layer text contexts + per-layer independent visual tokens
  std::vector<Matrix> text_ctx_layers;  // each M x d_w

  std::vector<std::pair<std::string, Matrix*>> named_params() {
    std::vector<std::pair<std::string, Matrix*>> out;
    switch (method) {
      case PromptMethod::coop:
        out.emplace_back("ctx", &contexts);
        break;
      case PromptMethod::cocoop:
        out.emplace_back("ctx", &contexts);
        out.emplace_back("meta_w1", &meta_w1);
        out.emplace_back("meta_b1", &meta_b1);
        out.emplace_back("meta_w2", &meta_w2);
        out.emplace_back("meta_b2", &meta_b2);
        break;
      case PromptMethod::vpt_shallow:
      case PromptMethod::vpt_deep:
        for (std::size_t i = 0; i < visual_tokens.size(); ++i)
          out.emplace_back("vis_l" + std::to_string(i), &visual_tokens[i]);
        break;
      case PromptMethod::maple:
        for (std::size_t i = 0; i < text_ctx_layers.size(); ++i) {
          out.emplace_back("ctx_l" + std::to_string(i), &text_ctx_layers[i]);
          out.emplace_back("coupling_l" + std::to_string(i), &visual_tokens[i]);
        }
        break;
      case PromptMethod::promptsrc:
        for (std::size_t i = 0; i < text_ctx_layers.size(); ++i)
          out.emplace_back("ctx_l" + std::to_string(i), &text_ctx_layers[i]);
        for (std::size_t i = 0; i < visual_tokens.size(); ++i)
          out.emplace_back("vis_l" + std::to_string(i), &visual_tokens[i]);
        break;
    }
    return out;
  }

  std::vector<std::pair<std::string, const Matrix*>> named_params() const {
    auto* self = const_cast<PromptParameters*>(this);
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [n, m] : self->named_params()) out.emplace_back(n, m);
    return out;
  }

  Json to_json() const {
    Json j;
    j["format"] = "kdpl.prompt.v1";
    j["method"] = method_name(method);
    Json opt;
    opt["text_tokens"] = options.text_tokens;
    opt["visual_tokens"] = options.visual_tokens;
    opt["vision_depth"] = options.vision_depth;
    opt["prompt_depth"] = options.prompt_depth;
    opt["init_text"] = options.init_text;
    opt["init_scale"] = options.init_scale;
    j["options"] = std::move(opt);
    j["text_ctx_layer_count"] = text_ctx_layers.size();
    j["visual_layer_count"] = visual_tokens.size();
    Json params;
    for (const auto& [name, m] : named_params()) params[name] = matrix_to_json(*m);
    j["params"] = std::move(params);
    return j;
  }

  static PromptParameters from_json(const Json& j) {
    if (j.value("format", "") != "kdpl.prompt.v1") throw ParseError("not a kdpl prompt checkpoint");
    PromptParameters p;
    p.method = method_from_name(j.at("method").get<std::string>());
    const auto& opt = j.at("options");
    p.options.text_tokens = opt.at("text_tokens").get<int>();
    p.options.visual_tokens = opt.at("visual_tokens").get<int>();
    p.options.vision_depth = opt.at("vision_depth").get<int>();
    p.options.prompt_depth = opt.at("prompt_depth").get<int>();
    p.options.init_text = opt.at("init_text").get<std::string>();
    p.options.init_scale = opt.at("init_scale").get<double>();
    p.text_ctx_layers.resize(j.at("text_ctx_layer_count").get<std::size_t>());
    p.visual_tokens.resize(j.at("visual_layer_count").get<std::size_t>());
    const auto& params = j.at("params");
    for (auto& [name, m] : p.named_params()) {
      if (!params.contains(name)) throw ParseError("prompt checkpoint missing param " + name);
      *m = matrix_from_json(params.at(name));
    }
    return p;
  }

  void save(const std::string& path) const { write_json_file(path, to_json()); }
  static PromptParameters load(const std::string& path) { return from_json(read_json_file(path)); }
};

/// Exact trainable-state size; matches the per-method closed forms.
inline long trainable_parameter_count(const PromptParameters& p) {
  long n = 0;
  for (const auto& [name, m] : p.named_params()) n += static_cast<long>(m->size());
  return n;
}

namespace detail {

inline Matrix init_contexts_from_text(const DualEncoderModel& model, const std::string& text,
                                      int m_tokens, std::uint64_t seed) {
  Tokenizer tok(model.config.vocab_size);
  auto ids = tok.encode(text);
  Matrix ctx(m_tokens, model.config.text_token_dim);
  SplitMix64 rng(derive_seed(seed, 0xc7f));
  for (int i = 0; i < m_tokens; ++i) {
    if (i < static_cast<int>(ids.size())) {
      ctx.row(i) = model.embedder.row(ids[static_cast<std::size_t>(i)]).transpose();
    } else {
      for (int c = 0; c < ctx.cols(); ++c) ctx(i, c) = rng.next_symmetric(0.02);
    }
  }
  return ctx;
}

inline Matrix random_tokens(int rows, int cols, double scale, SplitMix64& rng) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.next_symmetric(scale);
  return m;
}

}  // namespace detail

/// Builds gamma for `method` sized against `model`. Deep prompt depths are
/// clamped to the number of layers the model actually has (layer 0 is the
/// input-level prompt and always exists).
inline PromptParameters make_prompt_params(PromptMethod method, const DualEncoderModel& model,
                                           const PromptOptions& options, std::uint64_t seed) {
  if (method_uses_visual_prompts(method) && !model.is_vit())
    throw UnsupportedBackboneError(method_name(method) + " requires a ViT image encoder");
  PromptParameters p;
  p.method = method;
  p.options = options;
  const int d_w = model.config.text_token_dim;
  const int d_v = model.config.patch_dim;
  const int d = model.config.shared_dim;
  SplitMix64 rng(derive_seed(seed, 0x9a^static_cast<std::uint64_t>(method)));
  auto clamp_depth = [&](int want) {
    return std::max(1, std::min(want, std::max(1, model.config.num_layers)));
  };
  switch (method) {
    case PromptMethod::coop:
      p.contexts = detail::init_contexts_from_text(model, options.init_text, options.text_tokens, seed);
      break;
    case PromptMethod::cocoop: {
      p.contexts = detail::init_contexts_from_text(model, options.init_text, options.text_tokens, seed);
      int bottleneck = std::max(1, d / 16);
      p.meta_w1 = detail::random_tokens(d, bottleneck, 1.0 / std::sqrt(static_cast<double>(d)), rng);
      p.meta_b1 = Matrix::Zero(1, bottleneck);
      p.meta_w2 = Matrix::Zero(bottleneck, d_w);  // zero-init: training starts at the CoOp point
      p.meta_b2 = Matrix::Zero(1, d_w);
      break;
    }
    case PromptMethod::vpt_shallow:
      p.visual_tokens.push_back(
          detail::random_tokens(options.visual_tokens, d_v, options.init_scale, rng));
      break;
    case PromptMethod::vpt_deep: {
      int layers = clamp_depth(options.vision_depth);
      for (int i = 0; i < layers; ++i)
        p.visual_tokens.push_back(
            detail::random_tokens(options.visual_tokens, d_v, options.init_scale, rng));
      break;
    }
    case PromptMethod::maple: {
      int depth = clamp_depth(options.prompt_depth);
      for (int i = 0; i < depth; ++i) {
        p.text_ctx_layers.push_back(
            i == 0 ? detail::init_contexts_from_text(model, options.init_text, options.text_tokens, seed)
                   : detail::random_tokens(options.text_tokens, d_w, options.init_scale, rng));
        p.visual_tokens.push_back(
            detail::random_tokens(d_w, d_v, 1.0 / std::sqrt(static_cast<double>(d_w)), rng));
      }
      break;
    }
    case PromptMethod::promptsrc: {
      int depth = clamp_depth(options.prompt_depth);
      for (int i = 0; i < depth; ++i) {
        p.text_ctx_layers.push_back(
            i == 0 ? detail::init_contexts_from_text(model, options.init_text, options.text_tokens, seed)
                   : detail::random_tokens(options.text_tokens, d_w, options.init_scale, rng));
        p.visual_tokens.push_back(
            detail::random_tokens(options.visual_tokens, d_v, options.init_scale, rng));
      }
      break;
    }
  }
  return p;
}

/// CoCoOp meta-net forward (value semantics, no tape).
inline Vector meta_net_forward(const PromptParameters& p, const Vector& image_emb) {
  Matrix h = (image_emb.transpose() * p.meta_w1 + p.meta_b1).cwiseMax(0.0);
  Matrix pi = h * p.meta_w2 + p.meta_b2;
  return pi.row(0).transpose();
}

/// Contexts prepended to class tokens (CoOp/CoCoOp input-level view).
/// `image_emb` is required for CoCoOp and forbidden otherwise.
inline TokenSequence build_prompted_text_input(const PromptParameters& p,
                                               const TokenSequence& class_tokens,
                                               const Vector* image_emb = nullptr) {
  Matrix ctx;
  switch (p.method) {
    case PromptMethod::coop:
      ctx = p.contexts;
      break;
    case PromptMethod::cocoop: {
      if (!image_emb) throw ContractViolation("cocoop prompt needs an image embedding");
      Vector pi = meta_net_forward(p, *image_emb);
      ctx = p.contexts;
      ctx.rowwise() += pi.transpose();
      break;
    }
    case PromptMethod::maple:
    case PromptMethod::promptsrc:
      ctx = p.text_ctx_layers.at(0);
      break;
    default:
      throw ContractViolation("method has no text prompt: " + method_name(p.method));
  }
  TokenSequence out;
  out.embeddings.resize(ctx.rows() + class_tokens.embeddings.rows(), ctx.cols());
  out.embeddings << ctx, class_tokens.embeddings;
  return out;
}

/// Per-layer visual token lists. Layer 0 is the input-level injection.
inline std::map<int, Matrix> build_visual_injection_plan(const PromptParameters& p) {
  std::map<int, Matrix> plan;
  switch (p.method) {
    case PromptMethod::vpt_shallow:
      plan[0] = p.visual_tokens.at(0);
      break;
    case PromptMethod::vpt_deep:
    case PromptMethod::promptsrc:
      for (std::size_t i = 0; i < p.visual_tokens.size(); ++i)
        plan[static_cast<int>(i)] = p.visual_tokens[i];
      break;
    case PromptMethod::maple:
      // visual tokens are coupled: F applied to that layer's text contexts
      for (std::size_t i = 0; i < p.text_ctx_layers.size(); ++i)
        plan[static_cast<int>(i)] = p.text_ctx_layers[i] * p.visual_tokens[i];
      break;
    default:
      throw ContractViolation("method has no visual prompt: " + method_name(p.method));
  }
  return plan;
}

}  // namespace kdpl
