// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kdpl/encoder.hpp"
#include "kdpl/prompts.hpp"
#include "kdpl/teacher.hpp"
#include "kdpl/zero_shot.hpp"

namespace kdpl {

/// Gamma's matrices bound onto a tape as gradient-bearing leaves. The
/// bindings vector pairs each leaf with the matrix it shadows so the
/// optimizer can read gradients back in a fixed order.
struct BoundPrompt {
  PromptMethod method = PromptMethod::coop;
  PromptOptions options;
  ad::Value contexts, meta_w1, meta_b1, meta_w2, meta_b2;
  std::vector<ad::Value> text_ctx_layers;
  std::vector<ad::Value> visual_tokens;  // vpt/promptsrc tokens; maple couplings
  std::vector<std::pair<Matrix*, ad::Value>> bindings;
};

inline BoundPrompt bind_prompt(ad::Tape& t, PromptParameters& gamma) {
  BoundPrompt b;
  b.method = gamma.method;
  b.options = gamma.options;
  auto bind = [&](Matrix& m) {
    auto v = t.leaf(m, /*requires_grad=*/true);
    b.bindings.emplace_back(&m, v);
    return v;
  };
  switch (gamma.method) {
    case PromptMethod::coop:
      b.contexts = bind(gamma.contexts);
      break;
    case PromptMethod::cocoop:
      b.contexts = bind(gamma.contexts);
      b.meta_w1 = bind(gamma.meta_w1);
      b.meta_b1 = bind(gamma.meta_b1);
      b.meta_w2 = bind(gamma.meta_w2);
      b.meta_b2 = bind(gamma.meta_b2);
      break;
    case PromptMethod::vpt_shallow:
    case PromptMethod::vpt_deep:
      for (auto& m : gamma.visual_tokens) b.visual_tokens.push_back(bind(m));
      break;
    case PromptMethod::maple:
      // bindings interleave (ctx, coupling) per layer, matching named_params()
      for (std::size_t i = 0; i < gamma.text_ctx_layers.size(); ++i) {
        b.text_ctx_layers.push_back(bind(gamma.text_ctx_layers[i]));
        b.visual_tokens.push_back(bind(gamma.visual_tokens[i]));
      }
      break;
    case PromptMethod::promptsrc:
      for (auto& m : gamma.text_ctx_layers) b.text_ctx_layers.push_back(bind(m));
      for (auto& m : gamma.visual_tokens) b.visual_tokens.push_back(bind(m));
      break;
  }
  return b;
}

namespace detail {

/// A + ones * row, i.e. the same 1 x d row added to every row of A.
inline ad::Value add_row_broadcast(ad::Tape& t, const ad::Value& a, const ad::Value& row) {
  auto ones = t.constant(Matrix::Ones(a->value.rows(), 1));
  return ad::add(t, a, ad::matmul(t, ones, row));
}

inline TextInjectionAD text_plan_for(ad::Tape& t, const BoundPrompt& b,
                                     const ad::Value* cocoop_shift) {
  TextInjectionAD plan;
  switch (b.method) {
    case PromptMethod::coop:
      plan.num_ctx = static_cast<int>(b.contexts->value.rows());
      plan.per_layer[0] = b.contexts;
      break;
    case PromptMethod::cocoop: {
      plan.num_ctx = static_cast<int>(b.contexts->value.rows());
      plan.per_layer[0] =
          cocoop_shift ? add_row_broadcast(t, b.contexts, *cocoop_shift) : b.contexts;
      break;
    }
    case PromptMethod::maple:
    case PromptMethod::promptsrc:
      plan.num_ctx = static_cast<int>(b.text_ctx_layers.at(0)->value.rows());
      for (std::size_t i = 0; i < b.text_ctx_layers.size(); ++i)
        plan.per_layer[static_cast<int>(i)] = b.text_ctx_layers[i];
      break;
    default:
      throw ContractViolation("method has no text prompt");
  }
  return plan;
}

inline VisualInjectionAD visual_plan_for(ad::Tape& t, const BoundPrompt& b) {
  VisualInjectionAD plan;
  switch (b.method) {
    case PromptMethod::vpt_shallow:
      plan.num_tokens = static_cast<int>(b.visual_tokens.at(0)->value.rows());
      plan.per_layer[0] = b.visual_tokens[0];
      break;
    case PromptMethod::vpt_deep:
    case PromptMethod::promptsrc:
      plan.num_tokens = static_cast<int>(b.visual_tokens.at(0)->value.rows());
      for (std::size_t i = 0; i < b.visual_tokens.size(); ++i)
        plan.per_layer[static_cast<int>(i)] = b.visual_tokens[i];
      break;
    case PromptMethod::maple:
      plan.num_tokens = static_cast<int>(b.text_ctx_layers.at(0)->value.rows());
      for (std::size_t i = 0; i < b.text_ctx_layers.size(); ++i)
        plan.per_layer[static_cast<int>(i)] =
            ad::matmul(t, b.text_ctx_layers[i], b.visual_tokens[i]);
      break;
    default:
      throw ContractViolation("method has no visual prompt");
  }
  return plan;
}

/// CoCoOp meta-net on the tape: pi = relu(psi w1 + b1) w2 + b2 (1 x d_w).
inline ad::Value meta_net_ad(ad::Tape& t, const BoundPrompt& b, const Vector& image_emb) {
  auto psi = t.constant(image_emb.transpose());
  auto h = ad::relu(t, ad::add(t, ad::matmul(t, psi, b.meta_w1), b.meta_b1));
  return ad::add(t, ad::matmul(t, h, b.meta_w2), b.meta_b2);
}

}  // namespace detail

/// One student forward pass over a batch, on one tape.
struct StudentBatchForward {
  std::vector<ad::Value> prob_rows;   // per item, 1 x C
  std::vector<ad::Value> image_rows;  // per item, 1 x d (prompted when applicable)
  ad::Value text_features;            // C x d when shared across the batch, else null
};

/// Computes prompted student probabilities for `batch` over `classes`.
/// `bound` may be null, in which case the hand-crafted template is used
/// (zero-shot student). Encoders stay frozen; gradients flow only into the
/// bound gamma leaves.
inline StudentBatchForward student_forward(ad::Tape& t, const DualEncoderModel& student,
                                           const BoundPrompt* bound,
                                           const std::vector<BatchItem>& batch,
                                           const ClassSet& classes, double tau,
                                           const std::string& handcrafted_template) {
  if (classes.size() < 2) throw ContractViolation("classification needs >= 2 classes");
  if (bound && method_uses_visual_prompts(bound->method) && !student.is_vit())
    throw UnsupportedBackboneError("visual prompting needs a ViT student");
  StudentBatchForward out;

  const bool text_prompted = bound && method_uses_text_prompts(bound->method);
  const bool visual_prompted = bound && method_uses_visual_prompts(bound->method);
  const bool per_image_text = bound && bound->method == PromptMethod::cocoop;

  // class-token sequences (without contexts)
  auto class_tokens = build_handcrafted_prompts(
      student, classes, text_prompted ? std::string("{}") : handcrafted_template);

  // shared text features for every method except cocoop
  ad::Value shared_text;
  if (!per_image_text) {
    std::vector<ad::Value> rows;
    rows.reserve(class_tokens.size());
    if (text_prompted) {
      auto plan = detail::text_plan_for(t, *bound, nullptr);
      for (const auto& seq : class_tokens)
        rows.push_back(student.encode_text_ad(t, t.constant(seq.embeddings), &plan));
    } else {
      for (const auto& seq : class_tokens)
        rows.push_back(student.encode_text_ad(t, t.constant(seq.embeddings)));
    }
    shared_text = ad::concat_rows(t, rows);
    out.text_features = shared_text;
  }

  VisualInjectionAD visual_plan;
  if (visual_prompted) visual_plan = detail::visual_plan_for(t, *bound);

  for (const auto& item : batch) {
    ad::Value img = student.encode_image_ad(t, item.input, visual_prompted ? &visual_plan : nullptr);
    out.image_rows.push_back(img);

    ad::Value text = shared_text;
    if (per_image_text) {
      // conditional contexts: every context shifted by pi(image)
      Vector frozen_img = student.encode_image(item.input);
      auto pi = detail::meta_net_ad(t, *bound, frozen_img);
      auto plan = detail::text_plan_for(t, *bound, &pi);
      std::vector<ad::Value> rows;
      rows.reserve(class_tokens.size());
      for (const auto& seq : class_tokens)
        rows.push_back(student.encode_text_ad(t, t.constant(seq.embeddings), &plan));
      text = ad::concat_rows(t, rows);
    }

    auto cosines = ad::matmul_nt(t, ad::normalize_rows(t, img), ad::normalize_rows(t, text));
    auto probs = ad::row_softmax(t, ad::scale(t, cosines, 1.0 / tau));
    out.prob_rows.push_back(probs);
  }
  return out;
}

/// Plain (value-level) student predictions; gradient-bearing w.r.t. gamma
/// when the caller keeps the tape, but used here purely for its values.
inline std::vector<ProbabilityDistribution> student_predict(const DualEncoderModel& student,
                                                            PromptParameters* gamma,
                                                            const std::vector<BatchItem>& batch,
                                                            const ClassSet& classes, double tau,
                                                            const std::string& handcrafted_template =
                                                                "a photo of a {}") {
  ad::Tape t;
  StudentBatchForward fwd;
  if (gamma) {
    BoundPrompt bound = bind_prompt(t, *gamma);
    fwd = student_forward(t, student, &bound, batch, classes, tau, handcrafted_template);
  } else {
    fwd = student_forward(t, student, nullptr, batch, classes, tau, handcrafted_template);
  }
  Digest digest = classes.digest();
  std::vector<ProbabilityDistribution> out;
  out.reserve(batch.size());
  for (const auto& row : fwd.prob_rows) {
    ProbabilityDistribution d;
    d.probs = row->value.row(0).transpose();
    d.class_set_digest = digest;
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace kdpl
