// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kdpl/distill.hpp"
#include "kdpl/prompts.hpp"

namespace kdpl {

/// Fixed bank of generic templates used for the frozen-feature average.
inline const std::vector<std::string>& promptsrc_template_bank() {
  static const std::vector<std::string> bank = {
      "a photo of a {}",        "a photo of the {}",       "a picture of a {}",
      "an image of a {}",       "a close-up photo of a {}", "a bright photo of a {}",
      "a cropped photo of a {}"};
  return bank;
}

struct PromptSrcWeights {
  double text = 1.0;
  double image = 1.0;
  double kl = 1.0;
};

/// Normalized Gaussian epoch weights: w_e proportional to
/// exp(-(e - mean)^2 / (2 sigma^2)), e = 0..epochs-1.
inline std::vector<double> gaussian_epoch_weights(int epochs, double mean, double sigma) {
  if (epochs < 1) throw ContractViolation("need at least one epoch weight");
  if (!(sigma > 0.0)) throw ContractViolation("sigma must be positive");
  std::vector<double> w(static_cast<std::size_t>(epochs));
  double sum = 0.0;
  for (int e = 0; e < epochs; ++e) {
    double z = (static_cast<double>(e) - mean) / sigma;
    w[static_cast<std::size_t>(e)] = std::exp(-0.5 * z * z);
    sum += w[static_cast<std::size_t>(e)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

/// Gaussian-weighted average of per-epoch prompt snapshots.
inline PromptParameters gaussian_aggregate(const std::vector<PromptParameters>& snapshots,
                                           double mean, double sigma) {
  if (snapshots.empty()) throw ContractViolation("empty snapshot store");
  auto weights = gaussian_epoch_weights(static_cast<int>(snapshots.size()), mean, sigma);
  PromptParameters out = snapshots.front();
  auto out_params = out.named_params();
  for (auto& [name, m] : out_params) m->setZero();
  for (std::size_t e = 0; e < snapshots.size(); ++e) {
    auto snap_params = snapshots[e].named_params();
    if (snap_params.size() != out_params.size())
      throw ContractViolation("snapshot structure mismatch");
    for (std::size_t i = 0; i < out_params.size(); ++i)
      *out_params[i].second += weights[e] * (*snap_params[i].second);
  }
  return out;
}

/// Self-regularization term: weighted sum of the mean |gap| between prompted
/// and frozen text features, the same for image features, and
/// KL(frozen || prompted). Zero when prompted == frozen.
inline double promptsrc_regularizer(const Vector& prompted_img_emb, const Matrix& prompted_txt_emb,
                                    const Vector& frozen_img_emb, const Matrix& frozen_txt_emb,
                                    const ProbabilityDistribution& prompted_probs,
                                    const ProbabilityDistribution& frozen_probs,
                                    const PromptSrcWeights& weights, double eps = 1e-12) {
  if (prompted_txt_emb.rows() != frozen_txt_emb.rows() ||
      prompted_txt_emb.cols() != frozen_txt_emb.cols())
    throw ContractViolation("text feature shape mismatch");
  if (prompted_img_emb.size() != frozen_img_emb.size())
    throw ContractViolation("image feature shape mismatch");
  require_same_class_set(prompted_probs, frozen_probs);
  double text_gap = (prompted_txt_emb - frozen_txt_emb).cwiseAbs().mean();
  double image_gap = (prompted_img_emb - frozen_img_emb).cwiseAbs().mean();
  double kl = kl_divergence(frozen_probs, prompted_probs, eps);
  return weights.text * text_gap + weights.image * image_gap + weights.kl * kl;
}

}  // namespace kdpl
