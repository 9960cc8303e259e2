// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "kdpl/rng.hpp"
#include "kdpl/teacher.hpp"
#include "kdpl/vocab.hpp"
#include "kdpl/zero_shot.hpp"

namespace kdpl {

/// Top-K selection over the batch-mean teacher probabilities.
struct SelectionResult {
  std::vector<int> indices;  // strictly increasing vocabulary indices
  std::vector<std::string> names;
  Vector mean_probs;  // selected entries of the batch mean (empty for POMP*)
};

/// Teacher probability matrix over the whole vocabulary, one row per image.
/// No gradient state is allocated anywhere on this path.
inline Matrix stack_teacher_probs(TeacherContext& teacher, const std::vector<BatchItem>& batch,
                                  const ClassVocabulary& vocab) {
  if (batch.empty()) throw ContractViolation("empty batch");
  if (vocab.size() == 0) throw ContractViolation("empty vocabulary");
  ClassSet vocab_set(vocab.names);
  const auto& text_feats = teacher.text_features(vocab_set);
  Matrix text(vocab.size(), text_feats.front().size());
  for (int i = 0; i < vocab.size(); ++i) text.row(i) = text_feats[static_cast<std::size_t>(i)].normalized().transpose();
  Matrix probs(static_cast<Eigen::Index>(batch.size()), vocab.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Vector& img = teacher.image_features(batch[n]);
    Vector cosines = text * img.normalized();
    probs.row(static_cast<Eigen::Index>(n)) = softmax_over_cosines(cosines, teacher.tau()).transpose();
  }
  return probs;
}

/// Column-wise arithmetic mean of the stacked probabilities.
inline Vector mean_over_batch(const Matrix& stacked) {
  if (stacked.rows() < 1) throw ContractViolation("empty probability stack");
  return stacked.colwise().mean().transpose();
}

/// The min(K, C) largest entries; ties broken by ascending vocabulary index.
/// Returned indices are sorted ascending.
inline SelectionResult select_topk(const Vector& mean_probs, const ClassVocabulary& vocab, int k) {
  if (k < 1) throw ContractViolation("top-k needs k >= 1");
  const int c = static_cast<int>(mean_probs.size());
  if (c != vocab.size()) throw ContractViolation("mean_probs length != vocabulary size");
  int take = std::min(k, c);
  std::vector<int> order(static_cast<std::size_t>(c));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + take, order.end(), [&](int a, int b) {
    if (mean_probs(a) != mean_probs(b)) return mean_probs(a) > mean_probs(b);
    return a < b;
  });
  SelectionResult r;
  r.indices.assign(order.begin(), order.begin() + take);
  std::sort(r.indices.begin(), r.indices.end());
  r.names.reserve(r.indices.size());
  r.mean_probs.resize(take);
  for (int i = 0; i < take; ++i) {
    r.names.push_back(vocab.names[static_cast<std::size_t>(r.indices[static_cast<std::size_t>(i)])]);
    r.mean_probs(i) = mean_probs(r.indices[static_cast<std::size_t>(i)]);
  }
  return r;
}

/// Supervised POMP*-style selection: the batch's true class indices,
/// supplemented with uniformly sampled distinct others up to K.
inline SelectionResult pomp_star_select(const std::vector<int>& batch_labels,
                                        const ClassVocabulary& vocab, int k, std::uint64_t seed) {
  if (batch_labels.empty()) throw ContractViolation("pomp* needs ground-truth labels");
  if (k < 1) throw ContractViolation("top-k needs k >= 1");
  const int c = vocab.size();
  int take = std::min(k, c);
  std::vector<int> truths;
  std::unordered_set<int> seen;
  for (int l : batch_labels) {
    if (l < 0 || l >= c) throw ContractViolation("label index outside vocabulary");
    if (seen.insert(l).second) truths.push_back(l);
  }
  std::sort(truths.begin(), truths.end());
  if (static_cast<int>(truths.size()) > take) truths.resize(static_cast<std::size_t>(take));
  SplitMix64 rng(derive_seed(seed, 0x90b9));
  std::unordered_set<int> chosen(truths.begin(), truths.end());
  while (static_cast<int>(chosen.size()) < take) {
    int cand = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(c)));
    chosen.insert(cand);
  }
  SelectionResult r;
  r.indices.assign(chosen.begin(), chosen.end());
  std::sort(r.indices.begin(), r.indices.end());
  r.names.reserve(r.indices.size());
  for (int idx : r.indices) r.names.push_back(vocab.names[static_cast<std::size_t>(idx)]);
  return r;
}

/// Teacher distributions restricted to the selected names: a fresh softmax
/// over the selected cosines (identical to renormalizing the full softmax).
inline std::vector<ProbabilityDistribution> teacher_probs_restricted(
    TeacherContext& teacher, const std::vector<BatchItem>& batch, const ClassVocabulary& vocab,
    const SelectionResult& selection) {
  ClassSet vocab_set(vocab.names);
  const auto& text_feats = teacher.text_features(vocab_set);
  ClassSet selected(selection.names);
  Digest digest = selected.digest();
  std::vector<ProbabilityDistribution> out;
  out.reserve(batch.size());
  for (const auto& item : batch) {
    const Vector& img = teacher.image_features(item);
    Vector img_n = img.normalized();
    Vector cosines(static_cast<Eigen::Index>(selection.indices.size()));
    for (std::size_t i = 0; i < selection.indices.size(); ++i)
      cosines(static_cast<Eigen::Index>(i)) =
          text_feats[static_cast<std::size_t>(selection.indices[i])].normalized().dot(img_n);
    ProbabilityDistribution d;
    d.probs = softmax_over_cosines(cosines, teacher.tau());
    d.class_set_digest = digest;
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace kdpl
