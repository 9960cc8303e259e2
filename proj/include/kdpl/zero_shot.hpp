// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>
#include <vector>

#include "kdpl/digest.hpp"
#include "kdpl/encoder.hpp"
#include "kdpl/errors.hpp"

namespace kdpl {

/// Ordered set of unique class names.
struct ClassSet {
  std::vector<std::string> names;

  explicit ClassSet(std::vector<std::string> n = {}) : names(std::move(n)) {
    std::unordered_set<std::string> seen;
    for (const auto& s : names)
      if (!seen.insert(s).second) throw ContractViolation("duplicate class name: " + s);
  }

  int size() const { return static_cast<int>(names.size()); }
  Digest digest() const { return digest_of_names(names); }
};

/// Normalized class probabilities over one ordered class set.
struct ProbabilityDistribution {
  Vector probs;
  Digest class_set_digest{};

  int size() const { return static_cast<int>(probs.size()); }
};

inline void require_same_class_set(const ProbabilityDistribution& a,
                                   const ProbabilityDistribution& b) {
  if (a.class_set_digest != b.class_set_digest || a.probs.size() != b.probs.size())
    throw ContractViolation("distributions are over different class sets");
}

/// Fills the single `{}` placeholder of `template_text` with each class name.
inline std::vector<std::string> expand_template(const std::string& template_text,
                                                const ClassSet& classes) {
  auto pos = template_text.find("{}");
  if (pos == std::string::npos)
    throw ConfigError("prompt template must contain a {} placeholder");
  if (template_text.find("{}", pos + 2) != std::string::npos)
    throw ConfigError("prompt template must contain exactly one {} placeholder");
  std::vector<std::string> out;
  out.reserve(classes.names.size());
  for (const auto& name : classes.names) {
    std::string s = template_text;
    s.replace(pos, 2, name);
    out.push_back(std::move(s));
  }
  return out;
}

/// One token sequence per class, in class-set order.
inline std::vector<TokenSequence> build_handcrafted_prompts(const DualEncoderModel& model,
                                                            const ClassSet& classes,
                                                            const std::string& template_text) {
  Tokenizer tok(model.config.vocab_size);
  std::vector<TokenSequence> out;
  for (const auto& prompt : expand_template(template_text, classes)) {
    auto ids = tok.encode(prompt);
    if (ids.empty()) throw ConfigError("prompt tokenizes to nothing: " + prompt);
    out.push_back(TokenSequence{model.embedder.embed(ids)});
  }
  return out;
}

inline double cosine(const Vector& a, const Vector& b) {
  double na = a.norm(), nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0) || !std::isfinite(na) || !std::isfinite(nb))
    throw DegenerateInputError("zero-norm embedding in cosine");
  return a.dot(b) / (na * nb);
}

/// Softmax over cosines/tau with max subtraction. exp is evaluated with the
/// scalar libm function (vectorized exp differs between SIMD lanes and the
/// scalar tail) and the denominator sums in ascending value order, so the
/// result is exactly invariant under permutations of the text-embedding list.
inline Vector softmax_over_cosines(const Vector& cosines, double temperature) {
  if (temperature <= 0.0) throw ContractViolation("temperature must be positive");
  const Eigen::Index c = cosines.size();
  const double mx = cosines.maxCoeff();
  Vector e(c);
  for (Eigen::Index i = 0; i < c; ++i) e(i) = std::exp((cosines(i) - mx) / temperature);
  std::vector<double> sorted(e.data(), e.data() + c);
  std::sort(sorted.begin(), sorted.end());
  double denom = 0.0;
  for (double v : sorted) denom += v;
  return e / denom;
}

/// Eq-1 style zero-shot head: p_i = exp(cos(t_i, img)/tau) / sum_j ...
inline ProbabilityDistribution compute_class_probabilities(const Vector& image_emb,
                                                           const std::vector<Vector>& text_embs,
                                                           double temperature,
                                                           const Digest& class_set_digest) {
  if (text_embs.size() < 2)
    throw ContractViolation("classification needs at least 2 text embeddings");
  Vector cosines(static_cast<Eigen::Index>(text_embs.size()));
  for (std::size_t i = 0; i < text_embs.size(); ++i)
    cosines(static_cast<Eigen::Index>(i)) = cosine(text_embs[i], image_emb);
  ProbabilityDistribution d;
  d.probs = softmax_over_cosines(cosines, temperature);
  d.class_set_digest = class_set_digest;
  return d;
}

inline ProbabilityDistribution compute_class_probabilities(const Vector& image_emb,
                                                           const std::vector<Vector>& text_embs,
                                                           double temperature,
                                                           const ClassSet& classes) {
  if (static_cast<int>(text_embs.size()) != classes.size())
    throw ContractViolation("text embedding count != class count");
  return compute_class_probabilities(image_emb, text_embs, temperature, classes.digest());
}

}  // namespace kdpl
