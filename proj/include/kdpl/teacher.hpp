// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kdpl/encoder.hpp"
#include "kdpl/teacher_cache.hpp"
#include "kdpl/zero_shot.hpp"

namespace kdpl {

/// One dataset item as seen by teacher/student inference: a stable id plus
/// the model input it resolves to.
struct BatchItem {
  std::string id;
  ImageInput input;
};

/// Frozen-teacher inference context. Text features per class set are
/// memoized (they are prompt-free and image-independent); full distributions
/// go through the persistent cache when one is attached.
class TeacherContext {
public:
  TeacherContext(const DualEncoderModel& teacher, std::string template_text = "a photo of {}",
                 double tau = 0.01, TeacherPredictionCache* cache = nullptr)
      : teacher_(&teacher), template_text_(std::move(template_text)), tau_(tau), cache_(cache) {
    if (!teacher.frozen) throw ContractViolation("teacher must be frozen");
  }

  const DualEncoderModel& model() const { return *teacher_; }
  double tau() const { return tau_; }
  const std::string& template_text() const { return template_text_; }
  TeacherPredictionCache* cache() const { return cache_; }

  /// Handcrafted-template text features for `classes`, memoized by digest.
  const std::vector<Vector>& text_features(const ClassSet& classes) {
    Digest d = classes.digest();
    auto it = text_memo_.find(d);
    if (it != text_memo_.end()) return it->second;
    std::vector<Vector> feats;
    for (const auto& seq : build_handcrafted_prompts(*teacher_, classes, template_text_))
      feats.push_back(teacher_->encode_text(seq));
    return text_memo_.emplace(d, std::move(feats)).first->second;
  }

  /// Teacher image embedding, memoized by image id (used by the per-batch
  /// class-selection path, which bypasses the distribution cache).
  const Vector& image_features(const BatchItem& item) {
    auto it = image_memo_.find(item.id);
    if (it != image_memo_.end()) return it->second;
    return image_memo_.emplace(item.id, teacher_->encode_image(item.input)).first->second;
  }

  void clear_memos() {
    text_memo_.clear();
    image_memo_.clear();
  }

private:
  const DualEncoderModel* teacher_;
  std::string template_text_;
  double tau_;
  TeacherPredictionCache* cache_;
  std::map<Digest, std::vector<Vector>> text_memo_;
  std::map<std::string, Vector> image_memo_;
};

/// Zero-shot teacher distributions for a batch. Cache hits return
/// value-identical probabilities to a fresh pass; corrupted entries fall
/// back to recomputation and are overwritten.
inline std::vector<ProbabilityDistribution> teacher_predict(TeacherContext& ctx,
                                                            const std::vector<BatchItem>& batch,
                                                            const ClassSet& classes) {
  Digest digest = classes.digest();
  std::vector<ProbabilityDistribution> out;
  out.reserve(batch.size());
  const std::vector<Vector>* text_feats = nullptr;  // computed lazily on first miss
  for (const auto& item : batch) {
    if (ctx.cache()) {
      auto hit = ctx.cache()->lookup(item.id, digest);
      if (hit && hit->size() == classes.size()) {
        ProbabilityDistribution d;
        d.probs = *hit;
        d.class_set_digest = digest;
        out.push_back(std::move(d));
        continue;
      }
      // a wrong-sized hit under an identical digest is a corrupt record;
      // fall through to recompute and overwrite it
    }
    if (!text_feats) text_feats = &ctx.text_features(classes);
    Vector img = ctx.model().encode_image(item.input);
    auto dist = compute_class_probabilities(img, *text_feats, ctx.tau(), digest);
    if (ctx.cache()) ctx.cache()->store(item.id, digest, dist.probs);
    out.push_back(std::move(dist));
  }
  return out;
}

/// Teacher argmax labels, computed once per episode for the UPL* baseline.
inline std::vector<int> teacher_pseudo_labels(TeacherContext& ctx,
                                              const std::vector<BatchItem>& items,
                                              const ClassSet& classes) {
  std::vector<int> labels;
  labels.reserve(items.size());
  for (const auto& dist : teacher_predict(ctx, items, classes)) {
    Eigen::Index best = 0;
    dist.probs.maxCoeff(&best);
    labels.push_back(static_cast<int>(best));
  }
  return labels;
}

}  // namespace kdpl
