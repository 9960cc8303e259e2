// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "kdpl/class_select.hpp"
#include "kdpl/distill.hpp"
#include "kdpl/promptsrc.hpp"
#include "kdpl/student.hpp"
#include "kdpl/teacher.hpp"

namespace kdpl {

enum class TrainVariant { plain, kdpl, ca_kdpl, upl_star, pomp_star };

inline std::string variant_name(TrainVariant v) {
  switch (v) {
    case TrainVariant::plain: return "plain";
    case TrainVariant::kdpl: return "kdpl";
    case TrainVariant::ca_kdpl: return "ca_kdpl";
    case TrainVariant::upl_star: return "upl_star";
    case TrainVariant::pomp_star: return "pomp_star";
  }
  throw ContractViolation("unknown variant");
}

inline TrainVariant variant_from_name(const std::string& s) {
  if (s == "plain") return TrainVariant::plain;
  if (s == "kdpl") return TrainVariant::kdpl;
  if (s == "ca_kdpl") return TrainVariant::ca_kdpl;
  if (s == "upl_star") return TrainVariant::upl_star;
  if (s == "pomp_star") return TrainVariant::pomp_star;
  throw ConfigError("unknown variant: " + s);
}

struct TrainRunConfig {
  PromptMethod method = PromptMethod::coop;
  TrainVariant variant = TrainVariant::kdpl;
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 0.02;
  double warmup_lr = 1e-5;
  int warmup_epochs = 1;
  std::uint64_t seed = 1;
  DistillationConfig distill;
  int top_k = 1000;
  PromptSrcWeights src_weights;
  double src_gaussian_mean = 15.0;
  double src_gaussian_sigma = 5.0;
  std::string student_template = "a photo of a {}";

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs + 1)
      throw ConfigError("warmup_epochs out of range");
    distill.validate();
  }
};

/// One warm-up epoch at a constant floor, then per-epoch cosine decay.
inline double lr_for_epoch(const TrainRunConfig& cfg, int epoch) {
  if (epoch < cfg.warmup_epochs) return cfg.warmup_lr;
  int e = epoch - cfg.warmup_epochs;
  int n = cfg.epochs - cfg.warmup_epochs;
  if (n <= 0) return cfg.warmup_lr;
  return 0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * static_cast<double>(e) /
                                                   static_cast<double>(n)));
}

struct LabeledItem {
  BatchItem item;
  int label = -1;
};

namespace detail {

inline void sgd_update(const BoundPrompt& bound, double lr) {
  for (const auto& [target, leaf] : bound.bindings)
    if (leaf->grad.size() != 0) *target -= lr * leaf->grad;
}

inline void check_finite_loss(double loss, const std::vector<BatchItem>& batch,
                              const PromptParameters& gamma) {
  if (std::isfinite(loss)) return;
  double norm = 0.0;
  for (const auto& [name, m] : gamma.named_params()) norm += m->squaredNorm();
  std::string ids;
  for (const auto& it : batch) ids += it.id + " ";
  throw std::runtime_error("non-finite loss; batch ids: " + ids +
                           "; gamma norm: " + std::to_string(std::sqrt(norm)));
}

/// Frozen-model reference features used by the PromptSRC regularizer.
struct PromptSrcFrozenRef {
  Matrix text_avg;  // C x d, averaged over the template bank
  std::map<std::string, Vector> image_memo;
  std::map<std::string, Vector> probs_memo;

  static PromptSrcFrozenRef build(const DualEncoderModel& student, const ClassSet& classes) {
    PromptSrcFrozenRef ref;
    const auto& bank = promptsrc_template_bank();
    for (const auto& tmpl : bank) {
      Matrix feats(classes.size(), student.config.shared_dim);
      auto prompts = build_handcrafted_prompts(student, classes, tmpl);
      for (int i = 0; i < classes.size(); ++i)
        feats.row(i) = student.encode_text(prompts[static_cast<std::size_t>(i)]).transpose();
      if (ref.text_avg.size() == 0)
        ref.text_avg = feats;
      else
        ref.text_avg += feats;
    }
    ref.text_avg /= static_cast<double>(bank.size());
    return ref;
  }

  const Vector& image(const DualEncoderModel& student, const BatchItem& item) {
    auto it = image_memo.find(item.id);
    if (it != image_memo.end()) return it->second;
    return image_memo.emplace(item.id, student.encode_image(item.input)).first->second;
  }

  const Vector& probs(const DualEncoderModel& student, const BatchItem& item, double tau) {
    auto it = probs_memo.find(item.id);
    if (it != probs_memo.end()) return it->second;
    const Vector& img = image(student, item);
    Vector img_n = img.normalized();
    Vector cs(text_avg.rows());
    for (Eigen::Index i = 0; i < text_avg.rows(); ++i) {
      double n = text_avg.row(i).norm();
      if (!(n > 0.0)) throw DegenerateInputError("zero-norm frozen text feature");
      cs(i) = text_avg.row(i).dot(img_n) / n;
    }
    return probs_memo.emplace(item.id, softmax_over_cosines(cs, tau)).first->second;
  }
};

inline ad::Value promptsrc_regularizer_ad(ad::Tape& t, const StudentBatchForward& fwd,
                                          const DualEncoderModel& student,
                                          const std::vector<BatchItem>& batch,
                                          PromptSrcFrozenRef& frozen, double tau,
                                          const PromptSrcWeights& w, double eps) {
  auto text_term =
      ad::mean_all(t, ad::abs_op(t, ad::sub(t, fwd.text_features, t.constant(frozen.text_avg))));
  ad::Value img_sum, kl_sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto img_gap = ad::mean_all(
        t, ad::abs_op(t, ad::sub(t, fwd.image_rows[i],
                                 t.constant(frozen.image(student, batch[i]).transpose()))));
    auto frozen_probs = t.constant(frozen.probs(student, batch[i], tau).transpose());
    auto kl = ad::kl_divergence(t, frozen_probs, fwd.prob_rows[i], eps);
    img_sum = img_sum ? ad::add(t, img_sum, img_gap) : img_gap;
    kl_sum = kl_sum ? ad::add(t, kl_sum, kl) : kl;
  }
  double inv_n = 1.0 / static_cast<double>(batch.size());
  auto reg = ad::scale(t, text_term, w.text);
  reg = ad::add(t, reg, ad::scale(t, img_sum, w.image * inv_n));
  return ad::add(t, reg, ad::scale(t, kl_sum, w.kl * inv_n));
}

}  // namespace detail

/// One label-agnostic distillation step: teacher targets from the cache-backed
/// frozen pass, student forward on a fresh tape, mean KDPL loss, SGD on gamma.
inline double kdpl_train_step(const DualEncoderModel& student, TeacherContext& teacher,
                              PromptParameters& gamma, const std::vector<BatchItem>& batch,
                              const ClassSet& classes, const TrainRunConfig& cfg, double lr,
                              detail::PromptSrcFrozenRef* frozen_ref = nullptr) {
  auto teacher_probs = teacher_predict(teacher, batch, classes);
  ad::Tape t;
  BoundPrompt bound = bind_prompt(t, gamma);
  auto fwd = student_forward(t, student, &bound, batch, classes, cfg.distill.tau_student,
                             cfg.student_template);
  ad::Value loss_sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto p_t = t.constant(teacher_probs[i].probs.transpose());
    auto item_loss = ad::kdpl_loss(t, p_t, fwd.prob_rows[i], cfg.distill.kl_mode,
                                   cfg.distill.eps_floor);
    loss_sum = loss_sum ? ad::add(t, loss_sum, item_loss) : item_loss;
  }
  auto loss = ad::scale(t, loss_sum, 1.0 / static_cast<double>(batch.size()));
  if (gamma.method == PromptMethod::promptsrc && frozen_ref) {
    loss = ad::add(t, loss,
                   detail::promptsrc_regularizer_ad(t, fwd, student, batch, *frozen_ref,
                                                    cfg.distill.tau_student, cfg.src_weights,
                                                    cfg.distill.eps_floor));
  }
  double loss_val = loss->value(0, 0);
  detail::check_finite_loss(loss_val, batch, gamma);
  t.backward(loss);
  detail::sgd_update(bound, lr);
  return loss_val;
}

/// Cross-entropy step shared by the supervised baseline (true labels), the
/// UPL* baseline (teacher pseudo-labels), and POMP* (restricted class set).
inline double cross_entropy_train_step(const DualEncoderModel& student, PromptParameters& gamma,
                                       const std::vector<BatchItem>& batch,
                                       const std::vector<int>& labels, const ClassSet& classes,
                                       const TrainRunConfig& cfg, double lr,
                                       detail::PromptSrcFrozenRef* frozen_ref = nullptr) {
  ad::Tape t;
  BoundPrompt bound = bind_prompt(t, gamma);
  auto fwd = student_forward(t, student, &bound, batch, classes, cfg.distill.tau_student,
                             cfg.student_template);
  ad::Value loss_sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto item_loss = ad::nll_loss(t, fwd.prob_rows[i], labels[i], cfg.distill.eps_floor);
    loss_sum = loss_sum ? ad::add(t, loss_sum, item_loss) : item_loss;
  }
  auto loss = ad::scale(t, loss_sum, 1.0 / static_cast<double>(batch.size()));
  if (gamma.method == PromptMethod::promptsrc && frozen_ref) {
    loss = ad::add(t, loss,
                   detail::promptsrc_regularizer_ad(t, fwd, student, batch, *frozen_ref,
                                                    cfg.distill.tau_student, cfg.src_weights,
                                                    cfg.distill.eps_floor));
  }
  double loss_val = loss->value(0, 0);
  detail::check_finite_loss(loss_val, batch, gamma);
  t.backward(loss);
  detail::sgd_update(bound, lr);
  return loss_val;
}

/// Class-agnostic step: the teacher picks the batch's class names from the
/// vocabulary, both sides are renormalized over the selected set, then a
/// standard distillation step runs. Labels are never read.
inline std::pair<double, SelectionResult> ca_train_step(
    const DualEncoderModel& student, TeacherContext& teacher, PromptParameters& gamma,
    const std::vector<BatchItem>& batch, const ClassVocabulary& vocab, int k,
    const TrainRunConfig& cfg, double lr) {
  if (k > vocab.size()) {
    std::fprintf(stderr, "[kdpl] warning: K=%d exceeds vocabulary size %d; clamping\n", k,
                 vocab.size());
    k = vocab.size();
  }
  Matrix stacked = stack_teacher_probs(teacher, batch, vocab);
  Vector mean = mean_over_batch(stacked);
  SelectionResult selection = select_topk(mean, vocab, k);
  auto teacher_probs = teacher_probs_restricted(teacher, batch, vocab, selection);

  ClassSet selected(selection.names);
  ad::Tape t;
  BoundPrompt bound = bind_prompt(t, gamma);
  auto fwd = student_forward(t, student, &bound, batch, selected, cfg.distill.tau_student,
                             cfg.student_template);
  ad::Value loss_sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto p_t = t.constant(teacher_probs[i].probs.transpose());
    auto item_loss = ad::kdpl_loss(t, p_t, fwd.prob_rows[i], cfg.distill.kl_mode,
                                   cfg.distill.eps_floor);
    loss_sum = loss_sum ? ad::add(t, loss_sum, item_loss) : item_loss;
  }
  auto loss = ad::scale(t, loss_sum, 1.0 / static_cast<double>(batch.size()));
  if (gamma.method == PromptMethod::promptsrc) {
    // the selected class set changes per batch, so the frozen reference is
    // rebuilt against it (image features stay memoized upstream)
    auto frozen = detail::PromptSrcFrozenRef::build(student, selected);
    loss = ad::add(t, loss,
                   detail::promptsrc_regularizer_ad(t, fwd, student, batch, frozen,
                                                    cfg.distill.tau_student, cfg.src_weights,
                                                    cfg.distill.eps_floor));
  }
  double loss_val = loss->value(0, 0);
  detail::check_finite_loss(loss_val, batch, gamma);
  t.backward(loss);
  detail::sgd_update(bound, lr);
  return {loss_val, std::move(selection)};
}

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  PromptParameters gamma;
  std::vector<EpochStats> epoch_stats;
};

/// Full prompt-only training loop. The episode is taken as given: KDPL and
/// CA-KDPL never read the label fields. `vocab` is required for the
/// class-agnostic and POMP* variants.
inline TrainResult train_prompts(const DualEncoderModel& student, TeacherContext& teacher,
                                 const std::vector<LabeledItem>& episode, const ClassSet& classes,
                                 const ClassVocabulary* vocab, const TrainRunConfig& cfg,
                                 PromptParameters gamma) {
  cfg.validate();
  if ((cfg.variant == TrainVariant::ca_kdpl || cfg.variant == TrainVariant::pomp_star) && !vocab)
    throw ConfigError(variant_name(cfg.variant) + " requires a vocabulary");
  if (episode.empty()) throw ContractViolation("empty training episode");

  // POMP* maps dataset labels into vocabulary indices once.
  std::vector<int> vocab_label_of;
  if (cfg.variant == TrainVariant::pomp_star) {
    vocab_label_of.resize(static_cast<std::size_t>(classes.size()));
    for (int i = 0; i < classes.size(); ++i) {
      int idx = vocab->index_of(classes.names[static_cast<std::size_t>(i)]);
      if (idx < 0)
        throw ConfigError("class name missing from vocabulary: " +
                          classes.names[static_cast<std::size_t>(i)]);
      vocab_label_of[static_cast<std::size_t>(i)] = idx;
    }
  }

  // UPL* pseudo-labels are computed once per episode and stay frozen.
  std::vector<int> pseudo_labels;
  if (cfg.variant == TrainVariant::upl_star) {
    std::vector<BatchItem> items;
    for (const auto& li : episode) items.push_back(li.item);
    pseudo_labels = teacher_pseudo_labels(teacher, items, classes);
  }

  std::optional<detail::PromptSrcFrozenRef> frozen_ref;
  if (cfg.method == PromptMethod::promptsrc)
    frozen_ref.emplace(detail::PromptSrcFrozenRef::build(student, classes));

  std::vector<PromptParameters> snapshots;
  TrainResult result;
  const std::size_t n = episode.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_for_epoch(cfg, epoch);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 shuffler(derive_seed(cfg.seed, 0xba7c4, static_cast<std::uint64_t>(epoch)));
    shuffler.shuffle(order);

    double loss_acc = 0.0;
    std::size_t seen = 0;
    for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t take = std::min(static_cast<std::size_t>(cfg.batch_size), n - at);
      std::vector<BatchItem> batch;
      std::vector<int> labels;
      batch.reserve(take);
      for (std::size_t i = 0; i < take; ++i) {
        batch.push_back(episode[order[at + i]].item);
        labels.push_back(episode[order[at + i]].label);
      }
      double loss = 0.0;
      switch (cfg.variant) {
        case TrainVariant::kdpl:
          loss = kdpl_train_step(student, teacher, gamma, batch, classes, cfg, lr,
                                 frozen_ref ? &*frozen_ref : nullptr);
          break;
        case TrainVariant::ca_kdpl:
          loss = ca_train_step(student, teacher, gamma, batch, *vocab, cfg.top_k, cfg, lr).first;
          break;
        case TrainVariant::plain:
          loss = cross_entropy_train_step(student, gamma, batch, labels, classes, cfg, lr,
                                          frozen_ref ? &*frozen_ref : nullptr);
          break;
        case TrainVariant::upl_star: {
          std::vector<int> pl;
          for (std::size_t i = 0; i < take; ++i)
            pl.push_back(pseudo_labels[order[at + i]]);
          loss = cross_entropy_train_step(student, gamma, batch, pl, classes, cfg, lr,
                                          frozen_ref ? &*frozen_ref : nullptr);
          break;
        }
        case TrainVariant::pomp_star: {
          auto selection = pomp_star_select(
              [&] {
                std::vector<int> vl;
                for (int l : labels) {
                  if (l < 0 || l >= classes.size())
                    throw ContractViolation("pomp* needs valid ground-truth labels");
                  vl.push_back(vocab_label_of[static_cast<std::size_t>(l)]);
                }
                return vl;
              }(),
              *vocab, cfg.top_k,
              derive_seed(cfg.seed, 0x90b9, static_cast<std::uint64_t>(epoch * 1000003 +
                                                                       static_cast<int>(at))));
          ClassSet selected(selection.names);
          std::vector<int> positions;
          for (int l : labels) {
            int vl = vocab_label_of[static_cast<std::size_t>(l)];
            auto it = std::lower_bound(selection.indices.begin(), selection.indices.end(), vl);
            positions.push_back(static_cast<int>(it - selection.indices.begin()));
          }
          loss = cross_entropy_train_step(student, gamma, batch, positions, selected, cfg, lr);
          break;
        }
      }
      loss_acc += loss * static_cast<double>(take);
      seen += take;
    }
    result.epoch_stats.push_back({epoch, loss_acc / static_cast<double>(seen), lr});
    if (cfg.method == PromptMethod::promptsrc) snapshots.push_back(gamma);
  }

  if (cfg.method == PromptMethod::promptsrc && !snapshots.empty())
    gamma = gaussian_aggregate(snapshots, cfg.src_gaussian_mean, cfg.src_gaussian_sigma);

  result.gamma = std::move(gamma);
  return result;
}

}  // namespace kdpl
