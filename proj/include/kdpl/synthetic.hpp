// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/QR>
#include <Eigen/SVD>

#include <set>
#include <string>
#include <vector>

#include "kdpl/dataset.hpp"
#include "kdpl/encoder.hpp"
#include "kdpl/metrics.hpp"
#include "kdpl/rng.hpp"
#include "kdpl/vocab.hpp"

namespace kdpl {

/// Desk-scale stand-in for web-scale data: class structure is planted by
/// construction so teacher quality is controllable and verifiable.
struct SyntheticVLConfig {
  int num_classes = 20;
  int samples_per_class = 32;  // train split
  int val_per_class = 8;
  int test_per_class = 20;
  int embedding_dim = 64;
  double prototype_margin = 0.1;  // pairwise prototype cosine <= 1 - margin
  double noise_scale = 0.05;      // per-dim gaussian noise on image features
  double teacher_accuracy_floor = 0.95;
  double teacher_spillover = 0.5;  // hub weight giving absent true classes
                                   // systematically more teacher mass than any
                                   // planted distractor name
  // teacher/student capacity gap descriptor
  double student_image_rank_fraction = 0.75;
  double student_confusion_fraction = 0.5;
  double student_confusion_strength = 0.65;
  int distractor_names = 0;  // extra vocabulary names planted orthogonally
  std::uint64_t seed = 7;
  std::string teacher_template = "a photo of {}";
  std::string student_template = "a photo of a {}";
  int student_layers = 2;
  ImageBranch student_branch = ImageBranch::feature;
  int student_patches = 4;  // when student_branch == vit

  void validate() const {
    if (num_classes < 2) throw ConfigError("need >= 2 classes");
    if (embedding_dim < num_classes + 1)
      throw ConfigError("embedding_dim must exceed num_classes (prototype planting)");
    if (!(prototype_margin > 0.0)) throw ConfigError("margin must be positive");
    if (samples_per_class < 1 || val_per_class < 0 || test_per_class < 1)
      throw ConfigError("bad per-class sample counts");
  }
};

struct SyntheticDataset {
  DatasetBundle data;
  DualEncoderModel teacher;
  DualEncoderModel student;
  ClassVocabulary vocab;  // true names first, then distractors
  Matrix prototypes;      // num_classes x dim
  double teacher_test_accuracy = 0.0;
  double student_zero_shot_accuracy = 0.0;
};

namespace detail {

/// Unit prototypes with pairwise cosine <= 1 - margin (rejection sampling).
inline Matrix sample_prototypes(int count, int dim, double margin, SplitMix64& rng) {
  Matrix protos(count, dim);
  int accepted = 0, attempts = 0;
  const int max_attempts = 2000 * count;
  while (accepted < count) {
    if (++attempts > max_attempts)
      throw GenerationError("prototype margin unachievable at dim " + std::to_string(dim) +
                            "; increase embedding_dim or reduce the margin");
    Vector v(dim);
    for (int i = 0; i < dim; ++i) v(i) = rng.next_gaussian();
    v.normalize();
    bool ok = true;
    for (int j = 0; j < accepted && ok; ++j)
      ok = protos.row(j).dot(v) <= 1.0 - margin;
    if (ok) protos.row(accepted++) = v.transpose();
  }
  return protos;
}

/// Single-word names whose token ids collide with nothing already used.
inline std::vector<std::string> unique_names(const std::string& stem, int count,
                                             const Tokenizer& tok, std::set<int>& used_ids) {
  std::vector<std::string> names;
  int serial = 0;
  while (static_cast<int>(names.size()) < count) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s%03d", stem.c_str(), serial++);
    std::string name(buf);
    int id = tok.word_id(name);
    if (used_ids.insert(id).second) names.push_back(name);
  }
  return names;
}

/// Plants the zero-layer teacher text tower so that the template-wrapped
/// prompt of `name` encodes exactly to `target`.
inline void plant_teacher_text(DualEncoderModel& teacher, const Tokenizer& tok,
                               const std::string& template_text, const std::string& name,
                               const Vector& target) {
  auto pos = template_text.find("{}");
  std::string prefix = template_text.substr(0, pos);
  std::string suffix = template_text.substr(pos + 2);
  auto fixed_ids = tok.encode(prefix + " " + suffix);
  Vector fixed_sum = Vector::Zero(teacher.config.text_token_dim);
  for (int id : fixed_ids) fixed_sum += teacher.embedder.row(id);
  double len = static_cast<double>(fixed_ids.size() + 1);
  // zero-layer tower with identity projection: emb = mean(token rows)
  teacher.embedder.set_row(tok.word_id(name), len * target - fixed_sum);
}

}  // namespace detail

/// Generates the planted dataset plus a matched (teacher, student) pair.
///
/// Teacher: zero-layer feature-branch model. Its image map projects onto the
/// span of the prototypes plus a shared hub direction, so planted distractor
/// names (orthogonal complement) receive exactly zero cosine against every
/// image; true classes keep a small systematic spillover via the hub. Text
/// rows are planted exactly through the mean-pool inverse.
///
/// Student: `student_layers` transformer blocks, rank-reduced image map, and
/// a text projection planted toward confusion-mixed prototypes so a
/// controllable teacher -> student gap exists.
inline SyntheticDataset generate_synthetic(const SyntheticVLConfig& cfg) {
  cfg.validate();
  const int c = cfg.num_classes;
  const int d = cfg.embedding_dim;
  SplitMix64 rng(derive_seed(cfg.seed, 0x5e7));

  SyntheticDataset out;
  out.prototypes = detail::sample_prototypes(c, d, cfg.prototype_margin, rng);

  // hub direction: mean prototype, normalized
  Vector hub = out.prototypes.colwise().mean().transpose();
  if (hub.norm() < 1e-12) hub = out.prototypes.row(0).transpose();
  hub.normalize();

  // ---- names (collision-free under the toy tokenizer) ----
  EncoderConfig tcfg;
  tcfg.shared_dim = d;
  tcfg.text_token_dim = d;
  tcfg.patch_dim = d;
  tcfg.num_layers = 0;
  tcfg.num_patches = 1;
  tcfg.vocab_size = 65536;
  tcfg.max_text_len = 16;
  tcfg.image_branch = ImageBranch::feature;
  tcfg.feature_dim = d;
  Tokenizer tok(tcfg.vocab_size);
  std::set<int> used_ids;
  for (int id : tok.encode(cfg.teacher_template + " " + cfg.student_template)) used_ids.insert(id);
  auto class_names = detail::unique_names("class", c, tok, used_ids);
  auto distractors = detail::unique_names("object", cfg.distractor_names, tok, used_ids);

  // ---- teacher ----
  out.teacher = DualEncoderModel::make(tcfg, Role::teacher, derive_seed(cfg.seed, 0x7e4));
  out.teacher.backbone_id = "toy_feature_teacher_d" + std::to_string(d);
  out.teacher.text.proj = Matrix::Identity(d, d);

  // image map: orthogonal projector onto span(prototypes, hub)
  Matrix span(c + 1, d);
  span.topRows(c) = out.prototypes;
  span.bottomRows(1) = hub.transpose();
  Eigen::HouseholderQR<Matrix> qr(span.transpose());
  Matrix qfull = qr.householderQ() * Matrix::Identity(d, c + 1);
  out.teacher.feature_proj = qfull * qfull.transpose();  // d x d projector

  // planted text targets: prototype + spillover * hub
  Matrix teacher_targets(c, d);
  for (int k = 0; k < c; ++k) {
    Vector t = out.prototypes.row(k).transpose() + cfg.teacher_spillover * hub;
    teacher_targets.row(k) = t.normalized().transpose();
    detail::plant_teacher_text(out.teacher, tok, cfg.teacher_template,
                               class_names[static_cast<std::size_t>(k)],
                               teacher_targets.row(k).transpose());
  }
  // distractor names live in the orthogonal complement of the image span
  if (cfg.distractor_names > 0) {
    Matrix qcomp = qr.householderQ() * Matrix::Identity(d, d);
    qcomp = qcomp.rightCols(d - c - 1);
    for (int i = 0; i < cfg.distractor_names; ++i) {
      Vector g(d - c - 1);
      for (int j = 0; j < g.size(); ++j) g(j) = rng.next_gaussian();
      Vector target = (qcomp * g).normalized();
      detail::plant_teacher_text(out.teacher, tok, cfg.teacher_template,
                                 distractors[static_cast<std::size_t>(i)], target);
    }
  }

  // ---- dataset ----
  out.data.name = "synthetic" + std::to_string(c);
  out.data.classnames = class_names;
  auto fill_split = [&](DatasetSplit& split, SplitTag tag, int per_class, const char* tagname) {
    split.tag = tag;
    split.classnames = class_names;
    for (int k = 0; k < c; ++k) {
      for (int i = 0; i < per_class; ++i) {
        Vector x = out.prototypes.row(k).transpose();
        for (int j = 0; j < d; ++j) x(j) += cfg.noise_scale * rng.next_gaussian();
        std::string id = "synthetic://" + std::string(tagname) + "/" + std::to_string(k) + "/" +
                         std::to_string(i);
        out.data.features[id] = x;
        split.items.push_back(SplitItem{id, k, class_names[static_cast<std::size_t>(k)]});
      }
    }
  };
  fill_split(out.data.train, SplitTag::train, cfg.samples_per_class, "train");
  fill_split(out.data.val, SplitTag::val, cfg.val_per_class, "val");
  fill_split(out.data.test, SplitTag::test, cfg.test_per_class, "test");

  // ---- teacher validation ----
  {
    out.teacher_test_accuracy =
        evaluate_accuracy(out.teacher, nullptr, out.data, out.data.test, ClassSet(class_names),
                          0.01, cfg.teacher_template);
    if (out.teacher_test_accuracy < 100.0 * cfg.teacher_accuracy_floor)
      throw GenerationError("planted teacher accuracy " +
                            std::to_string(out.teacher_test_accuracy) +
                            "% is below the configured floor");
  }

  // ---- student ----
  EncoderConfig scfg = tcfg;
  scfg.num_layers = cfg.student_layers;
  scfg.image_branch = cfg.student_branch;
  if (cfg.student_branch == ImageBranch::vit) {
    if (d % cfg.student_patches != 0)
      throw ConfigError("embedding_dim must be divisible by student_patches");
    scfg.num_patches = cfg.student_patches;
    scfg.patch_dim = d / cfg.student_patches;
  }
  out.student = DualEncoderModel::make(scfg, Role::student, derive_seed(cfg.seed, 0x57d));
  out.student.backbone_id =
      (cfg.student_branch == ImageBranch::vit ? "toy_vit_student_d" : "toy_feature_student_d") +
      std::to_string(d);

  // degraded image map: rank-reduced projector over a random subspace
  int rank = std::max(1, static_cast<int>(std::lround(cfg.student_image_rank_fraction * d)));
  Matrix basis(d, rank);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < rank; ++j) basis(i, j) = rng.next_gaussian();
  Eigen::HouseholderQR<Matrix> sqr(basis);
  Matrix q = sqr.householderQ() * Matrix::Identity(d, rank);
  Matrix reduce = q * q.transpose();

  // confusion-mixed text targets in the student's degraded image geometry
  Matrix degraded_protos = out.prototypes * reduce.transpose();
  int confused = static_cast<int>(std::lround(cfg.student_confusion_fraction * c));
  Matrix student_targets(c, d);
  for (int k = 0; k < c; ++k) {
    Vector pk = degraded_protos.row(k).transpose();
    if (k < confused) {
      Vector mate = degraded_protos.row((k + 1) % c).transpose();
      Vector mixed = (1.0 - cfg.student_confusion_strength) * pk +
                     cfg.student_confusion_strength * mate;
      student_targets.row(k) = mixed.normalized().transpose();
    } else {
      student_targets.row(k) = pk.normalized().transpose();
    }
  }

  if (cfg.student_branch == ImageBranch::feature) {
    out.student.feature_proj = reduce;  // input features already live in R^d
  } else {
    // regression-plant the final projection so the ViT student embeds images
    // near their rank-reduced features
    std::vector<Vector> cls_rows;
    std::vector<Vector> targets;
    for (const auto& item : out.data.train.items) {
      const Vector& feat = out.data.features.at(item.id);
      Matrix patches(scfg.num_patches, scfg.patch_dim);
      for (int r = 0; r < scfg.num_patches; ++r)
        patches.row(r) = feat.segment(static_cast<Eigen::Index>(r) * scfg.patch_dim,
                                      scfg.patch_dim).transpose();
      ad::Tape t;
      // run the tower manually to capture the CLS output before projection
      auto embedded = ad::matmul(t, t.constant(patches), t.constant(out.student.patch_proj));
      auto rows = ad::concat_rows(t, {t.constant(out.student.cls), embedded});
      rows = out.student.run_tower_ad(t, out.student.image, rows, nullptr, 1, 0);
      cls_rows.push_back(rows->value.row(0).transpose());
      targets.push_back(reduce * out.data.features.at(item.id));
    }
    Matrix z(static_cast<Eigen::Index>(cls_rows.size()), scfg.patch_dim);
    Matrix y(static_cast<Eigen::Index>(cls_rows.size()), d);
    for (std::size_t i = 0; i < cls_rows.size(); ++i) {
      z.row(static_cast<Eigen::Index>(i)) = cls_rows[i].transpose();
      y.row(static_cast<Eigen::Index>(i)) = targets[i].transpose();
    }
    out.student.image.proj = z.completeOrthogonalDecomposition().solve(y);
  }

  // plant the student text projection: exact match on the hand-crafted
  // prompts of the true class names
  {
    ClassSet classes(class_names);
    auto prompts = build_handcrafted_prompts(out.student, classes, cfg.student_template);
    Matrix t0(c, d);
    for (int k = 0; k < c; ++k)
      t0.row(k) = out.student.encode_text(prompts[static_cast<std::size_t>(k)]).transpose();
    Matrix a = t0.completeOrthogonalDecomposition().solve(student_targets);
    out.student.text.proj = out.student.text.proj * a;
  }

  {
    out.student_zero_shot_accuracy =
        evaluate_accuracy(out.student, nullptr, out.data, out.data.test, ClassSet(class_names),
                          0.01, cfg.student_template);
  }

  // ---- vocabulary ----
  std::vector<std::string> vocab_names = class_names;
  vocab_names.insert(vocab_names.end(), distractors.begin(), distractors.end());
  out.vocab = ClassVocabulary::from_names(vocab_names);
  return out;
}

/// Domain-shifted evaluation variant: the same planted world with fresh
/// noise at a different scale. Train/val stay empty (target-only dataset).
inline DatasetBundle make_shifted_variant(const SyntheticDataset& base, double noise_scale,
                                          int test_per_class, std::uint64_t seed,
                                          const std::string& name) {
  DatasetBundle d;
  d.name = name;
  d.classnames = base.data.classnames;
  d.train.tag = SplitTag::train;
  d.val.tag = SplitTag::val;
  d.test.tag = SplitTag::test;
  d.train.classnames = d.val.classnames = d.test.classnames = d.classnames;
  const int c = static_cast<int>(d.classnames.size());
  const Eigen::Index dim = base.prototypes.cols();
  SplitMix64 rng(derive_seed(seed, 0x5f17));
  for (int k = 0; k < c; ++k) {
    for (int i = 0; i < test_per_class; ++i) {
      Vector x = base.prototypes.row(k).transpose();
      for (Eigen::Index j = 0; j < dim; ++j) x(j) += noise_scale * rng.next_gaussian();
      std::string id = "synthetic://" + name + "/" + std::to_string(k) + "/" + std::to_string(i);
      d.features[id] = x;
      d.test.items.push_back(SplitItem{id, k, d.classnames[static_cast<std::size_t>(k)]});
    }
  }
  return d;
}

}  // namespace kdpl
