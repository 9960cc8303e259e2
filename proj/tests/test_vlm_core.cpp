// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "kdpl/encoder.hpp"
#include "kdpl/zero_shot.hpp"

using namespace kdpl;

namespace {

EncoderConfig tiny_config(int layers, ImageBranch branch = ImageBranch::vit) {
  EncoderConfig c;
  c.shared_dim = 12;
  c.text_token_dim = 8;
  c.patch_dim = 6;
  c.num_layers = layers;
  c.num_patches = 4;
  c.vocab_size = 4096;
  c.max_text_len = 16;
  c.image_branch = branch;
  c.feature_dim = 10;
  return c;
}

bool bitwise_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("config validation rejects non-positive dims") {
  EncoderConfig c = tiny_config(1);
  c.shared_dim = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config(1);
  c.vocab_size = -3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("handcrafted prompts: one sequence per class, order preserved, deterministic") {
  auto model = DualEncoderModel::make(tiny_config(1), Role::student, 3);
  ClassSet classes({"airplane", "bird"});
  auto seqs = build_handcrafted_prompts(model, classes, "a photo of a {}");
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0].length() == 5);
  // identity template embeds the bare class word
  auto bare = build_handcrafted_prompts(model, ClassSet({"x", "y"}), "{}");
  Tokenizer tok(model.config.vocab_size);
  CHECK(bare[0].embeddings.row(0) == model.embedder.row(tok.word_id("x")).transpose());
  // determinism
  auto again = build_handcrafted_prompts(model, classes, "a photo of a {}");
  CHECK(seqs[0].embeddings == again[0].embeddings);
  CHECK(seqs[1].embeddings == again[1].embeddings);
  // errors
  CHECK_THROWS_AS(build_handcrafted_prompts(model, classes, "no placeholder"), ConfigError);
  CHECK_THROWS_AS(build_handcrafted_prompts(model, classes, "{} twice {}"), ConfigError);
}

TEST_CASE("zero-layer text encoder equals mean-pool + projection oracle") {
  auto model = DualEncoderModel::make(tiny_config(0), Role::student, 5);
  Tokenizer tok(model.config.vocab_size);
  auto ids = tok.encode("a small bird");
  TokenSequence seq{model.embedder.embed(ids)};
  Vector got = model.encode_text(seq);
  // direct matrix arithmetic oracle
  Vector expect = (seq.embeddings.colwise().mean() * model.text.proj).row(0).transpose();
  CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(got.size() == model.config.shared_dim);
}

TEST_CASE("text encoder output dim and shape errors") {
  auto model = DualEncoderModel::make(tiny_config(2), Role::student, 7);
  Matrix bad(3, model.config.text_token_dim + 1);
  bad.setZero();
  ad::Tape t;
  CHECK_THROWS_AS(model.encode_text_ad(t, t.constant(bad)), ShapeError);
  Matrix too_long(model.config.max_text_len + 1, model.config.text_token_dim);
  too_long.setZero();
  ad::Tape t2;
  CHECK_THROWS_AS(model.encode_text_ad(t2, t2.constant(too_long)), ShapeError);
}

TEST_CASE("frozen model repeats encodings bitwise") {
  auto model = DualEncoderModel::make(tiny_config(2), Role::teacher, 11);
  CHECK(model.frozen);  // teacher role implies frozen
  Tokenizer tok(model.config.vocab_size);
  TokenSequence seq{model.embedder.embed(tok.encode("a photo of a cat"))};
  CHECK(bitwise_equal(model.encode_text(seq), model.encode_text(seq)));
  SplitMix64 rng(2);
  Matrix patches(model.config.num_patches, model.config.patch_dim);
  for (Eigen::Index i = 0; i < patches.size(); ++i) patches(i / patches.cols(), i % patches.cols()) = rng.next_gaussian();
  CHECK(bitwise_equal(model.encode_image(ImageInput(patches)),
                      model.encode_image(ImageInput(patches))));
}

TEST_CASE("one-layer image encoder on all-zero image matches arithmetic oracle") {
  auto model = DualEncoderModel::make(tiny_config(1), Role::student, 13);
  const auto& cfg = model.config;
  Matrix zero_patches = Matrix::Zero(cfg.num_patches, cfg.patch_dim);
  Vector got = model.encode_image(ImageInput(zero_patches));

  // oracle: rows = [cls; zeros], one attention block, CLS row projected
  Matrix rows(cfg.num_patches + 1, cfg.patch_dim);
  rows.row(0) = model.cls.row(0);
  rows.bottomRows(cfg.num_patches).setZero();
  const auto& b = model.image.blocks[0];
  Matrix q = rows * b.wq, k = rows * b.wk, v = rows * b.wv;
  Matrix scores = q * k.transpose() / std::sqrt(static_cast<double>(cfg.patch_dim));
  Matrix att(rows.rows(), rows.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    Eigen::ArrayXd e = (scores.row(r).array() - scores.row(r).maxCoeff()).exp();
    att.row(r) = ((e / e.sum()).matrix().transpose() * v).row(0);
  }
  Matrix h1 = rows + att * b.wo;
  auto layer_norm = [](Matrix m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      double mu = m.row(r).mean();
      Eigen::ArrayXd ctr = m.row(r).array() - mu;
      m.row(r) = (ctr / std::sqrt(ctr.square().mean() + 1e-5)).matrix();
    }
    return m;
  };
  h1 = layer_norm(h1);
  Matrix h2 = layer_norm(h1 + (h1 * b.w1).array().tanh().matrix() * b.w2);
  Vector expect = (h2.row(0) * model.image.proj).transpose();
  CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(got.size() == cfg.shared_dim);
}

TEST_CASE("visual injection changes the embedding; removing it restores the baseline") {
  auto model = DualEncoderModel::make(tiny_config(2), Role::student, 17);
  SplitMix64 rng(5);
  Matrix patches(model.config.num_patches, model.config.patch_dim);
  for (Eigen::Index r = 0; r < patches.rows(); ++r)
    for (Eigen::Index c = 0; c < patches.cols(); ++c) patches(r, c) = rng.next_gaussian();
  Vector baseline = model.encode_image(ImageInput(patches));
  Matrix tokens(2, model.config.patch_dim);
  for (Eigen::Index r = 0; r < tokens.rows(); ++r)
    for (Eigen::Index c = 0; c < tokens.cols(); ++c) tokens(r, c) = rng.next_gaussian();
  ad::Tape t;
  VisualInjectionAD plan;
  plan.num_tokens = 2;
  plan.per_layer[0] = t.constant(tokens);
  Vector injected =
      model.encode_image_ad(t, ImageInput(patches), &plan)->value.row(0).transpose();
  CHECK((injected - baseline).cwiseAbs().maxCoeff() > 1e-9);
  Vector again = model.encode_image(ImageInput(patches));
  CHECK(bitwise_equal(again, baseline));
}

TEST_CASE("feature branch rejects visual prompts and patch inputs") {
  auto model = DualEncoderModel::make(tiny_config(1, ImageBranch::feature), Role::student, 19);
  Vector feat = Vector::Ones(model.config.feature_dim);
  CHECK(model.encode_image(ImageInput(feat)).size() == model.config.shared_dim);
  ad::Tape t;
  VisualInjectionAD plan;
  plan.num_tokens = 1;
  plan.per_layer[0] = t.constant(Matrix::Ones(1, model.config.patch_dim));
  CHECK_THROWS_AS(model.encode_image_ad(t, ImageInput(feat), &plan), UnsupportedBackboneError);
  Vector wrong = Vector::Ones(model.config.feature_dim + 2);
  CHECK_THROWS_AS(model.encode_image(ImageInput(wrong)), ShapeError);
}

TEST_CASE("Eq-1 head: fixed case, uniformity, scale invariance, permutation") {
  // construct embeddings with exact cosines 0.2 and 0.1 against the image
  Vector img = Vector::Zero(8);
  img(0) = 1.0;
  Vector t1 = Vector::Zero(8), t2 = Vector::Zero(8);
  t1(0) = 0.2;
  t1(1) = std::sqrt(1.0 - 0.04);
  t2(0) = 0.1;
  t2(2) = std::sqrt(1.0 - 0.01);
  ClassSet ab({"a", "b"});
  auto dist = compute_class_probabilities(img, {t1, t2}, 0.01, ab);
  // direct evaluation of the softmax with exact exponentials
  long double z1 = std::exp(0.2L / 0.01L), z2 = std::exp(0.1L / 0.01L);
  CHECK(std::abs(dist.probs(0) - static_cast<double>(z1 / (z1 + z2))) < 1e-6);
  CHECK(std::abs(dist.probs(1) - static_cast<double>(z2 / (z1 + z2))) < 1e-6);
  CHECK(std::abs(dist.probs(0) - 0.9999546) < 1e-6);
  CHECK(std::abs(dist.probs(1) - 0.0000454) < 1e-6);
  CHECK(std::abs(dist.probs.sum() - 1.0) < 1e-6);

  // equal cosines -> uniform
  auto uni = compute_class_probabilities(img, {t1, t1, t1}, 0.01, ClassSet({"a", "b", "c"}));
  for (int i = 0; i < 3; ++i) CHECK(uni.probs(i) == Catch::Approx(1.0 / 3).margin(1e-12));

  // positive scaling of the image leaves the distribution unchanged
  auto scaled = compute_class_probabilities(3.7 * img, {t1, t2}, 0.01, ab);
  CHECK((scaled.probs - dist.probs).cwiseAbs().maxCoeff() < 1e-9);

  // permutation equivariance is exact
  auto swapped = compute_class_probabilities(img, {t2, t1}, 0.01, ab);
  CHECK(swapped.probs(0) == dist.probs(1));
  CHECK(swapped.probs(1) == dist.probs(0));

  // degenerate input
  CHECK_THROWS_AS(compute_class_probabilities(Vector::Zero(8), {t1, t2}, 0.01, ab),
                  DegenerateInputError);
  CHECK_THROWS_AS(compute_class_probabilities(img, {t1}, 0.01, Digest{}), ContractViolation);
}

TEST_CASE("no NaN/Inf at tau = 0.01 across cosine extremes") {
  Vector img = Vector::Zero(4);
  img(0) = 1.0;
  Vector plus = img, minus = -img;
  Vector ortho = Vector::Zero(4);
  ortho(1) = 1.0;
  auto d = compute_class_probabilities(img, {plus, minus, ortho}, 0.01,
                                       ClassSet({"p", "m", "o"}));
  CHECK(d.probs.allFinite());
  CHECK(std::abs(d.probs.sum() - 1.0) < 1e-6);
}

TEST_CASE("model checkpoint round-trips value-exact") {
  auto model = DualEncoderModel::make(tiny_config(2), Role::student, 23);
  Tokenizer tok(model.config.vocab_size);
  model.embedder.set_row(tok.word_id("planted"), Vector::LinSpaced(8, -1.0, 1.0));
  std::string path = "vlm_roundtrip_model.json";
  model.save(path);
  auto loaded = DualEncoderModel::load(path);
  CHECK(loaded.config.shared_dim == model.config.shared_dim);
  CHECK(loaded.text.proj == model.text.proj);
  CHECK(loaded.image.blocks[1].w2 == model.image.blocks[1].w2);
  CHECK(loaded.embedder.row(tok.word_id("planted")) == model.embedder.row(tok.word_id("planted")));
  TokenSequence seq{model.embedder.embed(tok.encode("a planted probe"))};
  CHECK(bitwise_equal(loaded.encode_text(seq), model.encode_text(seq)));
  // a second save of the loaded model is byte-identical
  loaded.save(path + ".2");
  std::ifstream a(path), b(path + ".2");
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
  std::remove(path.c_str());
  std::remove((path + ".2").c_str());
}
