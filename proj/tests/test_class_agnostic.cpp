// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>
#include <set>

#include "kdpl/episode.hpp"
#include "kdpl/synthetic.hpp"
#include "kdpl/trainer.hpp"

using namespace kdpl;

namespace {

SyntheticVLConfig ca_world_cfg(int distractors = 40) {
  SyntheticVLConfig c;
  c.num_classes = 8;
  c.embedding_dim = 64;
  c.samples_per_class = 8;
  c.val_per_class = 2;
  c.test_per_class = 8;
  c.distractor_names = distractors;
  c.seed = 77;
  return c;
}

// full-sort oracle with the same (prob desc, index asc) tie-break
std::vector<int> topk_oracle(const Vector& probs, int k) {
  std::vector<int> order(static_cast<std::size_t>(probs.size()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs(a) != probs(b)) return probs(a) > probs(b);
    return a < b;
  });
  order.resize(static_cast<std::size_t>(std::min<Eigen::Index>(k, probs.size())));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

TEST_CASE("vocabulary loading: normalization, comments, duplicates, reported size") {
  std::string path = "vocab_test.txt";
  {
    std::ofstream out(path);
    out << "# header comment\n"
        << "Tabby Cat\n"
        << "  husky \n"
        << "tabby cat\n"  // duplicate after normalization
        << "\n"
        << "FINCH\n";
  }
  auto vocab = ClassVocabulary::load(path);
  REQUIRE(vocab.size() == 3);
  CHECK(vocab.names[0] == "tabby cat");
  CHECK(vocab.names[1] == "husky");
  CHECK(vocab.names[2] == "finch");
  CHECK(vocab.dropped_duplicates == 1);
  CHECK(vocab.index_of("  HUSKY ") == 1);
  CHECK(vocab.index_of("missing") == -1);
  std::remove(path.c_str());
}

TEST_CASE("stack_teacher_probs: rows are per-image teacher distributions") {
  auto world = generate_synthetic(ca_world_cfg(12));
  TeacherContext teacher(world.teacher, "a photo of {}", 0.01, nullptr);
  std::vector<BatchItem> batch;
  for (int i = 0; i < 2; ++i)
    batch.push_back(world.data.make_item(world.data.train.items[static_cast<std::size_t>(i * 9)]));

  Matrix stacked = stack_teacher_probs(teacher, batch, world.vocab);
  REQUIRE(stacked.rows() == 2);
  REQUIRE(stacked.cols() == world.vocab.size());
  for (Eigen::Index r = 0; r < stacked.rows(); ++r)
    CHECK(std::abs(stacked.row(r).sum() - 1.0) < 1e-6);

  // per-row oracle: direct Eq-1 evaluation from raw embeddings
  ClassSet vocab_set(world.vocab.names);
  auto prompts = build_handcrafted_prompts(world.teacher, vocab_set, "a photo of {}");
  for (Eigen::Index r = 0; r < stacked.rows(); ++r) {
    Vector img = world.teacher.encode_image(batch[static_cast<std::size_t>(r)].input);
    Vector cosines(world.vocab.size());
    for (int i = 0; i < world.vocab.size(); ++i) {
      Vector txt = world.teacher.encode_text(prompts[static_cast<std::size_t>(i)]);
      cosines(i) = txt.dot(img) / (txt.norm() * img.norm());
    }
    Eigen::ArrayXd e = ((cosines.array() - cosines.maxCoeff()) / 0.01).exp();
    Vector expect = (e / e.sum()).matrix();
    CHECK((stacked.row(r).transpose() - expect).cwiseAbs().maxCoeff() < 1e-9);
  }

  // N=1 equals the teacher_predict output
  std::vector<BatchItem> one = {batch[0]};
  auto single = teacher_predict(teacher, one, vocab_set);
  Matrix row1 = stack_teacher_probs(teacher, one, world.vocab);
  CHECK((row1.row(0).transpose() - single[0].probs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mean_over_batch arithmetic") {
  Matrix two(2, 2);
  two << 1, 0, 0, 1;
  Vector m = mean_over_batch(two);
  CHECK(m(0) == Catch::Approx(0.5));
  CHECK(m(1) == Catch::Approx(0.5));
  Matrix other(2, 2);
  other << 0.6, 0.4, 0.2, 0.8;
  Vector m2 = mean_over_batch(other);
  CHECK(m2(0) == Catch::Approx(0.4));
  CHECK(m2(1) == Catch::Approx(0.6));
  Matrix one(1, 3);
  one << 0.2, 0.3, 0.5;
  CHECK((mean_over_batch(one) - one.row(0).transpose()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("select_topk: identity, spec tie case, oracle trials") {
  std::vector<std::string> names;
  for (int i = 0; i < 4; ++i) names.push_back("n" + std::to_string(i));
  auto vocab = ClassVocabulary::from_names(names);
  Vector probs(4);
  probs << 0.1, 0.4, 0.4, 0.1;
  auto sel = select_topk(probs, vocab, 2);
  REQUIRE(sel.indices.size() == 2);
  CHECK(sel.indices[0] == 1);
  CHECK(sel.indices[1] == 2);
  CHECK(sel.names[0] == "n1");
  CHECK(sel.mean_probs(0) == Catch::Approx(0.4));

  auto all = select_topk(probs, vocab, 4);
  CHECK(all.indices == std::vector<int>{0, 1, 2, 3});
  auto clamped = select_topk(probs, vocab, 9);
  CHECK(clamped.indices.size() == 4);
  CHECK_THROWS_AS(select_topk(probs, vocab, 0), ContractViolation);

  // randomized oracle equivalence with forced ties
  SplitMix64 rng(31);
  for (int trial = 0; trial < 60; ++trial) {
    int c = 5 + static_cast<int>(rng.next_below(400));
    int k = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(c)));
    std::vector<std::string> vn;
    for (int i = 0; i < c; ++i) vn.push_back("w" + std::to_string(i));
    auto v = ClassVocabulary::from_names(vn);
    Vector p(c);
    for (int i = 0; i < c; ++i) {
      p(i) = rng.next_unit();
      if (rng.next_unit() < 0.4) p(i) = std::floor(p(i) * 4) / 4.0;  // force ties
    }
    auto got = select_topk(p, v, k);
    CHECK(got.indices == topk_oracle(p, k));
    // selected entries dominate every unselected entry
    std::set<int> chosen(got.indices.begin(), got.indices.end());
    double min_sel = 1e9, max_unsel = -1e9;
    for (int i = 0; i < c; ++i)
      (chosen.count(i) ? min_sel = std::min(min_sel, p(i)) : max_unsel = std::max(max_unsel, p(i)));
    if (k < c) CHECK(min_sel >= max_unsel);
  }
}

TEST_CASE("pomp* selection: truths kept, distinct supplement, deterministic size") {
  std::vector<std::string> names;
  for (int i = 0; i < 10; ++i) names.push_back("n" + std::to_string(i));
  auto vocab = ClassVocabulary::from_names(names);

  // batch covering K distinct classes: no supplement
  auto covered = pomp_star_select({3, 1, 4, 1, 3, 9, 2}, vocab, 5, 1);
  CHECK(covered.indices == std::vector<int>{1, 2, 3, 4, 9});

  // 1 true class, K=4, C=10: three random distinct others, never the truth
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto sel = pomp_star_select({6}, vocab, 4, seed);
    REQUIRE(sel.indices.size() == 4);
    CHECK(std::count(sel.indices.begin(), sel.indices.end(), 6) == 1);
    std::set<int> uniq(sel.indices.begin(), sel.indices.end());
    CHECK(uniq.size() == 4);
  }
  CHECK(pomp_star_select({0}, vocab, 25, 3).indices.size() == 10);  // min(K, C)
  CHECK_THROWS_AS(pomp_star_select({}, vocab, 4, 1), ContractViolation);
  CHECK_THROWS_AS(pomp_star_select({11}, vocab, 4, 1), ContractViolation);
}

TEST_CASE("ca_train_step reduces to label-agnostic kdpl when vocab = classes and K = C") {
  auto world = generate_synthetic(ca_world_cfg(0));  // vocabulary is exactly the class names
  ClassSet classes(world.data.classnames);
  REQUIRE(world.vocab.size() == classes.size());
  std::vector<BatchItem> batch;
  for (int i = 0; i < 6; ++i)
    batch.push_back(world.data.make_item(world.data.train.items[static_cast<std::size_t>(i * 5)]));
  TrainRunConfig cfg;
  cfg.method = PromptMethod::coop;

  TeacherContext teacher_a(world.teacher, "a photo of {}", 0.01, nullptr);
  auto gamma_a = make_prompt_params(PromptMethod::coop, world.student, PromptOptions{}, 21);
  double loss_kdpl = kdpl_train_step(world.student, teacher_a, gamma_a, batch, classes, cfg, 0.01);

  TeacherContext teacher_b(world.teacher, "a photo of {}", 0.01, nullptr);
  auto gamma_b = make_prompt_params(PromptMethod::coop, world.student, PromptOptions{}, 21);
  auto [loss_ca, sel] = ca_train_step(world.student, teacher_b, gamma_b, batch, world.vocab,
                                      classes.size(), cfg, 0.01);
  CHECK(std::abs(loss_kdpl - loss_ca) < 1e-9);
  CHECK(sel.names == world.data.classnames);
  CHECK((gamma_a.contexts - gamma_b.contexts).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("memory contract: student text encodings per step equal K, not C") {
  for (int distractors : {40, 120}) {
    auto world = generate_synthetic(ca_world_cfg(distractors));
    TeacherContext teacher(world.teacher, "a photo of {}", 0.01, nullptr);
    auto gamma = make_prompt_params(PromptMethod::coop, world.student, PromptOptions{}, 5);
    std::vector<BatchItem> batch;
    for (int i = 0; i < 4; ++i)
      batch.push_back(world.data.make_item(world.data.train.items[static_cast<std::size_t>(i)]));
    TrainRunConfig cfg;
    cfg.method = PromptMethod::coop;
    const int k = 6;
    world.student.text_encode_calls = 0;
    ca_train_step(world.student, teacher, gamma, batch, world.vocab, k, cfg, 0.0);
    CHECK(world.student.text_encode_calls == static_cast<std::uint64_t>(k));
  }
}

TEST_CASE("restricted distributions renormalize to 1 and selection is deterministic") {
  auto world = generate_synthetic(ca_world_cfg(30));
  TeacherContext teacher(world.teacher, "a photo of {}", 0.01, nullptr);
  std::vector<BatchItem> batch;
  for (int i = 0; i < 5; ++i)
    batch.push_back(world.data.make_item(world.data.train.items[static_cast<std::size_t>(i * 7)]));
  auto stacked = stack_teacher_probs(teacher, batch, world.vocab);
  auto sel1 = select_topk(mean_over_batch(stacked), world.vocab, 10);
  auto sel2 = select_topk(mean_over_batch(stack_teacher_probs(teacher, batch, world.vocab)),
                          world.vocab, 10);
  CHECK(sel1.indices == sel2.indices);
  auto restricted = teacher_probs_restricted(teacher, batch, world.vocab, sel1);
  for (const auto& d : restricted) CHECK(std::abs(d.probs.sum() - 1.0) < 1e-6);

  // student side over the selected names sums to 1 as well
  ClassSet selected(sel1.names);
  auto gamma = make_prompt_params(PromptMethod::coop, world.student, PromptOptions{}, 6);
  auto student = student_predict(world.student, &gamma, batch, selected, 0.01);
  for (const auto& d : student) CHECK(std::abs(d.probs.sum() - 1.0) < 1e-6);
}

TEST_CASE("ca training variant requires a vocabulary") {
  auto world = generate_synthetic(ca_world_cfg(10));
  ClassSet classes(world.data.classnames);
  std::vector<LabeledItem> items;
  for (const auto& s : world.data.train.items) items.push_back({world.data.make_item(s), s.label});
  TrainRunConfig cfg;
  cfg.method = PromptMethod::coop;
  cfg.variant = TrainVariant::ca_kdpl;
  cfg.epochs = 1;
  TeacherContext teacher(world.teacher, "a photo of {}", 0.01, nullptr);
  auto gamma = make_prompt_params(PromptMethod::coop, world.student, PromptOptions{}, 7);
  CHECK_THROWS_AS(train_prompts(world.student, teacher, items, classes, nullptr, cfg, gamma),
                  ConfigError);
}
