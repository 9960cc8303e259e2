// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "kdpl/episode.hpp"
#include "kdpl/image_ops.hpp"
#include "kdpl/synthetic.hpp"

using namespace kdpl;

namespace {

DatasetBundle tiny_bundle() {
  DatasetBundle d;
  d.name = "toy";
  d.classnames = {"cat", "dog", "owl"};
  d.train.tag = SplitTag::train;
  d.val.tag = SplitTag::val;
  d.test.tag = SplitTag::test;
  d.train.classnames = d.val.classnames = d.test.classnames = d.classnames;
  int serial = 0;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 4; ++i) {
      std::string id = "synthetic://train/" + std::to_string(serial++);
      d.train.items.push_back({id, k, d.classnames[static_cast<std::size_t>(k)]});
      d.features[id] = Vector::Constant(4, static_cast<double>(serial));
    }
  std::string tid = "synthetic://test/0";
  d.test.items.push_back({tid, 1, "dog"});
  d.features[tid] = Vector::Ones(4);
  return d;
}

}  // namespace

TEST_CASE("split file round-trip is identical") {
  auto d = tiny_bundle();
  std::string path = "split_roundtrip.json";
  save_split_file(d, path);
  auto loaded = load_split_file(path);
  CHECK(loaded.classnames == d.classnames);
  REQUIRE(loaded.train.items.size() == d.train.items.size());
  for (std::size_t i = 0; i < d.train.items.size(); ++i) {
    CHECK(loaded.train.items[i].id == d.train.items[i].id);
    CHECK(loaded.train.items[i].label == d.train.items[i].label);
    CHECK(loaded.train.items[i].classname == d.train.items[i].classname);
  }
  CHECK(loaded.features.at("synthetic://test/0") == d.features.at("synthetic://test/0"));
  std::remove(path.c_str());
  std::remove((path + ".features.json").c_str());
}

TEST_CASE("empty train with populated test is a valid target-only dataset") {
  Json j;
  j["format"] = "kdpl.split.v1";
  j["name"] = "targetonly";
  j["classnames"] = Json::array({"a", "b"});
  j["train"] = Json::array();
  j["val"] = Json::array();
  j["test"] = Json::array({Json::array({"img/1.jpg", 0, "a"}), Json::array({"img/2.jpg", 1, "b"})});
  std::string path = "split_targetonly.json";
  write_json_file(path, j);
  auto d = load_split_file(path);
  CHECK(d.train.items.empty());
  CHECK(d.test.items.size() == 2);
  std::remove(path.c_str());
}

TEST_CASE("malformed records carry their position in the error") {
  Json j;
  j["format"] = "kdpl.split.v1";
  j["name"] = "bad";
  j["classnames"] = Json::array({"a", "b"});
  j["train"] = Json::array({Json::array({"x.jpg", 5, "a"})});  // label out of range
  j["val"] = Json::array();
  j["test"] = Json::array();
  std::string path = "split_bad.json";
  write_json_file(path, j);
  try {
    load_split_file(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("train[0]") != std::string::npos);
  }
  // classname inconsistent with the label index
  j["train"] = Json::array({Json::array({"x.jpg", 0, "b"})});
  write_json_file(path, j);
  CHECK_THROWS_AS(load_split_file(path), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("caltech background classes are discarded and labels reindexed when flagged") {
  Json j;
  j["format"] = "kdpl.split.v1";
  j["name"] = "caltechish";
  j["classnames"] = Json::array({"BACKGROUND Google", "accordion", "Faces easy", "airplane"});
  j["train"] = Json::array({Json::array({"a.jpg", 0, "BACKGROUND Google"}),
                            Json::array({"b.jpg", 1, "accordion"}),
                            Json::array({"c.jpg", 2, "Faces easy"}),
                            Json::array({"d.jpg", 3, "airplane"})});
  j["val"] = Json::array();
  j["test"] = Json::array();
  std::string path = "split_caltech.json";
  write_json_file(path, j);
  LoadOptions opts;
  opts.discard_caltech_background = true;
  auto d = load_split_file(path, opts);
  CHECK(d.classnames == std::vector<std::string>{"accordion", "airplane"});
  REQUIRE(d.train.items.size() == 2);
  CHECK(d.train.items[0].label == 0);
  CHECK(d.train.items[1].label == 1);
  std::remove(path.c_str());
}

TEST_CASE("few-shot sampling: determinism, per-class counts, seed variety") {
  DatasetBundle big;
  big.classnames = {"c0", "c1"};
  big.train.tag = SplitTag::train;
  big.test.tag = SplitTag::test;
  big.train.classnames = big.classnames;
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < 100; ++i)
      big.train.items.push_back(
          {"id/" + std::to_string(k) + "/" + std::to_string(i), k, big.classnames[static_cast<std::size_t>(k)]});

  auto ep1 = sample_few_shot(big.train, 16, 1);
  auto ep1b = sample_few_shot(big.train, 16, 1);
  REQUIRE(ep1.items.size() == 32);
  for (std::size_t i = 0; i < ep1.items.size(); ++i) CHECK(ep1.items[i].id == ep1b.items[i].id);

  std::set<std::string> sigs;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    auto ep = sample_few_shot(big.train, 16, seed);
    std::string sig;
    for (const auto& it : ep.items) sig += it.id + "|";
    sigs.insert(sig);
  }
  CHECK(sigs.size() == 3);  // distinct episodes

  // shots >= class size takes the whole class
  auto all = sample_few_shot(big.train, 500, 9);
  CHECK(all.items.size() == big.train.items.size());

  // per-class counts
  auto ep = sample_few_shot(big.train, 7, 4);
  std::map<int, int> counts;
  for (const auto& it : ep.items) counts[it.label]++;
  CHECK(counts[0] == 7);
  CHECK(counts[1] == 7);

  CHECK_THROWS_AS(sample_few_shot(big.test, 16, 1), ContractViolation);
}

TEST_CASE("base/novel split: ceiling rule, disjoint coverage") {
  auto [b4, n4] = base_novel_split({"a", "b", "c", "d"});
  CHECK(b4.names == std::vector<std::string>{"a", "b"});
  CHECK(n4.names == std::vector<std::string>{"c", "d"});
  auto [b5, n5] = base_novel_split({"a", "b", "c", "d", "e"});
  CHECK(b5.names.size() == 3);
  CHECK(n5.names.size() == 2);

  SplitMix64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    int c = 2 + static_cast<int>(rng.next_below(40));
    std::vector<std::string> names;
    for (int i = 0; i < c; ++i) names.push_back("cls" + std::to_string(i));
    auto [base, novel] = base_novel_split(names);
    std::set<std::string> all(base.names.begin(), base.names.end());
    for (const auto& n : novel.names) CHECK(all.insert(n).second);  // disjoint
    CHECK(static_cast<int>(all.size()) == c);                       // coverage
  }
}

TEST_CASE("preprocess: eval determinism, train reproducibility, output size") {
  Image img(37, 53, 3);
  SplitMix64 fill(3);
  for (auto& v : img.data) v = static_cast<float>(fill.next_unit());

  auto a = preprocess(img, PreprocessMode::eval);
  auto b = preprocess(img, PreprocessMode::eval);
  CHECK(a.height == 224);
  CHECK(a.width == 224);
  CHECK(a.data == b.data);

  SplitMix64 r1(11), r2(11), r3(12);
  auto t1 = preprocess(img, PreprocessMode::train, {}, &r1);
  auto t2 = preprocess(img, PreprocessMode::train, {}, &r2);
  auto t3 = preprocess(img, PreprocessMode::train, {}, &r3);
  CHECK(t1.height == 224);
  CHECK(t1.width == 224);
  CHECK(t1.data == t2.data);
  CHECK(t1.data != t3.data);

  CHECK_THROWS_AS(preprocess(Image{}, PreprocessMode::eval), DataError);
  CHECK_THROWS_AS(preprocess(img, PreprocessMode::train), ContractViolation);
}

TEST_CASE("bicubic resize interpolates smoothly and preserves constants") {
  Image flat(9, 9, 1);
  for (auto& v : flat.data) v = 0.75f;
  auto up = bicubic_resize(flat, 224, 224);
  for (float v : up.data) CHECK(v == Catch::Approx(0.75f).margin(1e-5));
}

TEST_CASE("synthetic generation: planted teacher quality and determinism") {
  SyntheticVLConfig cfg;
  cfg.num_classes = 20;
  cfg.embedding_dim = 64;
  cfg.prototype_margin = 0.1;
  cfg.noise_scale = 0.05;
  auto world = generate_synthetic(cfg);
  CHECK(world.teacher_test_accuracy >= 95.0);
  CHECK(world.teacher.frozen);
  CHECK(world.student_zero_shot_accuracy < world.teacher_test_accuracy);

  // noiseless planting gives a perfect teacher
  SyntheticVLConfig clean = cfg;
  clean.noise_scale = 0.0;
  clean.num_classes = 6;
  clean.embedding_dim = 24;
  clean.samples_per_class = 4;
  clean.val_per_class = 1;
  clean.test_per_class = 4;
  CHECK(generate_synthetic(clean).teacher_test_accuracy == 100.0);

  // same seed, identical dataset
  auto again = generate_synthetic(cfg);
  CHECK(world.data.features.size() == again.data.features.size());
  for (const auto& [id, v] : world.data.features) CHECK(again.data.features.at(id) == v);

  // split integrity: no id appears in two splits
  std::set<std::string> seen;
  for (const auto* split : {&world.data.train, &world.data.val, &world.data.test})
    for (const auto& it : split->items) CHECK(seen.insert(it.id).second);
}

TEST_CASE("unachievable prototype margin reports a generation error") {
  SyntheticVLConfig cfg;
  cfg.num_classes = 20;
  cfg.embedding_dim = 24;
  cfg.prototype_margin = 1.9;  // pairwise cosine <= -0.9 for 20 vectors: impossible
  cfg.samples_per_class = 2;
  cfg.val_per_class = 1;
  cfg.test_per_class = 2;
  CHECK_THROWS_AS(generate_synthetic(cfg), GenerationError);
}

TEST_CASE("missing feature sidecar for synthetic ids is a data error") {
  auto d = tiny_bundle();
  std::string path = "split_nosidecar.json";
  save_split_file(d, path);
  std::remove((path + ".features.json").c_str());
  CHECK_THROWS_AS(load_split_file(path), DataError);
  std::remove(path.c_str());
}
