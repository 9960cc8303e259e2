// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kdpl/encoder.hpp"
#include "kdpl/errors.hpp"
#include "kdpl/jsonio.hpp"
#include "kdpl/teacher.hpp"
#include "kdpl/zero_shot.hpp"

namespace kdpl {

enum class SplitTag { train, val, test };

inline std::string split_tag_name(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  throw ContractViolation("unknown split tag");
}

struct SplitItem {
  std::string id;  // image path or synthetic:// id
  int label = -1;
  std::string classname;
};

struct DatasetSplit {
  SplitTag tag = SplitTag::train;
  std::vector<SplitItem> items;
  std::vector<std::string> classnames;
};

struct LoadOptions {
  // Caltech101 convention: these two classes are discarded when flagged.
  bool discard_caltech_background = false;
};

/// A dataset: three splits in the CoOp convention plus (for synthetic
/// datasets) a sidecar map of feature vectors keyed by synthetic:// id.
struct DatasetBundle {
  std::string name;
  std::vector<std::string> classnames;
  DatasetSplit train, val, test;
  std::map<std::string, Vector> features;

  const DatasetSplit& split(SplitTag t) const {
    switch (t) {
      case SplitTag::train: return train;
      case SplitTag::val: return val;
      case SplitTag::test: return test;
    }
    throw ContractViolation("unknown split tag");
  }

  ClassSet class_set() const { return ClassSet(classnames); }

  /// Resolves one split item to a model input. Feature vectors are handed
  /// over flat; ViT-branch models patchify them internally.
  BatchItem make_item(const SplitItem& s) const {
    auto it = features.find(s.id);
    if (it == features.end()) throw DataError("no feature data for item: " + s.id);
    return BatchItem{s.id, ImageInput(it->second)};
  }
};

namespace detail {

inline Json split_items_to_json(const DatasetSplit& s) {
  Json arr = Json::array();
  for (const auto& it : s.items) arr.push_back(Json::array({it.id, it.label, it.classname}));
  return arr;
}

inline DatasetSplit split_items_from_json(const Json& arr, SplitTag tag, const std::string& field,
                                          const std::vector<std::string>& classnames) {
  DatasetSplit s;
  s.tag = tag;
  s.classnames = classnames;
  int idx = 0;
  for (const auto& rec : arr) {
    if (!rec.is_array() || rec.size() != 3)
      throw ParseError(field + "[" + std::to_string(idx) + "]: expected [path, label, name]");
    SplitItem item;
    item.id = rec[0].get<std::string>();
    item.label = rec[1].get<int>();
    item.classname = rec[2].get<std::string>();
    if (item.label < 0 || item.label >= static_cast<int>(classnames.size()))
      throw ParseError(field + "[" + std::to_string(idx) + "]: label " +
                       std::to_string(item.label) + " out of range (C=" +
                       std::to_string(classnames.size()) + ")");
    if (classnames[static_cast<std::size_t>(item.label)] != item.classname)
      throw ParseError(field + "[" + std::to_string(idx) + "]: classname '" + item.classname +
                       "' does not match label " + std::to_string(item.label));
    s.items.push_back(std::move(item));
    ++idx;
  }
  return s;
}

}  // namespace detail

inline void save_split_file(const DatasetBundle& d, const std::string& path) {
  Json j;
  j["format"] = "kdpl.split.v1";
  j["name"] = d.name;
  j["classnames"] = d.classnames;
  j["train"] = detail::split_items_to_json(d.train);
  j["val"] = detail::split_items_to_json(d.val);
  j["test"] = detail::split_items_to_json(d.test);
  write_json_file(path, j);
  if (!d.features.empty()) {
    Json f;
    f["format"] = "kdpl.features.v1";
    Json feats = Json::object();
    for (const auto& [id, v] : d.features) {
      Json arr = Json::array();
      for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
      feats[id] = std::move(arr);
    }
    f["features"] = std::move(feats);
    write_json_file(path + ".features.json", f);
  }
}

inline DatasetBundle load_split_file(const std::string& path, const LoadOptions& opts = {}) {
  Json j = read_json_file(path);
  if (j.value("format", "") != "kdpl.split.v1") throw ParseError(path + ": not a kdpl split file");
  DatasetBundle d;
  d.name = j.value("name", "dataset");
  d.classnames = j.at("classnames").get<std::vector<std::string>>();
  if (d.classnames.empty()) throw ParseError(path + ": empty classnames");
  d.train = detail::split_items_from_json(j.at("train"), SplitTag::train, "train", d.classnames);
  d.val = detail::split_items_from_json(j.at("val"), SplitTag::val, "val", d.classnames);
  d.test = detail::split_items_from_json(j.at("test"), SplitTag::test, "test", d.classnames);

  if (opts.discard_caltech_background) {
    const std::vector<std::string> dropped = {"BACKGROUND Google", "Faces easy"};
    std::vector<std::string> kept;
    std::map<int, int> remap;
    for (int i = 0; i < static_cast<int>(d.classnames.size()); ++i) {
      const auto& n = d.classnames[static_cast<std::size_t>(i)];
      bool drop = false;
      for (const auto& bad : dropped) drop = drop || n == bad;
      if (!drop) {
        remap[i] = static_cast<int>(kept.size());
        kept.push_back(n);
      }
    }
    auto filter = [&](DatasetSplit& s) {
      std::vector<SplitItem> out;
      for (auto& it : s.items) {
        auto r = remap.find(it.label);
        if (r == remap.end()) continue;
        it.label = r->second;
        out.push_back(it);
      }
      s.items = std::move(out);
      s.classnames = kept;
    };
    filter(d.train);
    filter(d.val);
    filter(d.test);
    d.classnames = kept;
  }

  auto sidecar = path + ".features.json";
  std::ifstream probe(sidecar);
  bool need_features = false;
  for (const auto* s : {&d.train, &d.val, &d.test})
    for (const auto& it : s->items)
      if (it.id.rfind("synthetic://", 0) == 0) need_features = true;
  if (probe.good()) {
    Json f = read_json_file(sidecar);
    if (f.value("format", "") != "kdpl.features.v1")
      throw ParseError(sidecar + ": not a kdpl feature sidecar");
    for (const auto& [id, arr] : f.at("features").items()) {
      Vector v(static_cast<Eigen::Index>(arr.size()));
      for (std::size_t i = 0; i < arr.size(); ++i)
        v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
      d.features[id] = std::move(v);
    }
  } else if (need_features) {
    throw DataError("split references synthetic items but sidecar is missing: " + sidecar);
  }
  return d;
}

/// Restricts a split to a class subset (order taken from `subset`), remapping
/// labels into subset indexing.
inline DatasetSplit filter_to_classes(const DatasetSplit& s,
                                      const std::vector<std::string>& subset) {
  std::map<std::string, int> pos;
  for (int i = 0; i < static_cast<int>(subset.size()); ++i) pos[subset[static_cast<std::size_t>(i)]] = i;
  DatasetSplit out;
  out.tag = s.tag;
  out.classnames = subset;
  for (const auto& it : s.items) {
    auto p = pos.find(it.classname);
    if (p == pos.end()) continue;
    out.items.push_back(SplitItem{it.id, p->second, it.classname});
  }
  return out;
}

}  // namespace kdpl
