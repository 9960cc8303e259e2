// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <vector>

#include "kdpl/dataset.hpp"
#include "kdpl/rng.hpp"
#include "kdpl/zero_shot.hpp"

namespace kdpl {

/// Seeded few-shot sample: min(shots, available) items per class.
struct FewShotEpisode {
  int shots = 16;
  std::uint64_t seed = 1;
  std::vector<SplitItem> items;
};

/// Pure function of (split, shots, seed); classes with fewer items than
/// `shots` contribute everything they have.
inline FewShotEpisode sample_few_shot(const DatasetSplit& split, int shots, std::uint64_t seed) {
  if (split.tag != SplitTag::train)
    throw ContractViolation("few-shot episodes are sampled from the train split");
  if (shots < 1) throw ContractViolation("shots must be >= 1");
  std::map<int, std::vector<const SplitItem*>> by_class;
  for (const auto& it : split.items) by_class[it.label].push_back(&it);
  FewShotEpisode ep;
  ep.shots = shots;
  ep.seed = seed;
  for (auto& [label, members] : by_class) {
    if (static_cast<int>(members.size()) > shots) {
      SplitMix64 rng(derive_seed(seed, 0xf5, static_cast<std::uint64_t>(label)));
      rng.shuffle(members);
      members.resize(static_cast<std::size_t>(shots));
    }
    for (const auto* m : members) ep.items.push_back(*m);
  }
  return ep;
}

/// Base = first ceil(C/2) names in canonical order, novel = the rest.
inline std::pair<ClassSet, ClassSet> base_novel_split(const std::vector<std::string>& classnames) {
  if (classnames.size() < 2) throw ContractViolation("base/novel split needs >= 2 classes");
  std::size_t base_count = (classnames.size() + 1) / 2;
  std::vector<std::string> base(classnames.begin(),
                                classnames.begin() + static_cast<std::ptrdiff_t>(base_count));
  std::vector<std::string> novel(classnames.begin() + static_cast<std::ptrdiff_t>(base_count),
                                 classnames.end());
  return {ClassSet(std::move(base)), ClassSet(std::move(novel))};
}

}  // namespace kdpl
