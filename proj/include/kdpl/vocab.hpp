// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "kdpl/errors.hpp"

namespace kdpl {

/// Large class-name vocabulary with stable ordering. Names are lowercased,
/// trimmed, and deduplicated keeping the first occurrence.
struct ClassVocabulary {
  std::vector<std::string> names;
  int dropped_duplicates = 0;

  int size() const { return static_cast<int>(names.size()); }

  static std::string normalize(const std::string& raw) {
    std::size_t b = 0, e = raw.size();
    while (b < e && std::isspace(static_cast<unsigned char>(raw[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(raw[e - 1]))) --e;
    std::string s = raw.substr(b, e - b);
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  }

  static ClassVocabulary from_names(const std::vector<std::string>& raw) {
    ClassVocabulary v;
    std::unordered_set<std::string> seen;
    for (const auto& r : raw) {
      std::string n = normalize(r);
      if (n.empty()) continue;
      if (!seen.insert(n).second) {
        ++v.dropped_duplicates;
        continue;
      }
      v.names.push_back(std::move(n));
    }
    return v;
  }

  /// UTF-8 text, one class name per line; lines starting with '#' ignored.
  static ClassVocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary: " + path);
    std::vector<std::string> raw;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      std::string n = normalize(line);
      if (n.empty() || n[0] == '#') continue;
      raw.push_back(line);
    }
    return from_names(raw);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary: " + path);
    for (const auto& n : names) out << n << "\n";
  }

  int index_of(const std::string& name) const {
    std::string n = normalize(name);
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == n) return static_cast<int>(i);
    return -1;
  }
};

}  // namespace kdpl
