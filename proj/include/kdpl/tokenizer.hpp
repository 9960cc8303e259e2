// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

namespace kdpl {

/// Lowercases and splits on whitespace; each word maps to a fixed id via
/// FNV-1a mod vocab_size. Real backbone adapters may substitute their own
/// tokenization behind the same id contract.
class Tokenizer {
public:
  explicit Tokenizer(int vocab_size) : vocab_size_(vocab_size) {}

  static std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  int word_id(const std::string& word) const {
    std::string lower;
    lower.reserve(word.size());
    for (unsigned char c : word) lower.push_back(static_cast<char>(std::tolower(c)));
    return static_cast<int>(fnv1a(lower) % static_cast<std::uint64_t>(vocab_size_));
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    std::string word;
    for (char ch : text) {
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!word.empty()) {
          ids.push_back(word_id(word));
          word.clear();
        }
      } else {
        word.push_back(ch);
      }
    }
    if (!word.empty()) ids.push_back(word_id(word));
    return ids;
  }

  int vocab_size() const { return vocab_size_; }

private:
  int vocab_size_;
};

}  // namespace kdpl
