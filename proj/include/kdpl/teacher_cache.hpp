// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include "kdpl/autodiff.hpp"
#include "kdpl/digest.hpp"
#include "kdpl/errors.hpp"

namespace kdpl {

// Persistent teacher-prediction store. File layout:
//   "KDPLTC01"
//   records:  [u32 id_len][id][32B class-set digest][u32 C][C x f64 probs]
//   index:    "KDPLIX01" [u64 n] n x ([u32 id_len][id][32B digest][u64 offset])
//   trailer:  [u64 index_offset] "KDPLTC99"
// Records are append-only; the index footer is rewritten on save.
class TeacherPredictionCache {
public:
  using Key = std::pair<std::string, Digest>;  // (image id, class-set digest)

  TeacherPredictionCache() = default;
  TeacherPredictionCache(TeacherPredictionCache&& other) noexcept { *this = std::move(other); }
  TeacherPredictionCache& operator=(TeacherPredictionCache&& other) noexcept {
    if (this != &other) {
      std::scoped_lock lock(mu_, other.mu_);
      entries_ = std::move(other.entries_);
      hits_ = other.hits_;
      misses_ = other.misses_;
    }
    return *this;
  }

  std::optional<Vector> lookup(const std::string& image_id, const Digest& digest) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find({image_id, digest});
    if (it == entries_.end()) {
      ++misses_;
      return std::nullopt;
    }
    ++hits_;
    return it->second;
  }

  void store(const std::string& image_id, const Digest& digest, const Vector& probs) {
    std::unique_lock lock(mu_);
    entries_[{image_id, digest}] = probs;
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }
  std::uint64_t hits() const { return hits_; }
  std::uint64_t misses() const { return misses_; }

  void save(const std::string& path) const {
    std::shared_lock lock(mu_);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CacheError("cannot open cache for write: " + path);
    out.write(kMagic, 8);
    std::vector<std::pair<Key, std::uint64_t>> index;
    for (const auto& [key, probs] : entries_) {
      index.emplace_back(key, static_cast<std::uint64_t>(out.tellp()));
      write_u32(out, static_cast<std::uint32_t>(key.first.size()));
      out.write(key.first.data(), static_cast<std::streamsize>(key.first.size()));
      out.write(reinterpret_cast<const char*>(key.second.data()), 32);
      write_u32(out, static_cast<std::uint32_t>(probs.size()));
      out.write(reinterpret_cast<const char*>(probs.data()),
                static_cast<std::streamsize>(probs.size() * sizeof(double)));
    }
    std::uint64_t index_offset = static_cast<std::uint64_t>(out.tellp());
    out.write(kIndexMagic, 8);
    write_u64(out, static_cast<std::uint64_t>(index.size()));
    for (const auto& [key, offset] : index) {
      write_u32(out, static_cast<std::uint32_t>(key.first.size()));
      out.write(key.first.data(), static_cast<std::streamsize>(key.first.size()));
      out.write(reinterpret_cast<const char*>(key.second.data()), 32);
      write_u64(out, offset);
    }
    write_u64(out, index_offset);
    out.write(kTrailerMagic, 8);
    if (!out) throw CacheError("write failed: " + path);
  }

  /// Throws CacheError on any structural corruption; callers fall back to
  /// recomputation in that case.
  static TeacherPredictionCache load(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw CacheError("cannot open cache: " + path);
    std::streamoff file_size = in.tellg();
    if (file_size < 8 + 16) throw CacheError("cache file truncated: " + path);
    char magic[8];
    in.seekg(0);
    in.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw CacheError("bad cache magic: " + path);
    in.seekg(file_size - 16);
    std::uint64_t index_offset = read_u64(in);
    in.read(magic, 8);
    if (std::memcmp(magic, kTrailerMagic, 8) != 0)
      throw CacheError("missing index footer (interrupted write?): " + path);
    if (index_offset >= static_cast<std::uint64_t>(file_size))
      throw CacheError("index offset out of range: " + path);
    in.seekg(static_cast<std::streamoff>(index_offset));
    in.read(magic, 8);
    if (std::memcmp(magic, kIndexMagic, 8) != 0) throw CacheError("bad index magic: " + path);
    std::uint64_t n = read_u64(in);
    TeacherPredictionCache cache;
    std::vector<std::pair<Key, std::uint64_t>> index;
    for (std::uint64_t i = 0; i < n; ++i) {
      Key key = read_key(in, path);
      std::uint64_t off = read_u64(in);
      index.emplace_back(std::move(key), off);
    }
    for (const auto& [key, off] : index) {
      in.seekg(static_cast<std::streamoff>(off));
      Key stored = read_key(in, path);
      if (stored != key) throw CacheError("index/record hash mismatch: " + path);
      std::uint32_t c = read_u32(in);
      if (c == 0 || c > (1u << 24)) throw CacheError("implausible class count in record: " + path);
      Vector probs(static_cast<Eigen::Index>(c));
      in.read(reinterpret_cast<char*>(probs.data()),
              static_cast<std::streamsize>(c * sizeof(double)));
      if (!in) throw CacheError("record truncated: " + path);
      cache.entries_[key] = std::move(probs);
    }
    return cache;
  }

private:
  static constexpr const char* kMagic = "KDPLTC01";
  static constexpr const char* kIndexMagic = "KDPLIX01";
  static constexpr const char* kTrailerMagic = "KDPLTC99";

  static void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  static void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
  static std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }
  static std::uint64_t read_u64(std::ifstream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  }
  static Key read_key(std::ifstream& in, const std::string& path) {
    std::uint32_t len = read_u32(in);
    if (len > (1u << 20)) throw CacheError("implausible id length: " + path);
    std::string id(len, '\0');
    in.read(id.data(), len);
    Digest d{};
    in.read(reinterpret_cast<char*>(d.data()), 32);
    if (!in) throw CacheError("key truncated: " + path);
    return {std::move(id), d};
  }

  std::map<Key, Vector> entries_;
  mutable std::shared_mutex mu_;
  mutable std::uint64_t hits_ = 0;
  mutable std::uint64_t misses_ = 0;
};

}  // namespace kdpl
