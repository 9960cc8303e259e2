// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/sha.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace kdpl {

/// 32-byte SHA-256 digest used to identify class-set content.
using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256_bytes(const void* data, std::size_t n) {
  Digest out{};
  SHA256(static_cast<const unsigned char*>(data), n, out.data());
  return out;
}

/// Content hash of an ordered name list. Names are length-prefixed so that
/// ["ab","c"] and ["a","bc"] cannot collide.
inline Digest digest_of_names(const std::vector<std::string>& names) {
  std::string buf;
  for (const auto& n : names) {
    std::uint32_t len = static_cast<std::uint32_t>(n.size());
    char lenb[4];
    std::memcpy(lenb, &len, 4);
    buf.append(lenb, 4);
    buf.append(n);
  }
  return sha256_bytes(buf.data(), buf.size());
}

inline std::string digest_hex(const Digest& d) {
  static const char* k = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : d) {
    s.push_back(k[b >> 4]);
    s.push_back(k[b & 0xf]);
  }
  return s;
}

}  // namespace kdpl
