#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <string_view>

#include <openssl/sha.h>

namespace cfmplan {

inline std::string hex(const unsigned char* bytes, std::size_t n) {
  std::string out;
  out.reserve(2 * n);
  char buf[3];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", bytes[i]);
    out += buf;
  }
  return out;
}

inline std::string sha1_hex(std::string_view data) {
  std::array<unsigned char, SHA_DIGEST_LENGTH> md{};
  SHA1(reinterpret_cast<const unsigned char*>(data.data()), data.size(), md.data());
  return hex(md.data(), md.size());
}

/// Same digest `git hash-object` reports for a file with these bytes.
inline std::string git_blob_hash(std::string_view content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob.append(content);
  return sha1_hex(blob);
}

}  // namespace cfmplan
