#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cfmplan/diffcore/params.hpp"

namespace cfmplan::diff {

/// Named float blocks, the payload of checkpoint and vocabulary files.
using NamedBlocks = std::map<std::string, Tensor2>;

// Layout (all integers little-endian):
//   "CFMPBLK\0" | u32 version | u32 count
//   count x { u32 name_len | name bytes | u64 rows | u64 cols | rows*cols f64 }
inline constexpr std::array<char, 8> kContainerMagic{'C', 'F', 'M', 'P', 'B', 'L', 'K', '\0'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint64_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(path_ + ": " + what + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated container");
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_blocks(const NamedBlocks& blocks) {
  std::string out(kContainerMagic.begin(), kContainerMagic.end());
  detail::put_u32(out, kContainerVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, t] : blocks) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u64(out, t.rows);
    detail::put_u64(out, t.cols);
    for (double x : t.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

inline NamedBlocks decode_blocks(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  if (r.str(kContainerMagic.size()) != std::string(kContainerMagic.begin(), kContainerMagic.end())) {
    r.fail("bad magic");
  }
  const auto version = r.u(4);
  if (version != kContainerVersion) r.fail("unsupported container version " + std::to_string(version));
  const auto count = r.u(4);
  NamedBlocks blocks;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.u(4);
    std::string name = r.str(len);
    const auto rows = r.u(8);
    const auto cols = r.u(8);
    Tensor2 t(rows, cols);
    for (double& x : t.data) x = std::bit_cast<double>(r.u(8));
    if (!blocks.emplace(std::move(name), std::move(t)).second) r.fail("duplicate block name");
  }
  if (!r.done()) r.fail("trailing bytes");
  return blocks;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

inline void write_blocks(const std::filesystem::path& path, const NamedBlocks& blocks) {
  write_file(path, encode_blocks(blocks));
}

inline NamedBlocks read_blocks(const std::filesystem::path& path) {
  return decode_blocks(read_file(path), path.string());
}

inline NamedBlocks snapshot(const ParamStore& store) {
  NamedBlocks out;
  for (const auto& [name, b] : store.blocks()) out.emplace(name, b.value);
  return out;
}

/// Copy block values into an existing store; every store block must be present with its shape.
inline void restore(ParamStore& store, const NamedBlocks& blocks) {
  for (auto& [name, b] : store.blocks()) {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw ParseError("checkpoint missing block '" + name + "'");
    if (!it->second.same_shape(b.value)) {
      throw DimensionError("checkpoint block '" + name + "': " + it->second.shape() + " vs " + b.value.shape());
    }
    b.value = it->second;
  }
}

}  // namespace cfmplan::diff
