// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitives shared by the RVQL / RVQC / RVQR file formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "revq/core.hpp"

namespace revq::binary {

class Writer {
 public:
  void magic(std::string_view m) { buf_.insert(buf_.end(), m.begin(), m.end()); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

inline void save_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatErrorKind::Io, "cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError(FormatErrorKind::Io, "write failed for '" + path + "'");
}

inline std::vector<char> load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatErrorKind::Io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Bounds-checked cursor over an in-memory file image.
class Reader {
 public:
  Reader(const std::vector<char>& bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  void expect_magic(std::string_view m) {
    require(m.size(), "magic");
    if (std::string_view(bytes_.data() + pos_, m.size()) != m) {
      throw FormatError(FormatErrorKind::BadMagic,
                        context_ + ": expected magic '" + std::string(m) + "'");
    }
    pos_ += m.size();
  }

  void expect_version(std::uint32_t supported) {
    const auto v = u32();
    if (v != supported) {
      throw FormatError(FormatErrorKind::UnsupportedVersion,
                        context_ + ": version " + std::to_string(v) + ", expected " +
                            std::to_string(supported));
    }
  }

  std::uint32_t u32() {
    require(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{byte_at(pos_ + i)} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    require(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{byte_at(pos_ + i)} << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }

  /// Throws Truncated naming the total expected vs actual size when fewer
  /// than `n` bytes remain.
  void require(std::size_t n, std::string_view what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatErrorKind::Truncated,
                        context_ + ": expected " + std::to_string(pos_ + n) + " bytes reading " +
                            std::string(what) + ", file has " + std::to_string(bytes_.size()));
    }
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& context() const { return context_; }

 private:
  std::uint8_t byte_at(std::size_t i) const { return static_cast<std::uint8_t>(bytes_[i]); }

  const std::vector<char>& bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace revq::binary
