#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capsworld/errors.hpp"

namespace capsworld::io {

/// Little-endian byte sink.
class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char raw[sizeof(U)];
    std::memcpy(raw, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(U));
  }

  void put_f32s(std::span<const float> values) {
    for (float v : values) put(v);
  }

  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  const std::vector<unsigned char>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

/// Bounds-checked little-endian byte source; failures report the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    require(sizeof(U), what);
    unsigned char raw[sizeof(U)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, raw, sizeof(U));
    return v;
  }

  void get_f32s(std::vector<float>& out, std::uint64_t count, const char* what) {
    if (count > remaining() / sizeof(float)) {
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
    out.resize(count);
    for (auto& v : out) v = get<float>(what);
  }

  std::string get_bytes(std::uint64_t count, const char* what) {
    require(count, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), count);
    pos_ += count;
    return s;
  }

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void require(std::uint64_t n, const char* what) const {
    if (n > remaining()) throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }

  std::span<const unsigned char> bytes_;
  std::uint64_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const unsigned char> bytes);

}  // namespace capsworld::io
