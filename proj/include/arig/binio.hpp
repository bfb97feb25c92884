#pragma once

// Little-endian byte encoding used by every on-disk format.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "arig/error.hpp"

namespace arig {

inline std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::uint32_t fourcc(const char (&tag)[5]) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(tag[0])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(tag[1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(tag[2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(tag[3])) << 24;
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { buf_.append(s); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  void floats(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  // Length-prefixed float array.
  void float_vec(std::span<const float> v) {
    u64(v.size());
    floats(v);
  }

  // Section = u32 tag, u64 payload length, payload.
  std::size_t begin_section(std::uint32_t tag) {
    u32(tag);
    const std::size_t at = buf_.size();
    u64(0);
    return at;
  }
  void end_section(std::size_t at) {
    const std::uint64_t len = buf_.size() - at - 8;
    for (int i = 0; i < 8; ++i) buf_[at + i] = static_cast<char>(len >> (8 * i));
  }

  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }
  std::size_t size() const { return buf_.size(); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() {
    const std::uint32_t n = u32();
    return std::string(raw(n));
  }
  void floats(std::span<float> out) {
    need(out.size() * 4);
    for (float& x : out) x = f32();
  }
  std::vector<float> float_vec(std::size_t max_len = (std::size_t{1} << 32)) {
    const std::uint64_t n = u64();
    if (n > max_len || n * 4 > remaining()) throw FormatError("float array length out of range");
    std::vector<float> v(n);
    floats(v);
    return v;
  }

  // Returns a reader over the payload of the next section, which must carry `tag`.
  ByteReader section(std::uint32_t tag) {
    const std::uint32_t got = u32();
    if (got != tag) throw FormatError("unexpected section tag");
    const std::uint64_t len = u64();
    if (len > remaining()) throw FormatError("section length exceeds data");
    return ByteReader(raw(len));
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void expect_done(const char* what) const {
    if (!done()) throw FormatError(std::string(what) + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError("truncated data");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for " + path);
}

}  // namespace arig
