#pragma once

// Little-endian byte-stream primitives shared by the SGMC checkpoint and
// SGMQ model codecs. Internal to core; not installed.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "sgm/errors.hpp"

namespace sgm::io {

struct ByteWriter {
  std::vector<std::uint8_t> buf;

  void u8(std::uint8_t v) { buf.push_back(v); }
  void u16(std::uint16_t v) {
    buf.push_back(std::uint8_t(v));
    buf.push_back(std::uint8_t(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
  }
  void i8(std::int8_t v) { u8(static_cast<std::uint8_t>(v)); }
  void i16(std::int16_t v) { u16(static_cast<std::uint16_t>(v)); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void str16(const std::string& s) {
    if (s.size() > 0xffff) throw std::invalid_argument("string too long for u16 length");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  // Appends the CRC32 (zlib polynomial) of everything written so far.
  void crc_trailer() {
    const auto c = static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    u32(c);
  }
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  std::size_t offset() const { return off_; }
  std::size_t remaining() const { return data_.size() - off_; }

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    const auto* p = take(2);
    return std::uint16_t(p[0]) | (std::uint16_t(p[1]) << 8);
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::int8_t i8() { return static_cast<std::int8_t>(u8()); }
  std::int16_t i16() { return static_cast<std::int16_t>(u16()); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str16() {
    const std::size_t n = u16();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  const std::uint8_t* take(std::size_t n) {
    if (remaining() < n) {
      throw DataError(what_ + ": truncated at byte " + std::to_string(off_) + " (need " +
                      std::to_string(n) + " more, have " + std::to_string(remaining()) + ")");
    }
    const std::uint8_t* p = data_.data() + off_;
    off_ += n;
    return p;
  }
  void expect_exhausted() {
    if (remaining() != 0) {
      throw DataError(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
    }
  }

 private:
  std::span<const std::uint8_t> data_;
  std::string what_;
  std::size_t off_ = 0;
};

// Validates the 4-byte CRC32 trailer and returns the payload in front of it.
inline std::span<const std::uint8_t> checked_payload(std::span<const std::uint8_t> file,
                                                     const std::string& what) {
  if (file.size() < 4) throw DataError(what + ": too short for a CRC trailer");
  const std::size_t n = file.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 3; i >= 0; --i) stored = (stored << 8) | file[n + i];
  const auto computed = static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(file.data()), static_cast<uInt>(n)));
  if (stored != computed) {
    throw DataError(what + ": CRC mismatch (file corrupt)");
  }
  return file.subspan(0, n);
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace sgm::io
