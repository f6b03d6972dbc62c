#pragma once

// Little-endian field encoding shared by the binary file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "pnr/error.hpp"

namespace pnr::detail {

inline void store_u16(unsigned char* p, std::uint16_t v) noexcept {
  p[0] = static_cast<unsigned char>(v);
  p[1] = static_cast<unsigned char>(v >> 8);
}

inline void store_u64(unsigned char* p, std::uint64_t v) noexcept {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}

inline std::uint16_t load_u16(const unsigned char* p) noexcept {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint64_t load_u64(const unsigned char* p) noexcept {
  if constexpr (std::endian::native == std::endian::little) {
    std::uint64_t v;
    std::memcpy(&v, p, 8);
    return v;
  } else {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
}

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}
  void bytes(const void* data, std::size_t n) {
    os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!os_) fail(ErrorCategory::io, "write failed");
  }
  void u16(std::uint16_t v) {
    unsigned char b[2];
    store_u16(b, v);
    bytes(b, 2);
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    store_u64(b, v);
    bytes(b, 8);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

 private:
  std::ostream& os_;
};

// Reads fixed-size fields and reports the byte offset of any short read.
class BinaryReader {
 public:
  BinaryReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}
  void bytes(void* data, std::size_t n) {
    is_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      std::ostringstream os;
      os << what_ << " truncated at byte offset " << offset_ + static_cast<std::uint64_t>(is_.gcount())
         << " (needed " << n << " more bytes)";
      fail(ErrorCategory::format, os.str());
    }
    offset_ += n;
  }
  std::uint16_t u16() {
    unsigned char b[2];
    bytes(b, 2);
    return load_u16(b);
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    return load_u64(b);
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::istream& is_;
  std::string what_;
  std::uint64_t offset_ = 0;
};

}  // namespace pnr::detail
