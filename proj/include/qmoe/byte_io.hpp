#pragma once

// Little-endian fixed-width reads and writes for the on-disk formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "qmoe/error.hpp"

namespace qmoe::io {

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  std::array<char, sizeof(T)> buf{};
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFFu);
  out.write(buf.data(), buf.size());
}

inline void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }

inline void write_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

template <typename T>
T read_le(std::istream& in, const char* what) {
  static_assert(std::is_integral_v<T>);
  std::array<unsigned char, sizeof(T)> buf{};
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) fail(Errc::corrupt_data, std::string("truncated input while reading ") + what);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline double read_f64(std::istream& in, const char* what) { return std::bit_cast<double>(read_le<std::uint64_t>(in, what)); }

// Returns false on clean end of stream before any byte was read.
inline bool read_magic(std::istream& in, std::string_view magic, const char* what) {
  std::string buf(magic.size(), '\0');
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() == 0 && in.eof()) return false;
  if (in.gcount() != static_cast<std::streamsize>(buf.size()) || buf != magic)
    fail(Errc::corrupt_data, std::string("bad magic in ") + what);
  return true;
}

}  // namespace qmoe::io
