#pragma once

// Little-endian fixed-width encoding, independent of host byte order.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "mbrec/errors.hpp"

namespace mbrec::binary {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char buf[4];
  for (int k = 0; k < 4; ++k) buf[k] = static_cast<char>((v >> (8 * k)) & 0xFFu);
  out.write(buf, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int k = 0; k < 8; ++k) buf[k] = static_cast<char>((v >> (8 * k)) & 0xFFu);
  out.write(buf, 8);
}

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& in, char* buf, std::size_t n) {
  in.read(buf, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw DataError("binary stream truncated");
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char buf[4];
  read_exact(in, reinterpret_cast<char*>(buf), 4);
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(buf[k]) << (8 * k);
  return v;
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char buf[8];
  read_exact(in, reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(buf[k]) << (8 * k);
  return v;
}

inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

inline std::string get_string(std::istream& in, std::size_t max_len = 1u << 20) {
  const auto n = get_u32(in);
  if (n > max_len) throw DataError("binary stream: string length out of range");
  std::string s(n, '\0');
  read_exact(in, s.data(), n);
  return s;
}

}  // namespace mbrec::binary
