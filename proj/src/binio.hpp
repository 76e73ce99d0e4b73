#pragma once

// Little-endian primitives shared by the MCFT, MCDE and MCCK containers.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace microtune::binio {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  out.write(b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& out, double v) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_string(std::ostream& out, std::string_view s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline bool try_get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  std::uint32_t v;
  if (!try_get_u32(in, v)) throw FormatError(std::string("truncated ") + what);
  return v;
}

inline std::uint64_t get_u64(std::istream& in, const char* what) {
  const std::uint64_t lo = get_u32(in, what);
  const std::uint64_t hi = get_u32(in, what);
  return lo | (hi << 32);
}

inline double get_f32(std::istream& in, const char* what) {
  return static_cast<double>(std::bit_cast<float>(get_u32(in, what)));
}

inline double get_f64(std::istream& in, const char* what) { return std::bit_cast<double>(get_u64(in, what)); }

inline std::string get_string(std::istream& in, const char* what, std::uint32_t max_len = 1U << 20) {
  const std::uint32_t len = get_u32(in, what);
  if (len > max_len) throw FormatError(std::string("oversized string in ") + what);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (static_cast<std::uint32_t>(in.gcount()) != len) throw FormatError(std::string("truncated ") + what);
  return s;
}

inline void put_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), 4); }

/// Returns false on a clean end of stream before any magic byte.
inline bool try_get_magic(std::istream& in, std::string_view magic, const char* what) {
  char b[4];
  in.read(b, 4);
  if (in.gcount() == 0) return false;
  if (in.gcount() != 4 || std::string_view(b, 4) != magic)
    throw FormatError(std::string("bad magic in ") + what + ", expected " + std::string(magic));
  return true;
}

}  // namespace microtune::binio
