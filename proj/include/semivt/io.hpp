#pragma once

#include "semivt/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace semivt::io {

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
  if (!out) throw DataError("failed writing " + p.string());
}

/// Appends float32 values in little-endian byte order.
inline void append_f32_le(std::string& buf, std::span<const float> values) {
  const std::size_t start = buf.size();
  buf.resize(start + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(buf.data() + start + i * 4, &u, 4);
  }
}

/// Decodes `out.size()` little-endian float32 values from `bytes`.
inline void decode_f32_le(const char* bytes, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, bytes + i * 4, 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    out[i] = std::bit_cast<float>(u);
  }
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ull;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

}  // namespace semivt::io
