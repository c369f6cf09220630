#pragma once

// Little-endian primitives shared by the binary formats (field dumps,
// dataset containers, checkpoints).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

namespace mflow::binio {

template <typename U>
void put_le(std::ostream& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
bool get_le(std::istream& in, U& value) {
  static_assert(std::is_unsigned_v<U>);
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) return false;
  value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return true;
}

inline void put_f32(std::ostream& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }

inline bool get_f32(std::istream& in, float& v) {
  std::uint32_t bits = 0;
  if (!get_le(in, bits)) return false;
  v = std::bit_cast<float>(bits);
  return true;
}

inline void put_f32s(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) put_f32(out, v);
  }
}

inline bool get_f32s(std::istream& in, std::span<float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    return static_cast<bool>(
        in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes())));
  } else {
    for (float& v : values) {
      if (!get_f32(in, v)) return false;
    }
    return true;
  }
}

inline void put_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline bool check_magic(std::istream& in, const char (&magic)[5]) {
  char buf[4] = {};
  return in.read(buf, 4) && std::memcmp(buf, magic, 4) == 0;
}

}  // namespace mflow::binio
