#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "opd/common.hpp"

// Little-endian binary primitives shared by the feature-store, checkpoint and
// score-file formats.
namespace opd::io {

template <typename T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is, std::string_view what) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T)))
    throw FormatError("unexpected end of file while reading " + std::string(what));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void put_bytes(std::ostream& os, std::string_view s) { os.write(s.data(), static_cast<std::streamsize>(s.size())); }

inline std::string get_bytes(std::istream& is, std::size_t n, std::string_view what) {
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n)))
    throw FormatError("unexpected end of file while reading " + std::string(what));
  return s;
}

// u16 length prefix followed by the raw bytes.
inline void put_short_string(std::ostream& os, std::string_view s) {
  if (s.size() > 0xFFFF) throw FormatError("string longer than 65535 bytes: " + std::string(s.substr(0, 32)));
  put_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
  put_bytes(os, s);
}

inline std::string get_short_string(std::istream& is, std::string_view what) {
  auto n = get_le<std::uint16_t>(is, what);
  return get_bytes(is, n, what);
}

inline void expect_magic(std::istream& is, std::string_view magic, std::string_view what) {
  std::string got = get_bytes(is, magic.size(), what);
  if (got != magic) throw FormatError(std::string(what) + ": bad magic, expected \"" + std::string(magic) + "\"");
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open for reading: " + path);
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path);
  return out;
}

inline std::string read_file(const std::string& path) {
  auto in = open_in(path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace opd::io
