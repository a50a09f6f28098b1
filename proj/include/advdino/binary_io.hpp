#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "advdino/tensor.hpp"

namespace advdino::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class FormatError : public Error {
 public:
  using Error::Error;
};

template <class T>
void write_pod(std::ostream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw FormatError("unexpected end of stream");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::uint32_t max_len = 1u << 20) {
  auto n = read_pod<std::uint32_t>(is);
  if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("truncated string");
  return s;
}

inline void write_magic(std::ostream& os, const char (&magic)[5], std::uint32_t version) {
  os.write(magic, 4);
  write_pod<std::uint32_t>(os, version);
}

inline std::uint32_t read_magic(std::istream& is, const char (&magic)[5]) {
  char buf[4];
  if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
  return read_pod<std::uint32_t>(is);
}

// FNV-1a over a byte range; used for artifact digests.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace advdino::io
