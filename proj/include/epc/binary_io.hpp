#pragma once

// Little-endian primitives shared by the EPCT/EPCD/EPCS/EPCM file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace epc {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

/// Malformed or truncated binary payload.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

template <typename V>
void write_le(std::ostream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
bool try_read_le(std::istream& in, V& value) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&value), sizeof(V)));
}

template <typename V>
V read_le(std::istream& in, const char* what) {
  V value{};
  if (!try_read_le(in, value)) throw FormatError(std::string("truncated input while reading ") + what);
  return value;
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  char got[4] = {};
  if (!in.read(got, 4)) throw FormatError(std::string("missing ") + magic + " header");
  if (std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic: expected ") + magic + ", got '" + std::string(got, 4) + "'");
  }
}

}  // namespace io
}  // namespace epc
