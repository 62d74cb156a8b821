#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "comad/errors.hpp"

namespace comad {

// Little-endian primitive IO shared by the dataset and checkpoint formats.
namespace bin {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out = 0;
    auto* s = reinterpret_cast<unsigned char*>(&v);
    auto* d = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) d[i] = s[sizeof(U) - 1 - i];
    return out;
  }
}

template <typename U>
void write_scalar(std::ostream& out, U v) {
  const U le = to_little(v);
  out.write(reinterpret_cast<const char*>(&le), sizeof(U));
  if (!out) throw IoError("write failed");
}

template <typename U>
U read_scalar(std::istream& in, const char* what) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(U)))
    throw IoError(std::string("truncated file while reading ") + what);
  return to_little(v);
}

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed");
}

inline void read_bytes(std::istream& in, void* p, std::size_t n,
                       const char* what) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw IoError(std::string("truncated file while reading ") + what);
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

inline std::string read_string(std::istream& in, const char* what) {
  const auto n = read_scalar<std::uint32_t>(in, what);
  std::string s(n, '\0');
  if (n) read_bytes(in, s.data(), n, what);
  return s;
}

// Element-at-a-time so the byte order is explicit regardless of host.
template <typename T>
void write_array(std::ostream& out, const T* p, std::int64_t n) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (std::int64_t i = 0; i < n; ++i) {
    U bits;
    std::memcpy(&bits, &p[i], sizeof(T));
    write_scalar<U>(out, bits);
  }
}

template <typename T>
void read_array(std::istream& in, T* p, std::int64_t n, const char* what) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (std::int64_t i = 0; i < n; ++i) {
    const U bits = read_scalar<U>(in, what);
    std::memcpy(&p[i], &bits, sizeof(T));
  }
}

}  // namespace bin

}  // namespace comad
