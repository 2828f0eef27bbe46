#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "ugnn/errors.hpp"

namespace ugnn::io {

template <typename T>
T byteswap(T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

template <typename T>
void write_le(std::ostream& out, T value) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) value = byteswap(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& what) {
  T value{};
  const auto offset = static_cast<long long>(in.tellg());
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw DataError(what + ": truncated at byte offset " + std::to_string(offset));
  }
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) value = byteswap(value);
  return value;
}

template <typename T>
void write_be(std::ostream& out, T value) {
  if constexpr (std::endian::native == std::endian::little && sizeof(T) > 1) value = byteswap(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_be(std::istream& in, const std::string& what) {
  T value{};
  const auto offset = static_cast<long long>(in.tellg());
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw DataError(what + ": truncated at byte offset " + std::to_string(offset));
  }
  if constexpr (std::endian::native == std::endian::little && sizeof(T) > 1) value = byteswap(value);
  return value;
}

// Writes `contents` to `path` via a temporary file and rename.
void atomic_write(const std::string& path, const std::string& contents);

}  // namespace ugnn::io
