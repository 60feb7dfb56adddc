#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace vndiff::io {

// Little-endian encoding of arithmetic values regardless of host order.
template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
  static_assert(std::is_arithmetic_v<T>);
  std::byte raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
  }
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get_le(const std::byte* in) {
  static_assert(std::is_arithmetic_v<T>);
  std::byte raw[sizeof(T)];
  std::memcpy(raw, in, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

void put_floats_le(std::vector<std::byte>& out, std::span<const float> values);
void get_floats_le(const std::byte* in, std::span<float> values);

std::vector<std::byte> read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace vndiff::io
