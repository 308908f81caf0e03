#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ostrack/tensor.hpp"

namespace ostrack {

/// Error reading or writing a weight file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Weight file layout, all integers little-endian:
///   "OST1" | u32 version | u32 count | count × { u16 name_len | name | u8 rank | u32 dims[rank] | f32 payload }
namespace weights {

inline constexpr char kMagic[4] = {'O', 'S', 'T', '1'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <class U>
void put(std::ostream& os, U value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts not supported");
  os.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <class U>
U get(std::istream& is) {
  U value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(U))) throw FormatError("weight file truncated");
  return value;
}

}  // namespace detail

template <class T>
void write(std::ostream& os, const std::vector<std::pair<std::string, Tensor<T>>>& named) {
  os.write(kMagic, 4);
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name);
    if (t.rank() > 0xFF) throw FormatError("tensor rank too large: " + name);
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (const auto d : t.shape()) detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (const T v : t.data()) detail::put<float>(os, static_cast<float>(v));
  }
  if (!os) throw FormatError("failed writing weights");
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad weight file magic");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kVersion) throw FormatError("unsupported weight file version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is);
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint16_t>(is);
    std::string name(len, '\0');
    if (len && !is.read(name.data(), len)) throw FormatError("weight file truncated in name");
    const auto rank = detail::get<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint32_t>(is);
    std::vector<T> data(numel(shape));
    for (auto& v : data) v = static_cast<T>(detail::get<float>(is));
    out.emplace_back(std::move(name), Tensor<T>(std::move(shape), std::move(data)));
  }
  return out;
}

template <class T>
void save(const std::string& path, const std::vector<std::pair<std::string, Tensor<T>>>& named) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write(os, named);
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read<T>(is);
}

}  // namespace weights
}  // namespace ostrack
