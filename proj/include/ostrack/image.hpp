#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ostrack/embedder.hpp"

namespace ostrack {

struct ImageIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// 8-bit RGB image, interleaved, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }

  std::array<double, 3> channel_mean() const {
    std::array<double, 3> m{0.0, 0.0, 0.0};
    if (rgb.empty()) return m;
    for (std::size_t i = 0; i < rgb.size(); ++i) m[i % 3] += rgb[i];
    for (auto& v : m) v /= static_cast<double>(width * height);
    return m;
  }
};

namespace detail {

inline void skip_ws_and_comments(std::istream& is) {
  for (;;) {
    const int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
      is.get();
    } else {
      return;
    }
  }
}

inline std::size_t read_header_int(std::istream& is) {
  skip_ws_and_comments(is);
  std::size_t v = 0;
  if (!(is >> v)) throw ImageIoError("malformed PNM header");
  return v;
}

}  // namespace detail

/// Reads a binary P6 PPM with maxval 255.
inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageIoError("cannot open " + path);
  std::string magic(2, '\0');
  if (!is.read(magic.data(), 2) || magic != "P6") throw ImageIoError(path + ": not a P6 PPM");
  const auto w = detail::read_header_int(is);
  const auto h = detail::read_header_int(is);
  const auto maxval = detail::read_header_int(is);
  if (maxval != 255) throw ImageIoError(path + ": only maxval 255 supported");
  is.get();  // single whitespace before raster
  Image img(w, h);
  if (!is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()))) {
    throw ImageIoError(path + ": truncated raster");
  }
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageIoError("cannot write " + path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

/// Binary P5 PGM from row-major 8-bit values.
inline void write_pgm(const std::string& path, std::size_t w, std::size_t h, const std::vector<std::uint8_t>& gray) {
  if (gray.size() != w * h) throw ImageIoError("pgm size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageIoError("cannot write " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

/// 3×H×W tensor with values scaled from [0, 255] to [-1, 1].
template <class T = float>
Tensor<T> to_tensor(const Image& img) {
  std::vector<T> out(3 * img.width * img.height);
  const auto plane = img.width * img.height;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out[c * plane + y * img.width + x] = static_cast<T>(img.at(x, y, c) / 127.5 - 1.0);
  return Tensor<T>({3, img.height, img.width}, std::move(out));
}

}  // namespace ostrack
