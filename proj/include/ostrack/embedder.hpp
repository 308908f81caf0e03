#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "ostrack/ops.hpp"
#include "ostrack/tensor.hpp"

namespace ostrack {

enum class ImageRole { Template, Search };

/// A 3×H×W image (values in [-1, 1]) together with the patch size that tiles it.
template <class T = float>
struct ImagePatchGrid {
  ImageRole role = ImageRole::Search;
  Tensor<T> pixels;
  std::size_t patch = 16;

  ImagePatchGrid() = default;
  ImagePatchGrid(ImageRole r, Tensor<T> px, std::size_t p) : role(r), pixels(std::move(px)), patch(p) { validate(); }

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
  std::size_t grid_h() const { return height() / patch; }
  std::size_t grid_w() const { return width() / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }

  void validate() const {
    if (pixels.rank() != 3 || pixels.dim(0) != 3) throw DimensionError("image must be 3×H×W, got " + to_string(pixels.shape()));
    if (patch == 0 || height() % patch != 0 || width() % patch != 0) {
      throw DimensionError("image " + std::to_string(height()) + "×" + std::to_string(width()) +
                           " is not divisible by patch size " + std::to_string(patch));
    }
  }
};

/// Row i holds patch i = col + row·(W/P), flattened as (py, px, channel).
template <class T>
Tensor<T> patchify(const ImagePatchGrid<T>& img) {
  img.validate();
  const auto p = img.patch, h = img.height(), w = img.width(), gw = img.grid_w();
  const auto n = img.tokens(), len = 3 * p * p;
  const auto src = img.pixels.data();
  std::vector<T> out(n * len);
  for (std::size_t i = 0; i < n; ++i) {
    const auto gy = i / gw, gx = i % gw;
    for (std::size_t py = 0; py < p; ++py)
      for (std::size_t px = 0; px < p; ++px)
        for (std::size_t c = 0; c < 3; ++c)
          out[i * len + (py * p + px) * 3 + c] = src[(c * h + gy * p + py) * w + gx * p + px];
  }
  return Tensor<T>({n, len}, std::move(out));
}

/// Inverse of patchify for an image of size h×w.
template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t h, std::size_t w, std::size_t p) {
  if (h % p != 0 || w % p != 0) throw DimensionError("unpatchify: size not divisible by patch");
  const auto gw = w / p, n = (h / p) * gw, len = 3 * p * p;
  if (patches.rank() != 2 || patches.dim(0) != n || patches.dim(1) != len) {
    throw DimensionError("unpatchify: patch matrix " + to_string(patches.shape()) + " does not fit image");
  }
  std::vector<T> out(3 * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    const auto gy = i / gw, gx = i % gw;
    for (std::size_t py = 0; py < p; ++py)
      for (std::size_t px = 0; px < p; ++px)
        for (std::size_t c = 0; c < 3; ++c)
          out[(c * h + gy * p + py) * w + gx * p + px] = patches[i * len + (py * p + px) * 3 + c];
  }
  return Tensor<T>({3, h, w}, std::move(out));
}

/// Patch projection E[(3P²)×D] and the two learnable positional tables.
template <class T = float>
struct EmbedderParams {
  Tensor<T> projection;
  Tensor<T> pos_template;
  Tensor<T> pos_search;
};

/// Concatenated template+search tokens plus the bookkeeping that survives elimination.
template <class T = float>
struct TokenState {
  Tensor<T> tokens;                             // (N_z + n) × D
  std::size_t template_count = 0;               // N_z, rows [0, N_z) are template tokens
  std::vector<std::size_t> search_orig_index;   // ascending original positions of surviving search tokens
  std::size_t search_full_count = 0;            // N_x before any elimination

  std::size_t search_count() const { return search_orig_index.size(); }
  std::size_t dim() const { return tokens.dim(1); }

  void validate() const {
    if (tokens.rank() != 2 || tokens.dim(0) != template_count + search_count()) {
      throw InvariantError("token matrix rows do not match template + search counts");
    }
    if (search_count() > search_full_count) throw InvariantError("more search tokens than the original grid");
    for (std::size_t j = 0; j < search_orig_index.size(); ++j) {
      if (search_orig_index[j] >= search_full_count) throw InvariantError("search index out of range");
      if (j > 0 && search_orig_index[j] <= search_orig_index[j - 1]) {
        throw InvariantError("search indices must be unique and ascending");
      }
    }
  }
};

/// H⁰ = [z_p·E + P_z ; x_p·E + P_x], template first.
template <class T>
TokenState<T> embed_pair(const ImagePatchGrid<T>& z, const ImagePatchGrid<T>& x, const EmbedderParams<T>& params) {
  const auto zp = patchify(z);
  const auto xp = patchify(x);
  if (params.projection.rank() != 2 || params.projection.dim(0) != zp.dim(1) || zp.dim(1) != xp.dim(1)) {
    throw DimensionError("patch projection rows must equal 3·P²");
  }
  if (params.pos_template.dim(0) != zp.dim(0) || params.pos_search.dim(0) != xp.dim(0)) {
    throw DimensionError("positional tables (" + std::to_string(params.pos_template.dim(0)) + ", " +
                         std::to_string(params.pos_search.dim(0)) + ") do not match token counts (" +
                         std::to_string(zp.dim(0)) + ", " + std::to_string(xp.dim(0)) + ")");
  }
  auto hz = add(matmul(zp, params.projection), params.pos_template);
  auto hx = add(matmul(xp, params.projection), params.pos_search);
  TokenState<T> state;
  state.tokens = concat_rows(hz, hx);
  state.template_count = zp.dim(0);
  state.search_full_count = xp.dim(0);
  state.search_orig_index.resize(xp.dim(0));
  std::iota(state.search_orig_index.begin(), state.search_orig_index.end(), std::size_t{0});
  return state;
}

namespace detail {

/// Keys cubic convolution kernel with a = -0.75.
inline double cubic_weight(double t) {
  constexpr double a = -0.75;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

/// Sample of a 1D signal extended past its ends by linear extrapolation.
template <class Get>
double extended(Get get, std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return get(0);
  if (i < 0) return get(0) + static_cast<double>(i) * (get(1) - get(0));
  if (i >= n) return get(n - 1) + static_cast<double>(i - (n - 1)) * (get(n - 1) - get(n - 2));
  return get(i);
}

struct CubicTaps {
  std::ptrdiff_t base;
  double w[4];
};

/// Half-pixel-centred source coordinate for each destination index.
inline std::vector<CubicTaps> cubic_taps(std::size_t src, std::size_t dst) {
  std::vector<CubicTaps> taps(dst);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t d = 0; d < dst; ++d) {
    const double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    const double f = std::floor(s);
    const double t = s - f;
    taps[d].base = static_cast<std::ptrdiff_t>(f) - 1;
    for (int k = 0; k < 4; ++k) taps[d].w[k] = cubic_weight(t - static_cast<double>(k - 1));
  }
  return taps;
}

}  // namespace detail

/// Resamples a positional table laid out on an h₁×w₁ grid onto h₂×w₂, channel by channel,
/// with separable bicubic interpolation (Keys, a = −0.75). Borders are extended linearly.
template <class T>
Tensor<T> interpolate_pos_embed(const Tensor<T>& table, std::size_t h1, std::size_t w1, std::size_t h2,
                                std::size_t w2) {
  if (table.rank() != 2 || table.dim(0) != h1 * w1) {
    throw DimensionError("positional table " + to_string(table.shape()) + " does not match grid " + std::to_string(h1) +
                         "×" + std::to_string(w1));
  }
  if (h2 == 0 || w2 == 0) throw DimensionError("empty destination grid");
  if (h1 == h2 && w1 == w2) return table;
  const auto d = table.dim(1);
  const auto ty = detail::cubic_taps(h1, h2);
  const auto tx = detail::cubic_taps(w1, w2);
  const auto ih1 = static_cast<std::ptrdiff_t>(h1), iw1 = static_cast<std::ptrdiff_t>(w1);
  // Horizontal pass: h1 × w2 per channel, then vertical: h2 × w2.
  std::vector<double> mid(h1 * w2 * d);
  for (std::size_t y = 0; y < h1; ++y)
    for (std::size_t x = 0; x < w2; ++x)
      for (std::size_t c = 0; c < d; ++c) {
        auto get = [&](std::ptrdiff_t i) { return static_cast<double>(table[(y * w1 + static_cast<std::size_t>(i)) * d + c]); };
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += tx[x].w[k] * detail::extended(get, tx[x].base + k, iw1);
        mid[(y * w2 + x) * d + c] = acc;
      }
  std::vector<T> out(h2 * w2 * d);
  for (std::size_t y = 0; y < h2; ++y)
    for (std::size_t x = 0; x < w2; ++x)
      for (std::size_t c = 0; c < d; ++c) {
        auto get = [&](std::ptrdiff_t i) { return mid[(static_cast<std::size_t>(i) * w2 + x) * d + c]; };
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += ty[y].w[k] * detail::extended(get, ty[y].base + k, ih1);
        out[(y * w2 + x) * d + c] = static_cast<T>(acc);
      }
  return Tensor<T>({h2 * w2, d}, std::move(out));
}

}  // namespace ostrack
