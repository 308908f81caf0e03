#pragma once

#include <random>

#include "ostrack/ostrack.hpp"

namespace testutil {

using namespace ostrack;

template <class T = float>
Tensor<T> random_tensor(Shape shape, std::mt19937& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>(std::move(shape), std::move(v), grad);
}

template <class T = float>
ImagePatchGrid<T> random_image(std::size_t size, std::size_t patch, std::mt19937& rng, ImageRole role) {
  return ImagePatchGrid<T>(role, random_tensor<T>({3, size, size}, rng), patch);
}

/// Tiny model: 4×4 patches, 8×8 template (2×2 grid), 16×16 search (4×4 grid).
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.depth = 3;
  c.mlp_ratio = 2;
  c.template_size = 8;
  c.search_size = 16;
  c.elimination_layers = {2};
  c.keep_ratio = 0.5;
  c.head_stages = 2;
  return c;
}

template <class T = float>
EncoderLayerParams<T> random_layer(std::size_t d, std::size_t ratio, std::mt19937& rng, double s = 0.5) {
  EncoderLayerParams<T> p;
  p.ln1_gamma = random_tensor<T>({d}, rng, 0.5, 1.5);
  p.ln1_beta = random_tensor<T>({d}, rng, -s, s);
  p.attn.qkv_weight = random_tensor<T>({d, 3 * d}, rng, -s, s);
  p.attn.qkv_bias = random_tensor<T>({3 * d}, rng, -s, s);
  p.attn.proj_weight = random_tensor<T>({d, d}, rng, -s, s);
  p.attn.proj_bias = random_tensor<T>({d}, rng, -s, s);
  p.ln2_gamma = random_tensor<T>({d}, rng, 0.5, 1.5);
  p.ln2_beta = random_tensor<T>({d}, rng, -s, s);
  p.fc1_weight = random_tensor<T>({d, ratio * d}, rng, -s, s);
  p.fc1_bias = random_tensor<T>({ratio * d}, rng, -s, s);
  p.fc2_weight = random_tensor<T>({ratio * d, d}, rng, -s, s);
  p.fc2_bias = random_tensor<T>({d}, rng, -s, s);
  return p;
}

template <class T = float>
TokenState<T> random_state(std::size_t nz, std::size_t nx, std::size_t d, std::mt19937& rng) {
  TokenState<T> s;
  s.tokens = random_tensor<T>({nz + nx, d}, rng);
  s.template_count = nz;
  s.search_full_count = nx;
  for (std::size_t i = 0; i < nx; ++i) s.search_orig_index.push_back(i);
  return s;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace testutil
