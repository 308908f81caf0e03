#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "ostrack/ops.hpp"

namespace ostrack {

/// Post-softmax attention weights of one layer, one N×N matrix per head.
template <class T = float>
struct AttentionRecord {
  std::size_t layer = 0;                      // 1-based
  std::vector<Tensor<T>> heads;               // M entries, each N×N
  std::size_t template_count = 0;
  std::vector<std::size_t> search_orig_index;  // search layout the weights were computed over

  std::size_t tokens() const { return heads.empty() ? 0 : heads.front().dim(0); }
};

template <class T = float>
struct AttentionParams {
  Tensor<T> qkv_weight;  // D × 3D, columns [Q | K | V]
  Tensor<T> qkv_bias;    // 3D
  Tensor<T> proj_weight;  // D × D
  Tensor<T> proj_bias;    // D
};

template <class T>
struct AttentionOutput {
  Tensor<T> out;
  AttentionRecord<T> record;
};

/// Softmax(QKᵀ/√d_k)·V per head, heads concatenated and projected.
/// With `mask_split`, rows and columns on different sides of the split never attend to each other.
template <class T>
AttentionOutput<T> multi_head_attention(const Tensor<T>& tokens, const AttentionParams<T>& params, std::size_t num_heads,
                                        std::optional<std::size_t> mask_split = std::nullopt) {
  if (tokens.rank() != 2) throw DimensionError("attention expects N×D tokens");
  const auto d = tokens.dim(1);
  if (params.qkv_weight.dim(0) != d || params.qkv_weight.dim(1) != 3 * d || params.proj_weight.dim(0) != d) {
    throw DimensionError("attention parameters do not match token dim " + std::to_string(d));
  }
  if (num_heads == 0 || d % num_heads != 0) throw DimensionError("token dim not divisible by head count");
  const auto dk = d / num_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
  auto qkv = linear(tokens, params.qkv_weight, params.qkv_bias);
  AttentionOutput<T> result;
  std::vector<Tensor<T>> head_out;
  head_out.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    auto q = slice_cols(qkv, h * dk, (h + 1) * dk);
    auto k = slice_cols(qkv, d + h * dk, d + (h + 1) * dk);
    auto v = slice_cols(qkv, 2 * d + h * dk, 2 * d + (h + 1) * dk);
    auto scores = scale(matmul_nt(q, k), inv_sqrt);
    auto weights = mask_split ? block_masked_softmax(scores, *mask_split) : softmax(scores, 1);
    head_out.push_back(matmul(weights, v));
    result.record.heads.push_back(weights);
  }
  auto merged = num_heads == 1 ? head_out.front() : concat_cols<T>(head_out);
  result.out = linear(merged, params.proj_weight, params.proj_bias);
  return result;
}

}  // namespace ostrack
