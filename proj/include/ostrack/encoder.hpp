#pragma once

#include <optional>
#include <vector>

#include "ostrack/attention.hpp"
#include "ostrack/config.hpp"
#include "ostrack/elimination.hpp"
#include "ostrack/embedder.hpp"

namespace ostrack {

template <class T = float>
struct EncoderLayerParams {
  Tensor<T> ln1_gamma, ln1_beta;
  AttentionParams<T> attn;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> fc1_weight, fc1_bias;  // D × rD
  Tensor<T> fc2_weight, fc2_bias;  // rD × D
};

template <class T = float>
struct BackboneParams {
  std::vector<EncoderLayerParams<T>> layers;
  Tensor<T> norm_gamma, norm_beta;
};

template <class T>
struct LayerOutput {
  TokenState<T> state;
  AttentionRecord<T> record;
};

/// One pre-norm encoder layer: x + MHA(LN(x)), optional candidate elimination, then x + MLP(LN(x)).
/// Layers with index ≤ joint_start_layer keep template and search separated.
template <class T>
LayerOutput<T> encoder_layer_forward(const TokenState<T>& state, const EncoderLayerParams<T>& p, const ModelConfig& cfg,
                                     std::size_t layer_index, const TemplateLayout& layout) {
  std::optional<std::size_t> mask;
  if (layer_index <= cfg.joint_start_layer) mask = state.template_count;
  auto attn = multi_head_attention(layer_norm(state.tokens, p.ln1_gamma, p.ln1_beta), p.attn, cfg.num_heads, mask);
  attn.record.layer = layer_index;
  attn.record.template_count = state.template_count;
  attn.record.search_orig_index = state.search_orig_index;

  TokenState<T> mid = state;
  mid.tokens = add(state.tokens, attn.out);
  if (cfg.eliminates_at(layer_index) && cfg.keep_ratio < 1.0) {
    const auto scores = candidate_similarity(attn.record, mid, cfg.scoring, layout);
    mid = select_candidates(mid, scores, cfg.keep_ratio);
  }
  auto hidden = gelu(linear(layer_norm(mid.tokens, p.ln2_gamma, p.ln2_beta), p.fc1_weight, p.fc1_bias));
  mid.tokens = add(mid.tokens, linear(hidden, p.fc2_weight, p.fc2_bias));
  return {std::move(mid), std::move(attn.record)};
}

template <class T>
struct BackboneOutput {
  TokenState<T> state;
  std::vector<AttentionRecord<T>> records;
};

/// All encoder layers in order, then the final LayerNorm.
template <class T>
BackboneOutput<T> backbone_forward(const TokenState<T>& input, const BackboneParams<T>& params, const ModelConfig& cfg,
                                   const TemplateLayout& layout) {
  if (params.layers.size() != cfg.depth) throw DimensionError("backbone layer count does not match config depth");
  BackboneOutput<T> out;
  out.state = input;
  out.records.reserve(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    auto layer = encoder_layer_forward(out.state, params.layers[l], cfg, l + 1, layout);
    out.state = std::move(layer.state);
    out.records.push_back(std::move(layer.record));
  }
  out.state.tokens = layer_norm(out.state.tokens, params.norm_gamma, params.norm_beta);
  return out;
}

/// Surviving search-token count after each layer for a full-grid input of n tokens.
inline std::vector<std::size_t> search_token_schedule(const ModelConfig& cfg, std::size_t n) {
  std::vector<std::size_t> counts;
  counts.reserve(cfg.depth);
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    if (cfg.eliminates_at(l)) n = keep_count(n, cfg.keep_ratio);
    counts.push_back(n);
  }
  return counts;
}

}  // namespace ostrack
