#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include "ostrack/attention.hpp"
#include "ostrack/box.hpp"
#include "ostrack/config.hpp"
#include "ostrack/embedder.hpp"

namespace ostrack {

/// Head-averaged attention mass from the chosen template token(s) to each current search candidate.
struct SimilarityScore {
  std::vector<double> values;
  std::size_t count() const { return values.size(); }
};

/// Where the template sits: its token grid and, optionally, the target box in template-normalized coords.
struct TemplateLayout {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::optional<BBox> gt_box;
};

/// Index of the token at the template center, ⌊W/2⌋ + W·⌊H/2⌋ on the token grid.
inline std::size_t center_token_index(std::size_t grid_h, std::size_t grid_w) {
  return grid_w / 2 + grid_w * (grid_h / 2);
}

/// Number of candidates kept out of n at ratio rho: ⌈rho·n⌉, never zero.
inline std::size_t keep_count(std::size_t n, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ContractError("keep ratio must be in (0, 1]");
  if (n == 0) return 0;
  // The small slack keeps products that are integers in exact arithmetic from rounding up.
  const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Template rows whose scores are summed for a given strategy.
inline std::vector<std::size_t> template_rows(ScoringStrategy strategy, const TemplateLayout& layout) {
  const auto gh = layout.grid_h, gw = layout.grid_w;
  std::vector<std::size_t> rows;
  switch (strategy) {
    case ScoringStrategy::CenterToken:
      rows.push_back(center_token_index(gh, gw));
      break;
    case ScoringStrategy::AllTemplateTokens:
      rows.resize(gh * gw);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      break;
    case ScoringStrategy::Center4x4: {
      const auto y0 = gh / 2 >= 2 ? gh / 2 - 2 : 0, x0 = gw / 2 >= 2 ? gw / 2 - 2 : 0;
      for (auto y = y0; y < std::min(gh, y0 + 4); ++y)
        for (auto x = x0; x < std::min(gw, x0 + 4); ++x) rows.push_back(y * gw + x);
      break;
    }
    case ScoringStrategy::TemplateTokensInGtBox: {
      if (!layout.gt_box) throw ContractError("gt_box scoring requires the template ground-truth box");
      const auto& b = *layout.gt_box;
      for (std::size_t y = 0; y < gh; ++y)
        for (std::size_t x = 0; x < gw; ++x) {
          const double cx = (static_cast<double>(x) + 0.5) / static_cast<double>(gw);
          const double cy = (static_cast<double>(y) + 0.5) / static_cast<double>(gh);
          if (cx >= b.x0() && cx <= b.x1() && cy >= b.y0() && cy <= b.y1()) rows.push_back(y * gw + x);
        }
      if (rows.empty()) {
        const auto x = std::min(gw - 1, static_cast<std::size_t>(std::max(0.0, b.cx * static_cast<double>(gw))));
        const auto y = std::min(gh - 1, static_cast<std::size_t>(std::max(0.0, b.cy * static_cast<double>(gh))));
        rows.push_back(y * gw + x);
      }
      break;
    }
  }
  return rows;
}

/// Scores each current search candidate by the head-averaged attention weight it receives
/// from the selected template rows (summed over rows for multi-token strategies).
template <class T>
SimilarityScore candidate_similarity(const AttentionRecord<T>& record, const TokenState<T>& state,
                                     ScoringStrategy strategy, const TemplateLayout& layout) {
  const auto nz = state.template_count, n = state.search_count();
  if (record.heads.empty() || record.tokens() != nz + n) {
    throw DimensionError("attention record does not match the current token state");
  }
  if (layout.grid_h * layout.grid_w != nz) throw DimensionError("template layout does not match template token count");
  const auto rows = template_rows(strategy, layout);
  const auto total = nz + n;
  SimilarityScore score;
  score.values.assign(n, 0.0);
  const double inv_heads = 1.0 / static_cast<double>(record.heads.size());
  for (const auto row : rows) {
    for (const auto& head : record.heads) {
      const auto w = head.data();
      for (std::size_t j = 0; j < n; ++j) score.values[j] += static_cast<double>(w[row * total + nz + j]) * inv_heads;
    }
  }
  return score;
}

/// Keeps the ⌈rho·n⌉ highest-scoring candidates (ties go to the smaller original index).
/// Template tokens are untouched and survivors stay in ascending original order.
template <class T>
TokenState<T> select_candidates(const TokenState<T>& state, const SimilarityScore& scores, double rho) {
  const auto n = state.search_count();
  if (scores.count() != n) throw DimensionError("score count does not match search token count");
  const auto k = keep_count(n, rho);
  if (k == n) return state;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores.values[a] != scores.values[b]) return scores.values[a] > scores.values[b];
    return state.search_orig_index[a] < state.search_orig_index[b];
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  const auto nz = state.template_count;
  std::vector<std::size_t> rows(nz + k);
  std::iota(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(nz), std::size_t{0});
  TokenState<T> out;
  out.template_count = nz;
  out.search_full_count = state.search_full_count;
  out.search_orig_index.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    rows[nz + j] = nz + order[j];
    out.search_orig_index.push_back(state.search_orig_index[order[j]]);
  }
  out.tokens = gather_rows(state.tokens, std::span<const std::size_t>(rows));
  return out;
}

/// Scatters surviving search tokens back to their original grid positions; the rest are zero.
template <class T>
Tensor<T> restore_order(const TokenState<T>& state) {
  state.validate();
  const auto search = slice_rows(state.tokens, state.template_count, state.tokens.dim(0));
  return scatter_rows(search, std::span<const std::size_t>(state.search_orig_index), state.search_full_count);
}

}  // namespace ostrack
