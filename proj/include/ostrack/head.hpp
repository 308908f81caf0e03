#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "ostrack/box.hpp"
#include "ostrack/ops.hpp"

namespace ostrack {

/// One Conv(3×3)-BN-ReLU stage.
template <class T = float>
struct ConvBnStage {
  Tensor<T> weight, bias;  // C'×C×3×3, C'
  Tensor<T> gamma, beta;   // C'
  BatchNormStats<T> stats;
};

template <class T = float>
struct HeadBranch {
  std::vector<ConvBnStage<T>> stages;
  Tensor<T> out_weight, out_bias;  // C_out×C×1×1
};

/// Classification, offset and size branches.
template <class T = float>
struct HeadParams {
  std::array<HeadBranch<T>, 3> branches;
};

/// Channel widths of the branch stages for input width d: d, d/2, d/4, d/8, ... (at least 1).
inline std::vector<std::size_t> head_stage_channels(std::size_t d, std::size_t stages) {
  std::vector<std::size_t> ch{d};
  for (std::size_t i = 1; i < stages; ++i) ch.push_back(std::max<std::size_t>(1, ch.back() / 2));
  return ch;
}

/// Head outputs. Each tensor is B×C×G×G with C = 1, 2, 2.
template <class T = float>
struct HeadMaps {
  Tensor<T> score;   // P
  Tensor<T> offset;  // O
  Tensor<T> size;    // S

  std::size_t batch() const { return score.dim(0); }
  std::size_t grid_h() const { return score.dim(2); }
  std::size_t grid_w() const { return score.dim(3); }
};

/// Reshapes N×D restored tokens to D×G_h×G_w (row-major grid).
template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& restored, std::size_t grid_h, std::size_t grid_w) {
  if (restored.rank() != 2 || restored.dim(0) != grid_h * grid_w) {
    throw DimensionError("token count " + std::to_string(restored.rank() == 2 ? restored.dim(0) : 0) +
                         " is not a " + std::to_string(grid_h) + "×" + std::to_string(grid_w) + " grid");
  }
  return transpose(restored).reshaped({restored.dim(1), grid_h, grid_w});
}

inline std::size_t square_grid(std::size_t n) {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
  if (g * g != n) throw DimensionError("token count " + std::to_string(n) + " is not a perfect square grid");
  return g;
}

/// Runs the three FCN branches over a batch of D×G×G feature maps (B×D×G×G).
template <class T>
HeadMaps<T> head_forward_maps(const Tensor<T>& features, HeadParams<T>& params, NormMode mode) {
  std::array<Tensor<T>, 3> outs;
  for (std::size_t b = 0; b < 3; ++b) {
    auto& br = params.branches[b];
    Tensor<T> x = features;
    for (auto& st : br.stages) x = relu(batch_norm(conv2d(x, st.weight, st.bias), st.stats, st.gamma, st.beta, mode));
    outs[b] = sigmoid(conv2d(x, br.out_weight, br.out_bias));
  }
  return {outs[0], outs[1], outs[2]};
}

/// Restored search tokens (N_x_full × D each) → head maps, one batch entry per input.
template <class T>
HeadMaps<T> head_forward(std::span<const Tensor<T>> restored, HeadParams<T>& params, NormMode mode) {
  if (restored.empty()) throw ContractError("head_forward on empty batch");
  const auto g = square_grid(restored[0].dim(0));
  std::vector<Tensor<T>> maps;
  maps.reserve(restored.size());
  for (const auto& r : restored) maps.push_back(tokens_to_map(r, g, g));
  return head_forward_maps(stack<T>(maps), params, mode);
}

template <class T>
HeadMaps<T> head_forward(const Tensor<T>& restored, HeadParams<T>& params, NormMode mode) {
  return head_forward(std::span<const Tensor<T>>(&restored, 1), params, mode);
}

/// Plain per-sample copy of the maps, indexed [channel][y][x].
struct MapView {
  std::size_t gh = 0, gw = 0;
  std::vector<double> score;   // gh·gw
  std::vector<double> offset;  // 2·gh·gw
  std::vector<double> size;    // 2·gh·gw

  double p(std::size_t y, std::size_t x) const { return score[y * gw + x]; }
  double o(std::size_t c, std::size_t y, std::size_t x) const { return offset[(c * gh + y) * gw + x]; }
  double s(std::size_t c, std::size_t y, std::size_t x) const { return size[(c * gh + y) * gw + x]; }
};

template <class T>
MapView view_sample(const HeadMaps<T>& maps, std::size_t b) {
  MapView v;
  v.gh = maps.grid_h();
  v.gw = maps.grid_w();
  const auto plane = v.gh * v.gw;
  auto copy = [&](const Tensor<T>& t, std::size_t channels, std::vector<double>& dst) {
    dst.resize(channels * plane);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(t[b * channels * plane + i]);
  };
  copy(maps.score, 1, v.score);
  copy(maps.offset, 2, v.offset);
  copy(maps.size, 2, v.size);
  return v;
}

struct Cell {
  std::size_t x = 0;  // width index
  std::size_t y = 0;  // height index
};

/// Row-major first maximum of a gh×gw score grid.
inline Cell argmax_cell(const std::vector<double>& score, std::size_t gh, std::size_t gw) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < gh * gw; ++i)
    if (score[i] > score[best]) best = i;
  return {best % gw, best / gw};
}

/// Box at a given cell: center = (cell + offset) / grid, size from S. Search-normalized.
inline BBox box_at_cell(const MapView& v, Cell c) {
  return BBox{(static_cast<double>(c.x) + v.o(0, c.y, c.x)) / static_cast<double>(v.gw),
              (static_cast<double>(c.y) + v.o(1, c.y, c.x)) / static_cast<double>(v.gh), v.s(0, c.y, c.x),
              v.s(1, c.y, c.x), BoxFrame::SearchNormalized};
}

/// Box at the highest-scoring cell.
inline BBox decode_box(const MapView& v) { return box_at_cell(v, argmax_cell(v.score, v.gh, v.gw)); }

template <class T>
BBox decode_box(const HeadMaps<T>& maps, std::size_t b = 0) {
  return decode_box(view_sample(maps, b));
}

}  // namespace ostrack
