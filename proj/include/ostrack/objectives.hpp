#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "ostrack/box.hpp"
#include "ostrack/head.hpp"
#include "ostrack/ops.hpp"

namespace ostrack {

struct LossWeights {
  double giou = 2.0;
  double l1 = 5.0;
  double alpha = 2.0;
  double beta = 4.0;
};

/// Gaussian training target on the score grid.
struct TargetHeatmap {
  std::size_t gh = 0, gw = 0;
  std::size_t peak_x = 0, peak_y = 0;
  double sigma = 1.0;
  std::vector<double> values;  // gh·gw, row-major

  double at(std::size_t y, std::size_t x) const { return values[y * gw + x]; }
};

/// CornerNet radius: the largest corner shift that keeps IoU ≥ min_overlap with a w×h box.
inline double gaussian_radius(double w, double h, double min_overlap = 0.7) {
  const double b1 = h + w;
  const double c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4.0 * c1)) / 2.0;
  const double a2 = 4.0, b2 = 2.0 * (h + w), c2 = (1.0 - min_overlap) * w * h;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 4.0 * a2 * c2)) / 2.0;
  const double a3 = 4.0 * min_overlap, b3 = -2.0 * min_overlap * (h + w), c3 = (min_overlap - 1.0) * w * h;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / 2.0;
  return std::min({r1, r2, r3});
}

/// Peak at ⌊center·grid⌋, σ = max(r/3, 1) with r the min-overlap-0.7 radius of the box in cell units.
inline TargetHeatmap gaussian_target_map(const BBox& gt, std::size_t gh, std::size_t gw) {
  if (!(gt.w > 0.0) || !(gt.h > 0.0)) throw std::invalid_argument("gaussian_target_map: degenerate box");
  TargetHeatmap t;
  t.gh = gh;
  t.gw = gw;
  const auto clampi = [](double v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, static_cast<double>(n - 1)));
  };
  t.peak_x = clampi(gt.cx * static_cast<double>(gw), gw);
  t.peak_y = clampi(gt.cy * static_cast<double>(gh), gh);
  const double r = gaussian_radius(gt.w * static_cast<double>(gw), gt.h * static_cast<double>(gh));
  t.sigma = std::max(r / 3.0, 1.0);
  t.values.resize(gh * gw);
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x) {
      const double dx = static_cast<double>(x) - static_cast<double>(t.peak_x);
      const double dy = static_cast<double>(y) - static_cast<double>(t.peak_y);
      t.values[y * gw + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * t.sigma * t.sigma));
    }
  return t;
}

namespace detail {

inline constexpr double kProbClamp = 1e-6;

/// Per-cell focal loss and its derivative w.r.t. the predicted probability.
inline std::pair<double, double> focal_term(double p, double target, double alpha, double beta) {
  const bool clamped = p < kProbClamp || p > 1.0 - kProbClamp;
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  double loss, grad;
  if (target == 1.0) {
    const double q = 1.0 - p;
    loss = -std::pow(q, alpha) * std::log(p);
    grad = alpha * std::pow(q, alpha - 1.0) * std::log(p) - std::pow(q, alpha) / p;
  } else {
    const double wgt = std::pow(1.0 - target, beta);
    const double lq = std::log(1.0 - p);
    loss = -wgt * std::pow(p, alpha) * lq;
    grad = -wgt * (alpha * std::pow(p, alpha - 1.0) * lq - std::pow(p, alpha) / (1.0 - p));
  }
  return {loss, clamped ? 0.0 : grad};
}

}  // namespace detail

/// Weighted focal loss summed over all cells (no positive-count normalization).
inline double focal_loss(std::span<const double> p, std::span<const double> target, double alpha = 2.0,
                         double beta = 4.0) {
  if (p.size() != target.size()) throw DimensionError("focal_loss: map sizes differ");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += detail::focal_term(p[i], target[i], alpha, beta).first;
  return total;
}

/// Differentiable focal loss; `target` has one value per element of `p` (any shape).
template <class T>
Tensor<T> focal_loss(const Tensor<T>& p, std::span<const double> target, double alpha = 2.0, double beta = 4.0) {
  if (p.size() != target.size()) throw DimensionError("focal_loss: map sizes differ");
  double total = 0.0;
  std::vector<T> grad(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto [l, g] = detail::focal_term(static_cast<double>(p[i]), target[i], alpha, beta);
    total += l;
    grad[i] = static_cast<T>(g);
  }
  auto* tape = detail::recording_tape<T>({&p});
  auto result = detail::make_result<T>({1}, {static_cast<T>(total)}, "focal_loss", tape != nullptr);
  if (tape) {
    auto pn = p.node(), on = result.node();
    tape->record("focal_loss", {pn}, on, [pn, on, grad = std::move(grad)] {
      if (!pn->requires_grad) return;
      auto& g = pn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[0] * grad[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// GIoU

/// Forward-mode dual number carrying derivatives w.r.t. four box parameters.
struct Dual4 {
  double v = 0.0;
  std::array<double, 4> d{};

  Dual4() = default;
  Dual4(double value) : v(value) {}  // NOLINT: constants promote implicitly
  static Dual4 seed(double value, int i) {
    Dual4 x(value);
    x.d[static_cast<std::size_t>(i)] = 1.0;
    return x;
  }

  friend Dual4 operator+(Dual4 a, const Dual4& b) {
    a.v += b.v;
    for (int i = 0; i < 4; ++i) a.d[i] += b.d[i];
    return a;
  }
  friend Dual4 operator-(Dual4 a, const Dual4& b) {
    a.v -= b.v;
    for (int i = 0; i < 4; ++i) a.d[i] -= b.d[i];
    return a;
  }
  friend Dual4 operator*(const Dual4& a, const Dual4& b) {
    Dual4 r(a.v * b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual4 operator/(const Dual4& a, const Dual4& b) {
    Dual4 r(a.v / b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
  }
  friend bool operator<(const Dual4& a, const Dual4& b) { return a.v < b.v; }
};

/// GIoU of two center-form boxes (cx, cy, w, h) over any arithmetic-like scalar.
template <class S>
S giou_generic(const std::array<S, 4>& a, const std::array<S, 4>& b) {
  const S half(0.5);
  const S ax0 = a[0] - a[2] * half, ax1 = a[0] + a[2] * half, ay0 = a[1] - a[3] * half, ay1 = a[1] + a[3] * half;
  const S bx0 = b[0] - b[2] * half, bx1 = b[0] + b[2] * half, by0 = b[1] - b[3] * half, by1 = b[1] + b[3] * half;
  auto mx = [](const S& p, const S& q) { return p < q ? q : p; };
  auto mn = [](const S& p, const S& q) { return p < q ? p : q; };
  const S zero(0.0);
  const S iw = mx(mn(ax1, bx1) - mx(ax0, bx0), zero);
  const S ih = mx(mn(ay1, by1) - mx(ay0, by0), zero);
  const S inter = iw * ih;
  const S uni = a[2] * a[3] + b[2] * b[3] - inter;
  const S hull = (mx(ax1, bx1) - mn(ax0, bx0)) * (mx(ay1, by1) - mn(ay0, by0));
  return inter / uni - (hull - uni) / hull;
}

inline double iou(const BBox& a, const BBox& b) {
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// IoU − (hull − union)/hull, in (−1, 1].
inline double giou(const BBox& a, const BBox& b) {
  if (a.frame != b.frame) throw BoxFrameError("giou: boxes are in different frames");
  if (!a.valid() || !b.valid()) throw std::invalid_argument("giou: boxes need positive size");
  return giou_generic<double>({a.cx, a.cy, a.w, a.h}, {b.cx, b.cy, b.w, b.h});
}

// ---------------------------------------------------------------------------
// Combined objective

struct LossParts {
  double cls = 0.0;
  double giou = 0.0;  // mean 1 − GIoU
  double l1 = 0.0;    // mean |Δ| over (cx, cy, w, h)
  double total = 0.0;
};

template <class T>
struct LossResult {
  Tensor<T> total;
  LossParts parts;
};

namespace detail {

/// Mean (1 − GIoU) and mean |Δ| of boxes formed as ((x + o_x)/G_w, (y + o_y)/G_h, s_w, s_h),
/// where `offsets` and `sizes` hold [o_x, o_y] and [s_w, s_h] per batch entry.
template <class T>
std::pair<Tensor<T>, Tensor<T>> box_losses(const Tensor<T>& offsets, const Tensor<T>& sizes, std::span<const Cell> cells,
                                           std::span<const BBox> gts, std::size_t gh, std::size_t gw) {
  const auto batch = cells.size();
  if (offsets.size() != 2 * batch || sizes.size() != 2 * batch || gts.size() != batch) {
    throw DimensionError("box_losses: expected two offsets and two sizes per box");
  }
  double giou_sum = 0.0, l1_sum = 0.0;
  std::vector<T> giou_o(2 * batch), giou_s(2 * batch), l1_o(2 * batch), l1_s(2 * batch);
  const std::array<double, 4> scale{1.0 / static_cast<double>(gw), 1.0 / static_cast<double>(gh), 1.0, 1.0};
  const double nb = static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::array<double, 4> raw{static_cast<double>(offsets[2 * b]), static_cast<double>(offsets[2 * b + 1]),
                                    static_cast<double>(sizes[2 * b]), static_cast<double>(sizes[2 * b + 1])};
    const std::array<double, 4> base{static_cast<double>(cells[b].x), static_cast<double>(cells[b].y), 0.0, 0.0};
    std::array<Dual4, 4> pred;
    for (std::size_t i = 0; i < 4; ++i) pred[i] = (Dual4::seed(raw[i], static_cast<int>(i)) + Dual4(base[i])) * Dual4(scale[i]);
    const std::array<double, 4> gtv{gts[b].cx, gts[b].cy, gts[b].w, gts[b].h};
    const std::array<Dual4, 4> gt{Dual4(gtv[0]), Dual4(gtv[1]), Dual4(gtv[2]), Dual4(gtv[3])};
    const Dual4 g = giou_generic<Dual4>(pred, gt);
    giou_sum += 1.0 - g.v;
    for (std::size_t i = 0; i < 4; ++i) {
      const double diff = pred[i].v - gtv[i];
      l1_sum += std::abs(diff);
      const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      auto& go = i < 2 ? giou_o : giou_s;
      auto& lo = i < 2 ? l1_o : l1_s;
      go[2 * b + i % 2] = static_cast<T>(-g.d[i] / nb);
      lo[2 * b + i % 2] = static_cast<T>(sgn * scale[i] / (4.0 * nb));
    }
  }
  auto* tape = recording_tape<T>({&offsets, &sizes});
  auto lg = make_result<T>({1}, {static_cast<T>(giou_sum / nb)}, "giou_loss", tape != nullptr);
  auto ll = make_result<T>({1}, {static_cast<T>(l1_sum / (4.0 * nb))}, "l1_loss", tape != nullptr);
  if (tape) {
    auto on_ = offsets.node(), sn = sizes.node();
    auto record = [&](const Tensor<T>& out, std::vector<T> gof, std::vector<T> gsz, std::string_view name) {
      auto outn = out.node();
      tape->record(name, {on_, sn}, outn, [on_, sn, outn, gof = std::move(gof), gsz = std::move(gsz)] {
        const T up = outn->grad[0];
        if (on_->requires_grad) {
          auto& g = on_->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * gof[i];
        }
        if (sn->requires_grad) {
          auto& g = sn->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * gsz[i];
        }
      });
    };
    record(lg, std::move(giou_o), std::move(giou_s), "giou_loss");
    record(ll, std::move(l1_o), std::move(l1_s), "l1_loss");
  }
  return {lg, ll};
}

/// Flat positions of the two-channel values at each batch entry's cell.
inline std::vector<std::size_t> cell_positions(std::span<const Cell> cells, std::size_t gh, std::size_t gw) {
  std::vector<std::size_t> idx;
  const auto plane = gh * gw;
  for (std::size_t b = 0; b < cells.size(); ++b)
    for (std::size_t c = 0; c < 2; ++c) idx.push_back((b * 2 + c) * plane + cells[b].y * gw + cells[b].x);
  return idx;
}

}  // namespace detail

/// L = L_cls + λ_giou·(1 − GIoU) + λ_L1·L1, averaged over the batch. Regression terms read the
/// offset/size maps at each ground-truth peak cell.
template <class T>
LossResult<T> track_loss(const HeadMaps<T>& maps, std::span<const BBox> gts, const LossWeights& w = {}) {
  const auto batch = maps.batch(), gh = maps.grid_h(), gw = maps.grid_w();
  if (gts.size() != batch) throw DimensionError("track_loss: one ground-truth box per batch entry");
  std::vector<double> target;
  target.reserve(batch * gh * gw);
  std::vector<Cell> cells;
  for (const auto& gt : gts) {
    const auto hm = gaussian_target_map(gt, gh, gw);
    target.insert(target.end(), hm.values.begin(), hm.values.end());
    cells.push_back({hm.peak_x, hm.peak_y});
  }
  auto cls = scale(focal_loss(maps.score, target, w.alpha, w.beta), T(1) / static_cast<T>(batch));
  const auto idx = detail::cell_positions(cells, gh, gw);
  auto offsets = pick(maps.offset, std::span<const std::size_t>(idx));
  auto sizes = pick(maps.size, std::span<const std::size_t>(idx));
  auto [lg, ll] = detail::box_losses(offsets, sizes, std::span<const Cell>(cells), gts, gh, gw);
  const std::array<Tensor<T>, 3> terms{cls, lg, ll};
  const std::array<T, 3> weights{T(1), static_cast<T>(w.giou), static_cast<T>(w.l1)};
  LossResult<T> r;
  r.total = weighted_sum<T>(terms, weights);
  r.parts = {static_cast<double>(cls.item()), static_cast<double>(lg.item()), static_cast<double>(ll.item()),
             static_cast<double>(r.total.item())};
  return r;
}

/// Single-sample objective.
template <class T>
LossResult<T> total_loss(const HeadMaps<T>& maps, const BBox& gt, const LossWeights& w = {}) {
  return track_loss(maps, std::span<const BBox>(&gt, 1), w);
}

}  // namespace ostrack
