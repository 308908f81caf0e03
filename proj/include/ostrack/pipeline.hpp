#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "ostrack/bench.hpp"
#include "ostrack/image.hpp"
#include "ostrack/model.hpp"
#include "ostrack/objectives.hpp"
#include "ostrack/optim.hpp"

namespace ostrack {

/// Square crop geometry: frame pixel X maps to crop-normalized u = (X - x0) / side.
struct CropMapping {
  double x0 = 0.0;
  double y0 = 0.0;
  double side = 1.0;
  std::size_t out = 1;
  std::size_t frame_w = 0;
  std::size_t frame_h = 0;

  BBox to_frame(const BBox& b) const {
    if (b.frame != BoxFrame::SearchNormalized) throw BoxFrameError("to_frame expects a crop-normalized box");
    return BBox{x0 + b.cx * side, y0 + b.cy * side, b.w * side, b.h * side, BoxFrame::FramePixels};
  }

  BBox to_normalized(const BBox& b) const {
    if (b.frame != BoxFrame::FramePixels) throw BoxFrameError("to_normalized expects a frame-pixel box");
    return BBox{(b.cx - x0) / side, (b.cy - y0) / side, b.w / side, b.h / side, BoxFrame::SearchNormalized};
  }
};

template <class T>
struct Crop {
  ImagePatchGrid<T> grid;
  CropMapping mapping;
};

struct CropError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Crop side factor·√(wh) centered on the box, bilinearly resampled to out×out. Samples
/// outside the frame take the per-channel frame mean.
template <class T = float>
Crop<T> crop_region(const Image& frame, const BBox& box, double factor, std::size_t out, std::size_t patch,
                    ImageRole role = ImageRole::Search) {
  if (box.frame != BoxFrame::FramePixels) throw BoxFrameError("crop_region expects a frame-pixel box");
  if (!(box.w > 0.0 && box.h > 0.0) || !std::isfinite(box.cx) || !std::isfinite(box.cy)) {
    throw CropError("crop_region: box must have positive size");
  }
  if (!(factor > 0.0)) throw CropError("crop_region: factor must be positive");
  if (out == 0 || frame.width == 0 || frame.height == 0) throw CropError("crop_region: empty input or output");
  CropMapping m;
  m.side = factor * std::sqrt(box.w * box.h);
  m.x0 = box.cx - m.side / 2.0;
  m.y0 = box.cy - m.side / 2.0;
  m.out = out;
  m.frame_w = frame.width;
  m.frame_h = frame.height;

  const auto mean = frame.channel_mean();
  const double step = m.side / static_cast<double>(out);
  const auto fw = static_cast<std::ptrdiff_t>(frame.width), fh = static_cast<std::ptrdiff_t>(frame.height);
  auto texel = [&](std::ptrdiff_t x, std::ptrdiff_t y, std::size_t c) -> double {
    if (x < 0 || y < 0 || x >= fw || y >= fh) return mean[c];
    return frame.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c);
  };
  std::vector<T> px(3 * out * out);
  const auto plane = out * out;
  for (std::size_t i = 0; i < out; ++i) {
    const double sy = m.y0 + (static_cast<double>(i) + 0.5) * step - 0.5;
    const auto y = static_cast<std::ptrdiff_t>(std::floor(sy));
    const double ty = sy - static_cast<double>(y);
    for (std::size_t j = 0; j < out; ++j) {
      const double sx = m.x0 + (static_cast<double>(j) + 0.5) * step - 0.5;
      const auto x = static_cast<std::ptrdiff_t>(std::floor(sx));
      const double tx = sx - static_cast<double>(x);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - ty) * ((1 - tx) * texel(x, y, c) + tx * texel(x + 1, y, c)) +
                         ty * ((1 - tx) * texel(x, y + 1, c) + tx * texel(x + 1, y + 1, c));
        px[c * plane + i * out + j] = static_cast<T>(v / 127.5 - 1.0);
      }
    }
  }
  return {ImagePatchGrid<T>(role, Tensor<T>({3, out, out}, std::move(px)), patch), m};
}

/// Raised-cosine window h[i] = 0.5(1 − cos(2πi/(G−1))), evaluated from the nearer end so
/// that mirrored cells are bit-identical.
inline std::vector<double> hanning_window(std::size_t g) {
  if (g == 0) throw std::invalid_argument("hanning_window: empty grid");
  if (g == 1) return {1.0};
  std::vector<double> h(g);
  const double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < g; ++i) {
    const auto k = std::min(i, g - 1 - i);
    h[i] = 0.5 * (1.0 - std::cos(2.0 * pi * static_cast<double>(k) / static_cast<double>(g - 1)));
  }
  return h;
}

/// Multiplies the score map by outer(h_y, h_x).
inline void apply_hanning(MapView& v) {
  const auto hy = hanning_window(v.gh), hx = hanning_window(v.gw);
  for (std::size_t y = 0; y < v.gh; ++y)
    for (std::size_t x = 0; x < v.gw; ++x) v.score[y * v.gw + x] *= hy[y] * hx[x];
}

/// Clips to the frame and keeps at least one pixel of width and height.
inline BBox clip_to_frame(const BBox& b, std::size_t frame_w, std::size_t frame_h) {
  const double fw = static_cast<double>(frame_w), fh = static_cast<double>(frame_h);
  double x0 = std::clamp(b.x0(), 0.0, fw - 1.0), y0 = std::clamp(b.y0(), 0.0, fh - 1.0);
  double x1 = std::clamp(b.x1(), 0.0, fw), y1 = std::clamp(b.y1(), 0.0, fh);
  if (!(x1 - x0 >= 1.0)) x1 = std::min(fw, x0 + 1.0), x0 = x1 - 1.0;
  if (!(y1 - y0 >= 1.0)) y1 = std::min(fh, y0 + 1.0), y0 = y1 - 1.0;
  return BBox::from_corner(x0, y0, x1 - x0, y1 - y0, BoxFrame::FramePixels);
}

template <class T = float>
struct TrackerState {
  OSTrackModel<T>* model = nullptr;  // not owned; shared read-only across states
  ImagePatchGrid<T> template_crop;
  BBox template_box;  // template-normalized, for gt_box scoring
  BBox previous;      // FramePixels
  bool hanning = true;
  double search_factor = 4.0;
  std::optional<MapView> last_maps;
};

/// Freezes the template crop around the first-frame box.
template <class T>
TrackerState<T> init_tracker(OSTrackModel<T>& model, const Image& frame, const BBox& box) {
  const auto& cfg = model.config();
  auto crop = crop_region<T>(frame, box, cfg.template_factor, cfg.template_size, cfg.patch_size, ImageRole::Template);
  TrackerState<T> s;
  s.model = &model;
  s.template_crop = std::move(crop.grid);
  s.template_box = crop.mapping.to_normalized(box);
  s.previous = box;
  s.hanning = cfg.hanning;
  s.search_factor = cfg.search_factor;
  return s;
}

/// Crops around the previous box, scores candidates, applies the window, and maps the best
/// box back to frame pixels.
template <class T>
BBox track_frame(TrackerState<T>& s, const Image& frame) {
  if (!s.model) throw StateError("track_frame on an uninitialized tracker");
  const auto& cfg = s.model->config();
  NoGradScope<T> no_grad;
  auto crop = crop_region<T>(frame, s.previous, s.search_factor, cfg.search_size, cfg.patch_size, ImageRole::Search);
  auto fwd = s.model->forward(s.template_crop, crop.grid, NormMode::Eval, s.template_box);
  auto view = view_sample(fwd.maps, 0);
  if (s.hanning) apply_hanning(view);
  const auto local = decode_box(view);
  auto out = clip_to_frame(crop.mapping.to_frame(local), frame.width, frame.height);
  s.previous = out;
  s.last_maps = std::move(view);
  return out;
}

/// Tracks a whole sequence; the first entry is the initialization box.
template <class T>
std::vector<BBox> run_sequence(OSTrackModel<T>& model, const std::vector<Image>& frames, const BBox& init_box) {
  if (frames.empty()) return {};
  auto state = init_tracker(model, frames.front(), init_box);
  std::vector<BBox> out{init_box};
  for (std::size_t i = 1; i < frames.size(); ++i) out.push_back(track_frame(state, frames[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Training

template <class T = float>
struct TrainSample {
  ImagePatchGrid<T> z;
  ImagePatchGrid<T> x;
  BBox z_box;   // template-normalized
  BBox x_box;   // search-normalized ground truth
};

namespace detail {

template <class T>
void flip_horizontal(ImagePatchGrid<T>& g) {
  const auto h = g.height(), w = g.width();
  auto d = g.pixels.mutable_data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y) {
      auto* row = d.data() + (c * h + y) * w;
      std::reverse(row, row + w);
    }
}

template <class T>
void scale_brightness(ImagePatchGrid<T>& g, double factor) {
  for (auto& v : g.pixels.mutable_data()) v = static_cast<T>(std::clamp((static_cast<double>(v) + 1.0) * factor - 1.0, -1.0, 1.0));
}

}  // namespace detail

/// One (template, search, box) triple from a fresh synthetic sequence. The search crop is
/// centered on a jittered copy of the target box; the pair is optionally mirrored and each
/// crop gets its own brightness factor.
template <class T = float>
TrainSample<T> sample_pair(const ModelConfig& mc, const TrainConfig& tc, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  SynthSpec spec;
  spec.width = spec.height = tc.frame_size;
  spec.distractors = tc.distractors;
  spec.seed = rng();
  spec.distractor_similarity = 0.5 * u(rng);
  spec.max_size = std::min(spec.max_size, 0.25 * static_cast<double>(tc.frame_size));
  spec.min_size = std::min(spec.min_size, spec.max_size);
  SynthWorld world(spec);
  const auto skip = static_cast<std::size_t>(u(rng) * 10.0);
  for (std::size_t i = 0; i < skip; ++i) world.advance();
  const auto z_frame = world.render();
  const auto z_target = world.target_box();
  const auto gap = 1 + static_cast<std::size_t>(u(rng) * tc.max_gap);
  for (std::size_t i = 0; i < gap; ++i) world.advance();
  const auto x_frame = world.render();
  const auto x_target = world.target_box();

  auto jittered = x_target;
  jittered.w *= std::exp(tc.scale_jitter * n(rng));
  jittered.h *= std::exp(tc.scale_jitter * n(rng));
  const double reach = tc.center_jitter * std::sqrt(jittered.w * jittered.h);
  jittered.cx += (u(rng) - 0.5) * reach;
  jittered.cy += (u(rng) - 0.5) * reach;

  auto zc = crop_region<T>(z_frame, z_target, mc.template_factor, mc.template_size, mc.patch_size, ImageRole::Template);
  auto xc = crop_region<T>(x_frame, jittered, mc.search_factor, mc.search_size, mc.patch_size, ImageRole::Search);
  TrainSample<T> s{std::move(zc.grid), std::move(xc.grid), zc.mapping.to_normalized(z_target),
                   xc.mapping.to_normalized(x_target)};
  if (u(rng) < 0.5) {
    detail::flip_horizontal(s.z);
    detail::flip_horizontal(s.x);
    s.z_box.cx = 1.0 - s.z_box.cx;
    s.x_box.cx = 1.0 - s.x_box.cx;
  }
  detail::scale_brightness(s.z, std::exp(tc.brightness_jitter * n(rng)));
  detail::scale_brightness(s.x, std::exp(tc.brightness_jitter * n(rng)));
  return s;
}

struct TrainLog {
  std::size_t step = 0;
  LossParts loss;
  double lr_scale = 1.0;
  double keep_ratio = 1.0;
};

/// Keep ratio used at a training step: 1 until `keep_warmup_start`, then linear down to
/// `target` at `keep_warmup_end` (both fractions of the total step count).
inline double keep_ratio_at(std::size_t step, const TrainConfig& tc, double target) {
  const double t = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(tc.steps, 1));
  if (t < tc.keep_warmup_start) return 1.0;
  if (t >= tc.keep_warmup_end || tc.keep_warmup_end <= tc.keep_warmup_start) return target;
  const double a = (t - tc.keep_warmup_start) / (tc.keep_warmup_end - tc.keep_warmup_start);
  return 1.0 + a * (target - 1.0);
}

/// AdamW over two parameter groups with a ×0.1 step decay and a keep-ratio warmup. The
/// callback receives the mean loss over each `log_every` window.
template <class T>
std::vector<TrainLog> train_model(OSTrackModel<T>& model, const TrainConfig& tc,
                                  const std::function<void(const TrainLog&)>& on_log = {}) {
  if (tc.batch_size == 0) throw ConfigError("batch_size must be positive");
  std::mt19937_64 rng(tc.seed);
  auto groups = parameter_groups(model, tc.lr_backbone, tc.lr_other);
  OptimState<T> opt;
  opt.weight_decay = tc.weight_decay;
  const auto mc = model.config();
  std::vector<TrainLog> history;
  LossParts acc{};
  std::size_t in_window = 0;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::vector<ImagePatchGrid<T>> zs, xs;
    std::vector<std::optional<BBox>> zb;
    std::vector<BBox> gts;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      auto s = sample_pair<T>(mc, tc, rng);
      zs.push_back(std::move(s.z));
      xs.push_back(std::move(s.x));
      zb.push_back(s.z_box);
      gts.push_back(s.x_box);
    }
    const double rho = keep_ratio_at(step, tc, mc.keep_ratio);
    model.set_keep_ratio(rho);
    model.zero_grad();
    Tape<T> tape;
    LossResult<T> loss;
    {
      TapeScope<T> scope(tape);
      auto fwd = model.forward(std::span<const ImagePatchGrid<T>>(zs), std::span<const ImagePatchGrid<T>>(xs),
                               NormMode::Train, std::span<const std::optional<BBox>>(zb));
      loss = track_loss(fwd.maps, std::span<const BBox>(gts));
    }
    backward_pass(tape, loss.total);
    opt.lr_scale = step_decay_scale(static_cast<long>(step), static_cast<long>(tc.steps), tc.decay_fraction);
    adamw_step(groups, opt);

    acc.cls += loss.parts.cls;
    acc.giou += loss.parts.giou;
    acc.l1 += loss.parts.l1;
    acc.total += loss.parts.total;
    ++in_window;
    const bool last = step + 1 == tc.steps;
    if ((tc.log_every > 0 && (step + 1) % tc.log_every == 0) || last) {
      const double k = static_cast<double>(in_window);
      TrainLog entry{step + 1, {acc.cls / k, acc.giou / k, acc.l1 / k, acc.total / k}, opt.lr_scale, rho};
      history.push_back(entry);
      if (on_log) on_log(entry);
      acc = {};
      in_window = 0;
    }
  }
  model.set_keep_ratio(mc.keep_ratio);
  return history;
}

}  // namespace ostrack
