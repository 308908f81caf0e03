#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ostrack/box.hpp"
#include "ostrack/config.hpp"
#include "ostrack/elimination.hpp"
#include "ostrack/head.hpp"
#include "ostrack/image.hpp"
#include "ostrack/objectives.hpp"

namespace ostrack {

// ---------------------------------------------------------------------------
// Synthetic sequences

/// Parameters of a synthetic tracking sequence. The seed fully determines the output.
struct SynthSpec {
  std::size_t width = 192;
  std::size_t height = 192;
  std::size_t length = 60;
  std::uint64_t seed = 0;
  std::size_t distractors = 2;
  double distractor_similarity = 0.0;  // 0: unrelated colors, 1: target colors
  double min_size = 16.0;
  double max_size = 40.0;
  double max_speed = 3.0;   // pixels per frame
  double scale_drift = 0.01;
  double noise = 6.0;       // background noise amplitude
};

struct SynthError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Moving two-tone rectangles over a noisy gradient background.
class SynthWorld {
 public:
  explicit SynthWorld(const SynthSpec& spec) : spec_(spec), rng_(spec.seed) {
    if (spec.min_size <= 0.0 || spec.max_size < spec.min_size) throw SynthError("invalid target size range");
    if (spec.max_size + 2.0 > static_cast<double>(std::min(spec.width, spec.height))) {
      throw SynthError("target larger than frame");
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& c : bg_a_) c = 40.0 + 80.0 * u(rng_);
    for (auto& c : bg_b_) c = 40.0 + 80.0 * u(rng_);
    objects_.push_back(spawn(nullptr));
    for (std::size_t i = 0; i < spec.distractors; ++i) objects_.push_back(spawn(&objects_.front()));
  }

  /// Target box in frame pixels.
  BBox target_box() const { return objects_.front().box(); }

  void advance() {
    ++frame_;
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& o : objects_) {
      o.vx += 0.15 * spec_.max_speed * n(rng_);
      o.vy += 0.15 * spec_.max_speed * n(rng_);
      const double sp = std::hypot(o.vx, o.vy);
      if (sp > spec_.max_speed && sp > 0.0) {
        o.vx *= spec_.max_speed / sp;
        o.vy *= spec_.max_speed / sp;
      }
      if (spec_.scale_drift > 0.0) {
        o.w = std::clamp(o.w * std::exp(spec_.scale_drift * n(rng_)), spec_.min_size, spec_.max_size);
        o.h = std::clamp(o.h * std::exp(spec_.scale_drift * n(rng_)), spec_.min_size, spec_.max_size);
      }
      o.x += o.vx;
      o.y += o.vy;
      bounce(o.x, o.vx, o.w, static_cast<double>(spec_.width));
      bounce(o.y, o.vy, o.h, static_cast<double>(spec_.height));
    }
  }

  Image render() const {
    Image img(spec_.width, spec_.height);
    std::mt19937_64 noise_rng(spec_.seed * 0x9E3779B97F4A7C15ULL + frame_ + 1);
    std::uniform_real_distribution<double> u(-spec_.noise, spec_.noise);
    const double wx = static_cast<double>(spec_.width), hy = static_cast<double>(spec_.height);
    for (std::size_t y = 0; y < spec_.height; ++y)
      for (std::size_t x = 0; x < spec_.width; ++x) {
        const double t = 0.5 * (static_cast<double>(x) / wx + static_cast<double>(y) / hy);
        for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = clamp8(bg_a_[c] * (1.0 - t) + bg_b_[c] * t + u(noise_rng));
      }
    for (std::size_t i = objects_.size(); i-- > 0;) paint(img, objects_[i]);
    return img;
  }

  std::size_t frame_index() const { return frame_; }

 private:
  struct Object {
    double x = 0, y = 0, w = 0, h = 0;  // top-left corner and size
    double vx = 0, vy = 0;
    std::array<double, 3> outer{}, inner{};
    BBox box() const { return BBox::from_corner(x, y, w, h, BoxFrame::FramePixels); }
  };

  static std::uint8_t clamp8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

  void bounce(double& pos, double& vel, double size, double extent) const {
    const double lo = 1.0, hi = extent - 1.0 - size;
    if (pos < lo) {
      pos = lo + (lo - pos);
      vel = std::abs(vel);
    }
    if (pos > hi) {
      pos = hi - (pos - hi);
      vel = -std::abs(vel);
    }
    pos = std::clamp(pos, lo, hi);
  }

  Object spawn(const Object* like) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Object o;
    o.w = spec_.min_size + (spec_.max_size - spec_.min_size) * u(rng_);
    o.h = spec_.min_size + (spec_.max_size - spec_.min_size) * u(rng_);
    o.x = 1.0 + (static_cast<double>(spec_.width) - 2.0 - o.w) * u(rng_);
    o.y = 1.0 + (static_cast<double>(spec_.height) - 2.0 - o.h) * u(rng_);
    const double ang = 2.0 * 3.14159265358979323846 * u(rng_);
    const double sp = spec_.max_speed * u(rng_);
    o.vx = sp * std::cos(ang);
    o.vy = sp * std::sin(ang);
    for (std::size_t c = 0; c < 3; ++c) {
      o.outer[c] = 255.0 * u(rng_);
      o.inner[c] = 255.0 * u(rng_);
    }
    if (like) {
      const double s = spec_.distractor_similarity;
      for (std::size_t c = 0; c < 3; ++c) {
        o.outer[c] = (1.0 - s) * o.outer[c] + s * like->outer[c];
        o.inner[c] = (1.0 - s) * o.inner[c] + s * like->inner[c];
      }
    }
    return o;
  }

  void paint(Image& img, const Object& o) const {
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::round(o.x)));
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::round(o.y)));
    const auto x1 = std::min(img.width, static_cast<std::size_t>(std::round(o.x + o.w)));
    const auto y1 = std::min(img.height, static_cast<std::size_t>(std::round(o.y + o.h)));
    const double ix0 = o.x + 0.25 * o.w, ix1 = o.x + 0.75 * o.w, iy0 = o.y + 0.25 * o.h, iy1 = o.y + 0.75 * o.h;
    for (auto y = y0; y < y1; ++y)
      for (auto x = x0; x < x1; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        const bool in = px >= ix0 && px < ix1 && py >= iy0 && py < iy1;
        for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = clamp8(in ? o.inner[c] : o.outer[c]);
      }
  }

  SynthSpec spec_;
  std::mt19937_64 rng_;
  std::array<double, 3> bg_a_{}, bg_b_{};
  std::vector<Object> objects_;
  std::size_t frame_ = 0;
};

struct Sequence {
  std::vector<Image> frames;
  std::vector<BBox> boxes;  // FramePixels
};

/// Renders a full sequence in memory.
inline Sequence synth_sequence(const SynthSpec& spec) {
  SynthWorld world(spec);
  Sequence seq;
  for (std::size_t i = 0; i < spec.length; ++i) {
    if (i > 0) world.advance();
    seq.frames.push_back(world.render());
    seq.boxes.push_back(world.target_box());
  }
  return seq;
}

inline std::string frame_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu.ppm", index);
  return buf;
}

/// One "x y w h" line per box (top-left corner, pixels).
inline void write_boxes(const std::string& path, const std::vector<BBox>& boxes) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.setf(std::ios::fixed);
  os.precision(3);
  for (const auto& b : boxes) os << b.x0() << " " << b.y0() << " " << b.w << " " << b.h << "\n";
}

inline std::vector<BBox> read_boxes(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<BBox> out;
  std::string line;
  while (std::getline(is, line)) {
    for (auto& ch : line)
      if (ch == ',' || ch == '\t') ch = ' ';
    std::istringstream ls(line);
    double x, y, w, h;
    if (!(ls >> x >> y >> w >> h)) continue;
    out.push_back(BBox::from_corner(x, y, w, h, BoxFrame::FramePixels));
  }
  return out;
}

/// Frames as 000001.ppm, 000002.ppm, ... plus groundtruth.txt.
inline void write_sequence(const std::string& dir, const Sequence& seq) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < seq.frames.size(); ++i) write_ppm(dir + "/" + frame_name(i + 1), seq.frames[i]);
  write_boxes(dir + "/groundtruth.txt", seq.boxes);
}

/// Loads consecutive frames starting at 000001.ppm (or 000000.ppm) and groundtruth.txt if present.
inline Sequence read_sequence(const std::string& dir) {
  Sequence seq;
  std::size_t i = std::filesystem::exists(dir + "/" + frame_name(0)) ? 0 : 1;
  for (;; ++i) {
    const auto path = dir + "/" + frame_name(i);
    if (!std::filesystem::exists(path)) break;
    seq.frames.push_back(read_ppm(path));
  }
  if (seq.frames.empty()) throw std::runtime_error("no frames found in " + dir);
  if (std::filesystem::exists(dir + "/groundtruth.txt")) seq.boxes = read_boxes(dir + "/groundtruth.txt");
  return seq;
}

/// Parses "key = value" sequence specs; unknown keys are rejected.
inline SynthSpec parse_synth_spec(const std::string& text) {
  SynthSpec s;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("synth spec: expected key = value");
    const auto key = detail::trim(line.substr(0, eq)), val = detail::trim(line.substr(eq + 1));
    if (key == "width") s.width = detail::parse_size(key, val);
    else if (key == "height") s.height = detail::parse_size(key, val);
    else if (key == "length") s.length = detail::parse_size(key, val);
    else if (key == "seed") s.seed = detail::parse_size(key, val);
    else if (key == "distractors") s.distractors = detail::parse_size(key, val);
    else if (key == "distractor_similarity") s.distractor_similarity = detail::parse_double(key, val);
    else if (key == "min_size") s.min_size = detail::parse_double(key, val);
    else if (key == "max_size") s.max_size = detail::parse_double(key, val);
    else if (key == "max_speed") s.max_speed = detail::parse_double(key, val);
    else if (key == "scale_drift") s.scale_drift = detail::parse_double(key, val);
    else if (key == "noise") s.noise = detail::parse_double(key, val);
    else throw ConfigError("unknown synth spec key '" + key + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// MACs

struct LayerMacs {
  std::size_t tokens_in = 0;   // template + search entering the layer
  std::size_t tokens_out = 0;  // after elimination, seen by the MLP
  double attention = 0.0;
  double mlp = 0.0;
  double total() const { return attention + mlp; }
};

struct MacsReport {
  std::vector<LayerMacs> layers;
  std::vector<std::size_t> search_counts;  // surviving search tokens after each elimination layer
  double encoder = 0.0;
  double embed = 0.0;
  double head = 0.0;

  double total(bool with_extras = false) const { return encoder + (with_extras ? embed + head : 0.0); }
};

/// Closed-form multiply-accumulate count. Per layer: QKV and output projections 4·N·D²,
/// scores and weighted values 2·N²·D, MLP 2·r·N·D². An elimination layer prices attention
/// at the incoming N and the MLP at the surviving N.
inline MacsReport macs_estimate(const ModelConfig& cfg) {
  cfg.validate();
  const double d = static_cast<double>(cfg.embed_dim);
  const double r = static_cast<double>(cfg.mlp_ratio);
  const auto nz = cfg.template_tokens();
  std::size_t n = cfg.search_tokens();
  MacsReport rep;
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    LayerMacs lm;
    lm.tokens_in = nz + n;
    if (cfg.eliminates_at(l)) {
      n = keep_count(n, cfg.keep_ratio);
      rep.search_counts.push_back(n);
    }
    lm.tokens_out = nz + n;
    const double ni = static_cast<double>(lm.tokens_in), no = static_cast<double>(lm.tokens_out);
    lm.attention = 4.0 * ni * d * d + 2.0 * ni * ni * d;
    lm.mlp = 2.0 * r * no * d * d;
    rep.encoder += lm.total();
    rep.layers.push_back(lm);
  }
  const double p = static_cast<double>(cfg.patch_size);
  rep.embed = static_cast<double>(nz + cfg.search_tokens()) * 3.0 * p * p * d;
  const double cells = static_cast<double>(cfg.search_tokens());
  const auto ch = head_stage_channels(cfg.embed_dim, cfg.head_stages);
  const std::array<double, 3> outs{1.0, 2.0, 2.0};
  for (const double out : outs) {
    double cin = d;
    for (const auto c : ch) {
      rep.head += cells * 9.0 * cin * static_cast<double>(c);
      cin = static_cast<double>(c);
    }
    rep.head += cells * cin * out;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Metrics

struct TrackMetrics {
  double ao = 0.0;
  double sr50 = 0.0;
  double sr75 = 0.0;
  std::vector<double> ious;
};

/// Mean IoU and success rates (fraction of frames with IoU strictly above the threshold).
inline TrackMetrics evaluate_metrics(const std::vector<BBox>& pred, const std::vector<BBox>& gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("evaluate_metrics: " + std::to_string(pred.size()) + " predictions vs " +
                                std::to_string(gt.size()) + " ground-truth boxes");
  }
  TrackMetrics m;
  if (pred.empty()) return m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double v = iou(pred[i], gt[i]);
    m.ious.push_back(v);
    m.ao += v;
    m.sr50 += v > 0.5 ? 1.0 : 0.0;
    m.sr75 += v > 0.75 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(pred.size());
  m.ao /= n;
  m.sr50 /= n;
  m.sr75 /= n;
  return m;
}

}  // namespace ostrack
