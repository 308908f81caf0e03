#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ostrack {

enum class BoxFrame { SearchNormalized, FramePixels };

/// Axis-aligned box stored as center and size.
struct BBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  BoxFrame frame = BoxFrame::SearchNormalized;

  /// From top-left corner form (x, y, w, h).
  static BBox from_corner(double x, double y, double w, double h, BoxFrame frame = BoxFrame::FramePixels) {
    return BBox{x + w / 2.0, y + h / 2.0, w, h, frame};
  }

  double x0() const { return cx - w / 2.0; }
  double y0() const { return cy - h / 2.0; }
  double x1() const { return cx + w / 2.0; }
  double y1() const { return cy + h / 2.0; }
  double area() const { return w * h; }
  bool valid() const { return w > 0.0 && h > 0.0 && std::isfinite(cx) && std::isfinite(cy); }
};

struct BoxFrameError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace ostrack
