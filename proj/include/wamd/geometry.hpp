#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "wamd/errors.hpp"

namespace wamd {

/// Axis-aligned box in center form (x, y = center; w, h = extent), pixels.
template <typename Scalar>
struct Box2 {
  Scalar x{0};
  Scalar y{0};
  Scalar w{1};
  Scalar h{1};

  Scalar x0() const { return x - w / Scalar(2); }
  Scalar y0() const { return y - h / Scalar(2); }
  Scalar x1() const { return x + w / Scalar(2); }
  Scalar y1() const { return y + h / Scalar(2); }
  Scalar area() const { return w * h; }

  bool valid() const {
    return std::isfinite(x) && std::isfinite(y) && w > Scalar(0) && h > Scalar(0) &&
           std::isfinite(w) && std::isfinite(h);
  }

  Eigen::Matrix<Scalar, 4, 1> corners() const { return {x0(), y0(), x1(), y1()}; }

  static Box2 from_corners(Scalar xa, Scalar ya, Scalar xb, Scalar yb) {
    return {(xa + xb) / Scalar(2), (ya + yb) / Scalar(2), xb - xa, yb - ya};
  }

  Box2 translated(Scalar dx, Scalar dy) const { return {x + dx, y + dy, w, h}; }

  friend bool operator==(const Box2&, const Box2&) = default;
};

using Box2d = Box2<double>;

/// Normalized displacement of a sensed region relative to a reference region.
template <typename Scalar>
struct Shift {
  Scalar tx{0};
  Scalar ty{0};

  Shift operator-(const Shift& o) const { return {tx - o.tx, ty - o.ty}; }
  Shift operator+(const Shift& o) const { return {tx + o.tx, ty + o.ty}; }
  friend bool operator==(const Shift&, const Shift&) = default;
};

using ShiftTarget = Shift<double>;

/// Image extent in pixels.
struct Extent {
  int width{0};
  int height{0};
  friend bool operator==(const Extent&, const Extent&) = default;
};

template <typename Scalar>
void validate_box(const Box2<Scalar>& b, const char* what = "box") {
  if (!b.valid()) {
    throw ValidationError(std::string(what) + ": width and height must be positive and finite");
  }
}

/// Intersection over union. Touching edges give zero.
template <typename Scalar>
Scalar iou(const Box2<Scalar>& a, const Box2<Scalar>& b) {
  validate_box(a, "iou lhs");
  validate_box(b, "iou rhs");
  const Scalar iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const Scalar ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= Scalar(0) || ih <= Scalar(0)) return Scalar(0);
  const Scalar inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Area of the intersection of two boxes (no validation).
template <typename Scalar>
Scalar intersection_area(const Box2<Scalar>& a, const Box2<Scalar>& b) {
  const Scalar iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const Scalar ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  return (iw <= Scalar(0) || ih <= Scalar(0)) ? Scalar(0) : iw * ih;
}

/// Shift target of a sensed box against its reference box:
/// t_x = (x_s - x_r) / w_r, t_y = (y_s - y_r) / h_r.
template <typename Scalar>
Shift<Scalar> shift_targets(const Box2<Scalar>& reference, const Box2<Scalar>& sensed) {
  validate_box(reference, "reference box");
  validate_box(sensed, "sensed box");
  return {(sensed.x - reference.x) / reference.w, (sensed.y - reference.y) / reference.h};
}

/// Inverse of shift_targets: moves the roi center by (t_x * w, t_y * h).
template <typename Scalar>
Box2<Scalar> apply_shift(const Box2<Scalar>& roi, const Shift<Scalar>& t) {
  return {roi.x + t.tx * roi.w, roi.y + t.ty * roi.h, roi.w, roi.h};
}

/// Clips a box to [0, width] x [0, height]. Returns an invalid (zero-size)
/// box when nothing remains.
template <typename Scalar>
Box2<Scalar> clip_box(const Box2<Scalar>& b, const Extent& bounds) {
  const Scalar xa = std::clamp(b.x0(), Scalar(0), Scalar(bounds.width));
  const Scalar ya = std::clamp(b.y0(), Scalar(0), Scalar(bounds.height));
  const Scalar xb = std::clamp(b.x1(), Scalar(0), Scalar(bounds.width));
  const Scalar yb = std::clamp(b.y1(), Scalar(0), Scalar(bounds.height));
  return Box2<Scalar>::from_corners(xa, ya, xb, yb);
}

inline constexpr double kDefaultContextFactor = 1.5;

/// Scales w and h by context_factor around the center, then clips.
template <typename Scalar>
Box2<Scalar> enlarge_roi(const Box2<Scalar>& roi, Scalar context_factor, const Extent& bounds) {
  validate_box(roi, "roi");
  if (!(context_factor >= Scalar(1))) {
    throw ValidationError("enlarge_roi: context_factor must be >= 1");
  }
  const Box2<Scalar> grown{roi.x, roi.y, roi.w * context_factor, roi.h * context_factor};
  return clip_box(grown, bounds);
}

/// Enlargement without clipping, used where the pooled window may extend
/// past the image (zero padding handles the outside).
template <typename Scalar>
Box2<Scalar> scale_box(const Box2<Scalar>& roi, Scalar factor) {
  return {roi.x, roi.y, roi.w * factor, roi.h * factor};
}

}  // namespace wamd
