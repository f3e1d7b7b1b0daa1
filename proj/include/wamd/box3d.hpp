#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "wamd/errors.hpp"
#include "wamd/geometry.hpp"
#include "wamd/nn.hpp"

namespace wamd {

struct CameraIntrinsics {
  double f{500.0};
  double ox{0.0};
  double oy{0.0};
  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

/// Camera-frame 3D box. l runs along the heading (x at theta = 0), w along
/// depth, h along the vertical; theta is yaw about the vertical axis.
template <typename Scalar>
struct Box3 {
  Scalar x{0}, y{0}, z{0};
  Scalar l{1}, w{1}, h{1};
  Scalar theta{0};

  Eigen::Matrix<Scalar, 7, 1> vector() const { return {x, y, z, l, w, h, theta}; }
  bool valid() const { return l > Scalar(0) && w > Scalar(0) && h > Scalar(0); }
  Scalar volume() const { return l * w * h; }
  friend bool operator==(const Box3&, const Box3&) = default;
};

using Box3D = Box3<double>;

template <typename Scalar>
using Box3Targets = Eigen::Matrix<Scalar, 7, 1>;
using Box3DTargets = Box3Targets<double>;

struct Dims3 {
  double l{1}, w{1}, h{1};
};

/// Class-average ("familiar size") dimensions keyed by label.
using DimensionTable = std::map<std::string, Dims3>;

/// Folds an angle into [-pi/2, pi/2]; a box rotated by pi is the same box.
template <typename Scalar>
Scalar wrap_half_pi(Scalar theta) {
  const Scalar pi = std::numbers::pi_v<Scalar>;
  Scalar t = std::fmod(theta + pi / Scalar(2), pi);
  if (t < Scalar(0)) t += pi;
  return t - pi / Scalar(2);
}

/// Median of strictly positive, finite depths. Throws when none remain.
inline double valid_depth_median(std::span<const double> depths) {
  std::vector<double> v;
  v.reserve(depths.size());
  for (double d : depths) {
    if (std::isfinite(d) && d > 0.0) v.push_back(d);
  }
  if (v.empty()) throw InitializationError("init_box3d: no valid depth in region");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double upper = v[mid];
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

/// Initial 3D box from a 2D proposal: median depth for z, back-projected
/// center for x and y, class-average dimensions, zero yaw.
inline Box3D init_box3d(const Box2d& roi, std::span<const double> depth_patch,
                        const CameraIntrinsics& k, const DimensionTable& class_dims,
                        const std::string& label) {
  if (!(k.f > 0.0)) throw ValidationError("init_box3d: focal length must be positive");
  const auto it = class_dims.find(label);
  if (it == class_dims.end()) throw ConfigError("init_box3d: no average dimensions for class '" + label + "'");
  const double z = valid_depth_median(depth_patch);
  Box3D b;
  b.z = z;
  b.x = z * (roi.x - k.ox) / k.f;
  b.y = z * (roi.y - k.oy) / k.f;
  b.l = it->second.l;
  b.w = it->second.w;
  b.h = it->second.h;
  b.theta = 0.0;
  return b;
}

/// Offsets from an initial box to a target box: centroid differences scaled
/// by the initial dimensions (x by l, y by h, z by w), log-ratios for the
/// dimensions, raw yaw difference.
template <typename Scalar>
Box3Targets<Scalar> encode_3d_targets(const Box3<Scalar>& init, const Box3<Scalar>& gt) {
  if (!init.valid()) throw ValidationError("encode_3d_targets: initial dimensions must be positive");
  if (!gt.valid()) throw ValidationError("encode_3d_targets: ground-truth dimensions must be positive");
  Box3Targets<Scalar> v;
  v << (gt.x - init.x) / init.l, (gt.y - init.y) / init.h, (gt.z - init.z) / init.w,
      std::log(gt.l / init.l), std::log(gt.w / init.w), std::log(gt.h / init.h), gt.theta - init.theta;
  return v;
}

template <typename Scalar>
Box3<Scalar> decode_3d(const Box3<Scalar>& init, const Box3Targets<Scalar>& v) {
  Box3<Scalar> b;
  b.x = init.x + v(0) * init.l;
  b.y = init.y + v(1) * init.h;
  b.z = init.z + v(2) * init.w;
  b.l = init.l * std::exp(v(3));
  b.w = init.w * std::exp(v(4));
  b.h = init.h * std::exp(v(5));
  b.theta = wrap_half_pi(init.theta + v(6));
  return b;
}

/// [p* >= 1] * sum_k smoothL1(v*_k - v_k).
template <typename Scalar>
Scalar loss_3d(int p_star, const Box3Targets<Scalar>& v, const Box3Targets<Scalar>& v_star,
               Scalar beta = Scalar(nn::kDefaultSmoothL1Beta)) {
  if (p_star < 1) return Scalar(0);
  Scalar s = 0;
  for (int k = 0; k < 7; ++k) s += nn::smooth_l1(v_star(k) - v(k), beta);
  return s;
}

/// d loss_3d / d v.
template <typename Scalar>
Box3Targets<Scalar> loss_3d_grad(int p_star, const Box3Targets<Scalar>& v,
                                 const Box3Targets<Scalar>& v_star,
                                 Scalar beta = Scalar(nn::kDefaultSmoothL1Beta)) {
  Box3Targets<Scalar> g = Box3Targets<Scalar>::Zero();
  if (p_star < 1) return g;
  for (int k = 0; k < 7; ++k) g(k) = -nn::smooth_l1_grad(v_star(k) - v(k), beta);
  return g;
}

namespace detail {

using Point2 = Eigen::Vector2d;

inline std::vector<Point2> footprint(const Box3D& b) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const Point2 ax{c * b.l / 2, s * b.l / 2};    // heading in the x-z plane
  const Point2 az{-s * b.w / 2, c * b.w / 2};
  const Point2 ctr{b.x, b.z};
  return {ctr + ax + az, ctr - ax + az, ctr - ax - az, ctr + ax - az};
}

inline double polygon_area(const std::vector<Point2>& p) {
  double a = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u.x() * v.y() - v.x() * u.y();
  }
  return 0.5 * std::abs(a);
}

inline double signed_area(const std::vector<Point2>& p) {
  double a = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u.x() * v.y() - v.x() * u.y();
  }
  return 0.5 * a;
}

// Sutherland-Hodgman clip of `subject` by convex `clip` (both CCW).
inline std::vector<Point2> clip_convex(std::vector<Point2> subject, const std::vector<Point2>& clip) {
  auto cross = [](const Point2& a, const Point2& b, const Point2& p) {
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
  };
  for (std::size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
    const Point2 a = clip[i], b = clip[(i + 1) % clip.size()];
    std::vector<Point2> out;
    for (std::size_t j = 0; j < subject.size(); ++j) {
      const Point2 p = subject[j], q = subject[(j + 1) % subject.size()];
      const double cp = cross(a, b, p), cq = cross(a, b, q);
      if (cp >= 0) out.push_back(p);
      if ((cp >= 0) != (cq >= 0)) {
        const double t = cp / (cp - cq);
        out.push_back(p + t * (q - p));
      }
    }
    subject = std::move(out);
  }
  return subject;
}

inline std::vector<Point2> ccw(std::vector<Point2> p) {
  if (signed_area(p) < 0) std::reverse(p.begin(), p.end());
  return p;
}

}  // namespace detail

/// Area of the intersection of two yawed footprints in the x-z plane.
inline double footprint_intersection(const Box3D& a, const Box3D& b) {
  const auto pa = detail::ccw(detail::footprint(a));
  const auto pb = detail::ccw(detail::footprint(b));
  const auto inter = detail::clip_convex(pa, pb);
  return inter.size() < 3 ? 0.0 : detail::polygon_area(inter);
}

/// 3D IoU of yawed boxes: exact footprint intersection times vertical overlap.
inline double iou3d(const Box3D& a, const Box3D& b) {
  if (!a.valid() || !b.valid()) throw ValidationError("iou3d: dimensions must be positive");
  const double ylo = std::max(a.y - a.h / 2, b.y - b.h / 2);
  const double yhi = std::min(a.y + a.h / 2, b.y + b.h / 2);
  if (yhi <= ylo) return 0.0;
  const double inter = footprint_intersection(a, b) * (yhi - ylo);
  if (inter <= 0.0) return 0.0;
  return inter / (a.volume() + b.volume() - inter);
}

}  // namespace wamd
