#pragma once

#include <array>
#include <cmath>

#include <Eigen/Core>

#include "wamd/geometry.hpp"
#include "wamd/tensor.hpp"

namespace wamd {

/// Output grid of a pooled region and samples per bin along each axis.
struct PoolSize {
  int height{7};
  int width{7};
  int sampling{2};
};

template <typename Scalar>
struct PooledRegion {
  FeatureMap<Scalar> feature;
  bool outside{false};  // roi did not touch the feature extent; feature is zero
};

namespace detail {

template <typename Scalar>
struct BilinearTap {
  std::array<int, 4> index{};
  std::array<Scalar, 4> weight{};
  // d(weight)/d(sample y) and d(weight)/d(sample x).
  std::array<Scalar, 4> dwy{};
  std::array<Scalar, 4> dwx{};
  bool valid{false};
};

// Detectron2-style bilinear tap: samples beyond one cell outside the map
// contribute nothing, samples in the border band are clamped.
template <typename Scalar>
BilinearTap<Scalar> bilinear_tap(Scalar y, Scalar x, int height, int width) {
  BilinearTap<Scalar> tap;
  if (y < Scalar(-1) || y > Scalar(height) || x < Scalar(-1) || x > Scalar(width)) return tap;
  bool clamp_y = false, clamp_x = false;
  if (y <= Scalar(0)) { y = Scalar(0); clamp_y = true; }
  if (x <= Scalar(0)) { x = Scalar(0); clamp_x = true; }
  int y_lo = static_cast<int>(std::floor(y));
  int x_lo = static_cast<int>(std::floor(x));
  int y_hi, x_hi;
  if (y_lo >= height - 1) {
    y_lo = y_hi = height - 1;
    y = Scalar(y_lo);
    clamp_y = true;
  } else {
    y_hi = y_lo + 1;
  }
  if (x_lo >= width - 1) {
    x_lo = x_hi = width - 1;
    x = Scalar(x_lo);
    clamp_x = true;
  } else {
    x_hi = x_lo + 1;
  }
  const Scalar ly = y - Scalar(y_lo), lx = x - Scalar(x_lo);
  const Scalar hy = Scalar(1) - ly, hx = Scalar(1) - lx;
  tap.index = {y_lo * width + x_lo, y_lo * width + x_hi, y_hi * width + x_lo, y_hi * width + x_hi};
  tap.weight = {hy * hx, hy * lx, ly * hx, ly * lx};
  const Scalar gy = clamp_y ? Scalar(0) : Scalar(1);
  const Scalar gx = clamp_x ? Scalar(0) : Scalar(1);
  tap.dwy = {-hx * gy, -lx * gy, hx * gy, lx * gy};
  tap.dwx = {-hy * gx, hy * gx, -ly * gx, ly * gx};
  tap.valid = true;
  return tap;
}

template <typename Scalar>
bool touches_extent(const FeatureMap<Scalar>& f, const Box2<Scalar>& roi) {
  const Scalar w = Scalar(f.width * f.stride), h = Scalar(f.height * f.stride);
  return roi.x1() > Scalar(0) && roi.y1() > Scalar(0) && roi.x0() < w && roi.y0() < h;
}

// Visits every sample point of the pooled grid. The callback receives the
// output bin, the tap, and d(sample)/d(roi) as (dy/dcy, dy/dh, dx/dcx, dx/dw).
template <typename Scalar, typename Fn>
void for_each_sample(const FeatureMap<Scalar>& f, const Box2<Scalar>& roi, const PoolSize& size,
                     Fn&& fn) {
  const Scalar inv_stride = Scalar(1) / Scalar(f.stride);
  const int sr = size.sampling;
  for (int ph = 0; ph < size.height; ++ph) {
    for (int iy = 0; iy < sr; ++iy) {
      const Scalar ay = (Scalar(ph) + (Scalar(iy) + Scalar(0.5)) / Scalar(sr)) / Scalar(size.height);
      const Scalar sy = (roi.y + (ay - Scalar(0.5)) * roi.h) * inv_stride - Scalar(0.5);
      for (int pw = 0; pw < size.width; ++pw) {
        for (int ix = 0; ix < sr; ++ix) {
          const Scalar ax =
              (Scalar(pw) + (Scalar(ix) + Scalar(0.5)) / Scalar(sr)) / Scalar(size.width);
          const Scalar sx = (roi.x + (ax - Scalar(0.5)) * roi.w) * inv_stride - Scalar(0.5);
          const auto tap = bilinear_tap(sy, sx, f.height, f.width);
          if (!tap.valid) continue;
          fn(ph * size.width + pw, tap, inv_stride, (ay - Scalar(0.5)) * inv_stride, inv_stride,
             (ax - Scalar(0.5)) * inv_stride);
        }
      }
    }
  }
}

}  // namespace detail

/// RoIAlign: average of bilinear samples inside each output bin. The roi is
/// in image pixels; the map's stride converts to cell coordinates with cell
/// centers at (i + 0.5) * stride.
template <typename Scalar>
PooledRegion<Scalar> pool_region(const FeatureMap<Scalar>& f, const Box2<Scalar>& roi,
                                 const PoolSize& size = {}) {
  validate_box(roi, "pool_region roi");
  PooledRegion<Scalar> out{FeatureMap<Scalar>(f.channels, size.height, size.width, f.stride), false};
  if (!detail::touches_extent(f, roi)) {
    out.outside = true;
    return out;
  }
  const Scalar norm = Scalar(1) / Scalar(size.sampling * size.sampling);
  detail::for_each_sample(f, roi, size, [&](int bin, const auto& tap, Scalar, Scalar, Scalar, Scalar) {
    for (int k = 0; k < 4; ++k) {
      const Scalar w = tap.weight[k] * norm;
      if (w == Scalar(0)) continue;
      out.feature.values.col(bin) += w * f.values.col(tap.index[k]);
    }
  });
  return out;
}

/// Gradient of pool_region. Accumulates into grad_features (when non-null)
/// and returns dL/d(roi) as (x, y, w, h).
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> pool_region_backward(const FeatureMap<Scalar>& f,
                                                 const Box2<Scalar>& roi, const PoolSize& size,
                                                 const RowMatrix<Scalar>& grad_out,
                                                 FeatureMap<Scalar>* grad_features) {
  Eigen::Matrix<Scalar, 4, 1> grad_roi = Eigen::Matrix<Scalar, 4, 1>::Zero();
  if (!detail::touches_extent(f, roi)) return grad_roi;
  const Scalar norm = Scalar(1) / Scalar(size.sampling * size.sampling);
  detail::for_each_sample(
      f, roi, size,
      [&](int bin, const auto& tap, Scalar dy_dcy, Scalar dy_dh, Scalar dx_dcx, Scalar dx_dw) {
        Scalar d_sy = 0, d_sx = 0;
        for (int k = 0; k < 4; ++k) {
          const auto g = grad_out.col(bin);
          const auto v = f.values.col(tap.index[k]);
          if (grad_features && tap.weight[k] != Scalar(0)) {
            grad_features->values.col(tap.index[k]) += (tap.weight[k] * norm) * g;
          }
          const Scalar gv = g.dot(v) * norm;
          d_sy += tap.dwy[k] * gv;
          d_sx += tap.dwx[k] * gv;
        }
        grad_roi(0) += d_sx * dx_dcx;
        grad_roi(1) += d_sy * dy_dcy;
        grad_roi(2) += d_sx * dx_dw;
        grad_roi(3) += d_sy * dy_dh;
      });
  return grad_roi;
}

}  // namespace wamd
