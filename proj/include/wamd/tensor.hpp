#pragma once

#include <cmath>

#include <Eigen/Core>

#include "wamd/errors.hpp"

namespace wamd {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Channels x height x width activations. Each row of `values` is one
/// channel plane in row-major pixel order. `stride` is the number of input
/// pixels per cell (1 for images).
template <typename Scalar>
struct FeatureMap {
  int channels{0};
  int height{0};
  int width{0};
  int stride{1};
  RowMatrix<Scalar> values;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w, int s = 1)
      : channels(c), height(h), width(w), stride(s), values(RowMatrix<Scalar>::Zero(c, h * w)) {}

  Scalar& at(int c, int y, int x) { return values(c, y * width + x); }
  Scalar at(int c, int y, int x) const { return values(c, y * width + x); }

  bool same_shape(const FeatureMap& o) const {
    return channels == o.channels && height == o.height && width == o.width && stride == o.stride;
  }

  bool all_finite() const { return values.allFinite(); }

  FeatureMap zeros_like() const { return FeatureMap(channels, height, width, stride); }
};

using FeatureMapd = FeatureMap<double>;

/// Spatial size of a feature map after striding: ceil(n / stride).
constexpr int strided_size(int n, int stride) { return (n + stride - 1) / stride; }

template <typename Scalar>
void require_same_shape(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b, const char* what) {
  if (!a.same_shape(b)) throw ConfigError(std::string(what) + ": feature map shapes differ");
}

}  // namespace wamd
