#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "wamd/tensor.hpp"

// Dense building blocks with explicit forward/backward passes. Everything
// here is a free function over Eigen types so the same code serves the
// trainer (double) and the finite-difference checks.

namespace wamd::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Square convolution geometry.
struct ConvShape {
  int in_channels{1};
  int out_channels{1};
  int kernel{3};
  int stride{1};
  int pad{1};

  int out_size(int n) const { return (n + 2 * pad - kernel) / stride + 1; }
  int patch() const { return in_channels * kernel * kernel; }
};

template <typename Scalar>
RowMatrix<Scalar> im2col(const FeatureMap<Scalar>& in, const ConvShape& cs) {
  const int ho = cs.out_size(in.height), wo = cs.out_size(in.width);
  RowMatrix<Scalar> cols = RowMatrix<Scalar>::Zero(cs.patch(), ho * wo);
  for (int c = 0; c < in.channels; ++c) {
    for (int ky = 0; ky < cs.kernel; ++ky) {
      for (int kx = 0; kx < cs.kernel; ++kx) {
        const int row = (c * cs.kernel + ky) * cs.kernel + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * cs.stride - cs.pad + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * cs.stride - cs.pad + kx;
            if (ix < 0 || ix >= in.width) continue;
            cols(row, oy * wo + ox) = in.values(c, iy * in.width + ix);
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, const ConvShape& cs, FeatureMap<Scalar>& grad_in) {
  const int ho = cs.out_size(grad_in.height), wo = cs.out_size(grad_in.width);
  for (int c = 0; c < grad_in.channels; ++c) {
    for (int ky = 0; ky < cs.kernel; ++ky) {
      for (int kx = 0; kx < cs.kernel; ++kx) {
        const int row = (c * cs.kernel + ky) * cs.kernel + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * cs.stride - cs.pad + ky;
          if (iy < 0 || iy >= grad_in.height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * cs.stride - cs.pad + kx;
            if (ix < 0 || ix >= grad_in.width) continue;
            grad_in.values(c, iy * grad_in.width + ix) += cols(row, oy * wo + ox);
          }
        }
      }
    }
  }
}

/// Forward convolution. `weights` is out_channels x patch, `bias` is
/// out_channels x 1. The im2col buffer is returned through `cols` for
/// the backward pass.
template <typename Scalar>
FeatureMap<Scalar> conv2d(const FeatureMap<Scalar>& in, const Matrix<Scalar>& weights,
                          const Matrix<Scalar>& bias, const ConvShape& cs,
                          RowMatrix<Scalar>* cols = nullptr) {
  if (in.channels != cs.in_channels || weights.rows() != cs.out_channels ||
      weights.cols() != cs.patch()) {
    throw ConfigError("conv2d: weight shape does not match input");
  }
  RowMatrix<Scalar> local = im2col(in, cs);
  FeatureMap<Scalar> out(cs.out_channels, cs.out_size(in.height), cs.out_size(in.width),
                         in.stride * cs.stride);
  out.values.noalias() = weights * local;
  out.values.colwise() += bias.col(0);
  if (cols) *cols = std::move(local);
  return out;
}

/// Backward convolution. Accumulates into grad_w / grad_b and, when
/// grad_in is non-null, into the input gradient.
template <typename Scalar>
void conv2d_backward(const FeatureMap<Scalar>& grad_out, const RowMatrix<Scalar>& cols,
                     const Matrix<Scalar>& weights, const ConvShape& cs, Matrix<Scalar>& grad_w,
                     Matrix<Scalar>& grad_b, FeatureMap<Scalar>* grad_in) {
  grad_w.noalias() += grad_out.values * cols.transpose();
  grad_b += grad_out.values.rowwise().sum();
  if (grad_in) {
    RowMatrix<Scalar> dcols = weights.transpose() * grad_out.values;
    col2im(dcols, cs, *grad_in);
  }
}

template <typename Derived>
void relu_inplace(Eigen::MatrixBase<Derived>& x) {
  x = x.cwiseMax(typename Derived::Scalar(0));
}

/// Zeroes gradient entries where the forward activation was clipped.
template <typename DerivedG, typename DerivedA>
void relu_backward(Eigen::MatrixBase<DerivedG>& grad, const Eigen::MatrixBase<DerivedA>& activation) {
  using S = typename DerivedG::Scalar;
  grad = (activation.array() > S(0)).select(grad, S(0));
}

/// Fully connected layer over a batch of row vectors: Y = X W^T + b.
template <typename Scalar>
Matrix<Scalar> linear(const Matrix<Scalar>& x, const Matrix<Scalar>& weights,
                      const Matrix<Scalar>& bias) {
  if (x.cols() != weights.cols()) throw ConfigError("linear: input width does not match weights");
  Matrix<Scalar> y = x * weights.transpose();
  y.rowwise() += bias.col(0).transpose();
  return y;
}

/// Backward of linear(). Returns dL/dX.
template <typename Scalar>
Matrix<Scalar> linear_backward(const Matrix<Scalar>& grad_y, const Matrix<Scalar>& x,
                               const Matrix<Scalar>& weights, Matrix<Scalar>& grad_w,
                               Matrix<Scalar>& grad_b) {
  grad_w.noalias() += grad_y.transpose() * x;
  grad_b += grad_y.colwise().sum().transpose();
  return grad_y * weights;
}

/// Row-wise softmax.
template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Scalar m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

inline constexpr double kDefaultSmoothL1Beta = 1.0;

/// Robust loss: 0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise.
template <typename Scalar>
Scalar smooth_l1(Scalar x, Scalar beta = Scalar(kDefaultSmoothL1Beta)) {
  const Scalar a = std::abs(x);
  if (beta <= Scalar(0)) return a;
  return a < beta ? Scalar(0.5) * x * x / beta : a - Scalar(0.5) * beta;
}

template <typename Scalar>
Scalar smooth_l1_grad(Scalar x, Scalar beta = Scalar(kDefaultSmoothL1Beta)) {
  const Scalar a = std::abs(x);
  if (beta > Scalar(0) && a < beta) return x / beta;
  return x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0));
}

}  // namespace wamd::nn
