#pragma once

#include <cmath>

#include <Eigen/Core>

#include "wamd/errors.hpp"

// Confidence-aware fusion. Each modality gets a two-class auxiliary
// classifier; its foreground/background probabilities decide how much of
// that modality's region feature reaches the fused representation.

namespace wamd {

template <typename Scalar>
struct ConfidenceWeightsT {
  Scalar w_ref{1};
  Scalar w_sensed{1};
  Scalar w_disagree{1};
  Scalar p1_ref{0.5}, p0_ref{0.5};
  Scalar p1_sensed{0.5}, p0_sensed{0.5};

  /// Multiplier applied to the sensed feature.
  Scalar sensed_gain() const { return w_sensed * w_disagree; }
};

using ConfidenceWeights = ConfidenceWeightsT<double>;

namespace detail {
template <typename Scalar>
void check_probability(Scalar p, const char* what) {
  if (!(p >= Scalar(0) && p <= Scalar(1))) {
    throw ValidationError(std::string(what) + " must lie in [0, 1]");
  }
}
template <typename Scalar>
Scalar sgn(Scalar v) {
  return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0));
}
}  // namespace detail

/// |p1 - p0| for a two-class softmax.
template <typename Scalar>
Scalar modality_confidence(Scalar p1, Scalar p0) {
  detail::check_probability(p1, "foreground probability");
  detail::check_probability(p0, "background probability");
  if (std::abs(p1 + p0 - Scalar(1)) > Scalar(1e-6)) {
    throw ValidationError("modality_confidence: probabilities must sum to one");
  }
  return std::abs(p1 - p0);
}

/// 1 - |p1_ref - p1_sensed|; equals 1 - |p0_ref - p0_sensed| for two classes.
template <typename Scalar>
Scalar disagreement_weight(Scalar p1_ref, Scalar p1_sensed) {
  detail::check_probability(p1_ref, "reference probability");
  detail::check_probability(p1_sensed, "sensed probability");
  return Scalar(1) - std::abs(p1_ref - p1_sensed);
}

template <typename Scalar>
ConfidenceWeightsT<Scalar> confidence_weights(Scalar p1_ref, Scalar p1_sensed) {
  ConfidenceWeightsT<Scalar> w;
  w.p1_ref = p1_ref;
  w.p0_ref = Scalar(1) - p1_ref;
  w.p1_sensed = p1_sensed;
  w.p0_sensed = Scalar(1) - p1_sensed;
  w.w_ref = modality_confidence(w.p1_ref, w.p0_ref);
  w.w_sensed = modality_confidence(w.p1_sensed, w.p0_sensed);
  w.w_disagree = disagreement_weight(p1_ref, p1_sensed);
  return w;
}

/// fused = w_ref * rf_ref + (w_sensed * w_disagree) * rf_sensed.
template <typename DerivedA, typename DerivedB>
auto reweight_fuse(const Eigen::MatrixBase<DerivedA>& rf_ref,
                   const Eigen::MatrixBase<DerivedB>& rf_sensed,
                   const ConfidenceWeightsT<typename DerivedA::Scalar>& w) {
  if (rf_ref.rows() != rf_sensed.rows() || rf_ref.cols() != rf_sensed.cols()) {
    throw ConfigError("reweight_fuse: region feature shapes differ");
  }
  using Scalar = typename DerivedA::Scalar;
  using Plain = Eigen::Matrix<Scalar, DerivedA::RowsAtCompileTime, DerivedA::ColsAtCompileTime,
                              DerivedA::IsRowMajor ? Eigen::RowMajor : Eigen::ColMajor>;
  Plain fused = w.w_ref * rf_ref + w.sensed_gain() * rf_sensed;
  return fused;
}

/// Gradients of reweight_fuse with respect to both region features and the
/// two foreground probabilities that produced the weights.
template <typename Scalar>
struct FuseGradient {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> d_ref;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> d_sensed;
  Scalar d_p1_ref{0};
  Scalar d_p1_sensed{0};
};

template <typename DerivedG, typename DerivedA, typename DerivedB>
FuseGradient<typename DerivedG::Scalar> reweight_fuse_backward(
    const Eigen::MatrixBase<DerivedG>& grad_fused, const Eigen::MatrixBase<DerivedA>& rf_ref,
    const Eigen::MatrixBase<DerivedB>& rf_sensed,
    const ConfidenceWeightsT<typename DerivedG::Scalar>& w) {
  using Scalar = typename DerivedG::Scalar;
  FuseGradient<Scalar> g;
  g.d_ref = w.w_ref * grad_fused;
  g.d_sensed = w.sensed_gain() * grad_fused;
  const Scalar g_wr = (grad_fused.array() * rf_ref.array()).sum();
  const Scalar g_sens = (grad_fused.array() * rf_sensed.array()).sum();
  const Scalar g_ws = g_sens * w.w_disagree;
  const Scalar g_wd = g_sens * w.w_sensed;
  // w = |2 p1 - 1|, w_d = 1 - |p1_ref - p1_sensed|.
  const Scalar s_diff = detail::sgn(w.p1_ref - w.p1_sensed);
  g.d_p1_ref = g_wr * Scalar(2) * detail::sgn(Scalar(2) * w.p1_ref - Scalar(1)) - g_wd * s_diff;
  g.d_p1_sensed = g_ws * Scalar(2) * detail::sgn(Scalar(2) * w.p1_sensed - Scalar(1)) + g_wd * s_diff;
  return g;
}

}  // namespace wamd
