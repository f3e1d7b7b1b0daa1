#pragma once

#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "wamd/geometry.hpp"
#include "wamd/roi_align.hpp"
#include "wamd/tensor.hpp"

// Region feature alignment: per-RoI shift prediction, re-pooling at the
// predicted sensed position, and the losses that supervise it.

namespace wamd {

struct PairedObject;  // paired_data.hpp
struct Proposal;      // detector.hpp

struct LossConfig {
  double lambda1{0.75};  // shift loss weight
  double lambda2{0.25};  // adjacent similarity weight
  double smooth_l1_beta{1.0};
};

struct JitterConfig {
  double sigma0{0.05};  // std of t^j_x
  double sigma1{0.05};  // std of t^j_y
};

/// How reference and sensed region features are combined before the shift head.
enum class Combiner { kSum, kConcat };

struct ShiftPrediction {
  int roi_index{0};
  ShiftTarget predicted;
  std::optional<ShiftTarget> target;
  std::optional<ShiftTarget> neighbor_predicted;
};

/// Two fully connected layers mapping the combined region feature to (t_x, t_y).
struct ShiftHead {
  Eigen::MatrixXd w1;  // hidden x input
  Eigen::MatrixXd b1;  // hidden x 1
  Eigen::MatrixXd w2;  // 2 x hidden
  Eigen::MatrixXd b2;  // 2 x 1
  Combiner combiner{Combiner::kSum};

  static ShiftHead zeros(int region_size, int hidden, Combiner combiner = Combiner::kSum);
  int input_size() const { return static_cast<int>(w1.cols()); }
};

struct ShiftHeadCache {
  Eigen::MatrixXd input;   // N x input_size
  Eigen::MatrixXd hidden;  // N x hidden (post-ReLU)
};

struct ShiftHeadGrad {
  Eigen::MatrixXd w1, w2;
  Eigen::MatrixXd b1, b2;
  static ShiftHeadGrad zeros_like(const ShiftHead& h);
};

/// Flattens one region feature (C x H x W) into a row.
Eigen::RowVectorXd flatten(const FeatureMapd& region);

/// Builds the head input rows from per-RoI reference and sensed features
/// (N x C*H*W each) using the head's combiner.
Eigen::MatrixXd combine_regions(const Eigen::MatrixXd& ref_rows, const Eigen::MatrixXd& sensed_rows,
                                Combiner combiner);

/// Splits a gradient w.r.t. combined rows back onto the two modalities.
void split_combined_grad(const Eigen::MatrixXd& grad_combined, Combiner combiner, int region_size,
                         Eigen::MatrixXd& grad_ref, Eigen::MatrixXd& grad_sensed);

/// Batched forward: rows of (ref, sensed) region features -> N x 2 shifts.
Eigen::MatrixXd shift_head_forward(const ShiftHead& head, const Eigen::MatrixXd& ref_rows,
                                   const Eigen::MatrixXd& sensed_rows, ShiftHeadCache* cache = nullptr);

/// Backward of shift_head_forward. Accumulates parameter gradients and
/// returns dL/d(combined input).
Eigen::MatrixXd shift_head_backward(const ShiftHead& head, const ShiftHeadCache& cache,
                                    const Eigen::MatrixXd& grad_out, ShiftHeadGrad& grad);

/// Single-RoI convenience wrapper.
ShiftTarget predict_region_shift(const FeatureMapd& rf_ref, const FeatureMapd& rf_sensed,
                                 const ShiftHead& head);

/// pool_region(f_sensed, apply_shift(roi, t), size).
PooledRegion<double> align_and_repool(const FeatureMapd& f_sensed, const Box2d& roi,
                                      const ShiftTarget& t, const PoolSize& size = {});

/// (1 / N_shift) * sum_i p*_i smoothL1(t_i - t*_i), N_shift = number of
/// RoIs with p* = 1. Throws if such a RoI has no target.
double shift_loss(std::span<const ShiftPrediction> predictions, std::span<const int> labels,
                  double beta = 1.0);

/// d shift_loss / d predicted, one row per prediction.
Eigen::MatrixX2d shift_loss_grad(std::span<const ShiftPrediction> predictions,
                                 std::span<const int> labels, double beta = 1.0);

/// Same penalty applied to the neighbour predictions against the RoI targets.
double asc_loss(std::span<const ShiftPrediction> predictions, std::span<const int> labels,
                double beta = 1.0);
Eigen::MatrixX2d asc_loss_grad(std::span<const ShiftPrediction> predictions,
                               std::span<const int> labels, double beta = 1.0);

/// The roi translated by +-stride along one axis, chosen uniformly from the
/// four neighbours. `direction` receives 0..3 = (+x, -x, +y, -y) when non-null.
Box2d asc_pair(const Box2d& roi, int feature_stride, std::mt19937_64& rng, int* direction = nullptr);

struct JitteredRoi {
  Box2d roi;
  ShiftTarget jitter;  // t^j
};

/// Draws t^j ~ N(0, sigma0^2) x N(0, sigma1^2) and moves the roi by it.
JitteredRoi roi_jitter(const Box2d& roi, const JitterConfig& cfg, std::mt19937_64& rng);

/// Target for the jittered roi so that aligning it lands where aligning the
/// original roi with `target` would: t*' = t* - t^j.
inline ShiftTarget enrich_target(const ShiftTarget& target, const ShiftTarget& jitter) {
  return target - jitter;
}

/// Fast R-CNN box deltas with fixed weights (10, 10, 5, 5).
Eigen::Vector4d encode_box_deltas(const Box2d& roi, const Box2d& gt);
Box2d decode_box_deltas(const Box2d& roi, const Eigen::Vector4d& deltas);

struct RoiLabel {
  int p_star{0};            // 1 foreground, 0 background, -1 ignored
  int object_index{-1};     // matched object for positives
  double max_iou{0};
  Eigen::Vector4d g_star{Eigen::Vector4d::Zero()};
  std::optional<ShiftTarget> t_star;  // absent for background and unpaired positives
};

/// Labels proposals by IoU against reference boxes only.
std::vector<RoiLabel> assign_minibatch_labels(std::span<const Box2d> rois,
                                              std::span<const PairedObject> objects,
                                              double fg_thr = 0.5, double bg_thr = 0.5);

struct MultiTaskLoss {
  double cls{0};
  double shift{0};
  double asc{0};
  double reg{0};
  double total{0};
};

struct MultiTaskGrad {
  Eigen::MatrixXd d_logits;    // N x 2
  Eigen::MatrixX2d d_shift;    // N x 2
  Eigen::MatrixX2d d_asc;      // N x 2 (neighbour predictions)
  Eigen::MatrixXd d_deltas;    // N x 4
};

/// Inputs for one minibatch: classification logits (N x 2), predicted box
/// deltas (N x 4), per-RoI labels, and shift/neighbour predictions (the
/// latter may be empty when alignment is disabled).
struct MultiTaskInputs {
  Eigen::MatrixXd logits;
  Eigen::MatrixXd deltas;
  std::vector<RoiLabel> labels;
  std::vector<ShiftPrediction> shifts;
  bool with_asc{true};
};

/// L = L_cls + lambda1 L_shift + lambda2 L_asc + L_reg.
MultiTaskLoss multi_task_loss(const MultiTaskInputs& in, const LossConfig& cfg,
                              MultiTaskGrad* grad = nullptr);

}  // namespace wamd
