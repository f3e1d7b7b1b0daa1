#include "wamd/rfa.hpp"

#include <cmath>

#include "wamd/nn.hpp"
#include "wamd/paired_data.hpp"

namespace wamd {

ShiftHead ShiftHead::zeros(int region_size, int hidden, Combiner combiner) {
  const int in = combiner == Combiner::kSum ? region_size : 2 * region_size;
  return {Eigen::MatrixXd::Zero(hidden, in), Eigen::MatrixXd::Zero(hidden, 1), Eigen::MatrixXd::Zero(2, hidden),
          Eigen::MatrixXd::Zero(2, 1), combiner};
}

ShiftHeadGrad ShiftHeadGrad::zeros_like(const ShiftHead& h) {
  return {Eigen::MatrixXd::Zero(h.w1.rows(), h.w1.cols()), Eigen::MatrixXd::Zero(h.w2.rows(), h.w2.cols()),
          Eigen::MatrixXd::Zero(h.b1.rows(), 1), Eigen::MatrixXd::Zero(h.b2.rows(), 1)};
}

Eigen::RowVectorXd flatten(const FeatureMapd& region) {
  return Eigen::Map<const Eigen::RowVectorXd>(region.values.data(), region.values.size());
}

Eigen::MatrixXd combine_regions(const Eigen::MatrixXd& ref_rows, const Eigen::MatrixXd& sensed_rows,
                                Combiner combiner) {
  if (ref_rows.rows() != sensed_rows.rows() || ref_rows.cols() != sensed_rows.cols()) {
    throw ConfigError("combine_regions: region feature shapes differ");
  }
  if (combiner == Combiner::kSum) return ref_rows + sensed_rows;
  Eigen::MatrixXd out(ref_rows.rows(), 2 * ref_rows.cols());
  out << ref_rows, sensed_rows;
  return out;
}

void split_combined_grad(const Eigen::MatrixXd& grad_combined, Combiner combiner, int region_size,
                         Eigen::MatrixXd& grad_ref, Eigen::MatrixXd& grad_sensed) {
  if (combiner == Combiner::kSum) {
    grad_ref = grad_combined;
    grad_sensed = grad_combined;
  } else {
    grad_ref = grad_combined.leftCols(region_size);
    grad_sensed = grad_combined.rightCols(region_size);
  }
}

Eigen::MatrixXd shift_head_forward(const ShiftHead& head, const Eigen::MatrixXd& ref_rows,
                                   const Eigen::MatrixXd& sensed_rows, ShiftHeadCache* cache) {
  Eigen::MatrixXd x = combine_regions(ref_rows, sensed_rows, head.combiner);
  if (x.cols() != head.w1.cols()) throw ConfigError("shift head: input size does not match weights");
  Eigen::MatrixXd hidden = nn::linear<double>(x, head.w1, head.b1);
  nn::relu_inplace(hidden);
  Eigen::MatrixXd out = nn::linear<double>(hidden, head.w2, head.b2);
  if (cache) {
    cache->input = std::move(x);
    cache->hidden = std::move(hidden);
  }
  return out;
}

Eigen::MatrixXd shift_head_backward(const ShiftHead& head, const ShiftHeadCache& cache,
                                    const Eigen::MatrixXd& grad_out, ShiftHeadGrad& grad) {
  Eigen::MatrixXd g_hidden = nn::linear_backward<double>(grad_out, cache.hidden, head.w2, grad.w2, grad.b2);
  nn::relu_backward(g_hidden, cache.hidden);
  return nn::linear_backward<double>(g_hidden, cache.input, head.w1, grad.w1, grad.b1);
}

ShiftTarget predict_region_shift(const FeatureMapd& rf_ref, const FeatureMapd& rf_sensed,
                                 const ShiftHead& head) {
  if (!rf_ref.same_shape(rf_sensed)) throw ConfigError("predict_region_shift: region shapes differ");
  const Eigen::MatrixXd r = flatten(rf_ref), s = flatten(rf_sensed);
  const Eigen::MatrixXd t = shift_head_forward(head, r, s);
  return {t(0, 0), t(0, 1)};
}

PooledRegion<double> align_and_repool(const FeatureMapd& f_sensed, const Box2d& roi, const ShiftTarget& t,
                                      const PoolSize& size) {
  return pool_region(f_sensed, apply_shift(roi, t), size);
}

namespace {

enum class Which { kCenter, kNeighbour };

const ShiftTarget* pick(const ShiftPrediction& p, Which which) {
  if (which == Which::kCenter) return &p.predicted;
  return p.neighbor_predicted ? &*p.neighbor_predicted : nullptr;
}

void check_sizes(std::span<const ShiftPrediction> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ConfigError("shift loss: one label per prediction required");
}

int count_aligned(std::span<const ShiftPrediction> predictions, std::span<const int> labels, Which which) {
  int n = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (labels[i] != 1) continue;
    if (!predictions[i].target) {
      throw ValidationError("shift loss: positive RoI " + std::to_string(predictions[i].roi_index) +
                            " has no shift target");
    }
    if (which == Which::kNeighbour && !predictions[i].neighbor_predicted) continue;
    ++n;
  }
  return n;
}

double penalty(std::span<const ShiftPrediction> predictions, std::span<const int> labels, double beta,
               Which which) {
  check_sizes(predictions, labels);
  const int n = count_aligned(predictions, labels, which);
  if (n == 0) return 0.0;
  double sum = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const ShiftTarget* t = pick(predictions[i], which);
    if (labels[i] != 1 || !t) continue;
    const ShiftTarget r = *t - *predictions[i].target;
    sum += nn::smooth_l1(r.tx, beta) + nn::smooth_l1(r.ty, beta);
  }
  return sum / n;
}

Eigen::MatrixX2d penalty_grad(std::span<const ShiftPrediction> predictions, std::span<const int> labels,
                              double beta, Which which) {
  check_sizes(predictions, labels);
  Eigen::MatrixX2d g = Eigen::MatrixX2d::Zero(static_cast<Eigen::Index>(predictions.size()), 2);
  const int n = count_aligned(predictions, labels, which);
  if (n == 0) return g;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const ShiftTarget* t = pick(predictions[i], which);
    if (labels[i] != 1 || !t) continue;
    const ShiftTarget r = *t - *predictions[i].target;
    g(static_cast<Eigen::Index>(i), 0) = nn::smooth_l1_grad(r.tx, beta) / n;
    g(static_cast<Eigen::Index>(i), 1) = nn::smooth_l1_grad(r.ty, beta) / n;
  }
  return g;
}

}  // namespace

double shift_loss(std::span<const ShiftPrediction> predictions, std::span<const int> labels, double beta) {
  return penalty(predictions, labels, beta, Which::kCenter);
}

Eigen::MatrixX2d shift_loss_grad(std::span<const ShiftPrediction> predictions, std::span<const int> labels,
                                 double beta) {
  return penalty_grad(predictions, labels, beta, Which::kCenter);
}

double asc_loss(std::span<const ShiftPrediction> predictions, std::span<const int> labels, double beta) {
  return penalty(predictions, labels, beta, Which::kNeighbour);
}

Eigen::MatrixX2d asc_loss_grad(std::span<const ShiftPrediction> predictions, std::span<const int> labels,
                               double beta) {
  return penalty_grad(predictions, labels, beta, Which::kNeighbour);
}

Box2d asc_pair(const Box2d& roi, int feature_stride, std::mt19937_64& rng, int* direction) {
  if (feature_stride < 1) throw ValidationError("asc_pair: stride must be >= 1");
  std::uniform_int_distribution<int> pick4(0, 3);
  const int d = pick4(rng);
  if (direction) *direction = d;
  const double s = feature_stride;
  switch (d) {
    case 0: return roi.translated(s, 0);
    case 1: return roi.translated(-s, 0);
    case 2: return roi.translated(0, s);
    default: return roi.translated(0, -s);
  }
}

JitteredRoi roi_jitter(const Box2d& roi, const JitterConfig& cfg, std::mt19937_64& rng) {
  if (cfg.sigma0 < 0 || cfg.sigma1 < 0) throw ValidationError("roi_jitter: sigmas must be non-negative");
  std::normal_distribution<double> gauss(0.0, 1.0);
  // Both draws are consumed even when a sigma is zero so the stream stays aligned.
  const double zx = gauss(rng), zy = gauss(rng);
  const ShiftTarget tj{cfg.sigma0 * zx, cfg.sigma1 * zy};
  return {apply_shift(roi, tj), tj};
}

namespace {
constexpr double kDeltaWeights[4] = {10.0, 10.0, 5.0, 5.0};
}

Eigen::Vector4d encode_box_deltas(const Box2d& roi, const Box2d& gt) {
  validate_box(roi, "roi");
  validate_box(gt, "gt");
  return {kDeltaWeights[0] * (gt.x - roi.x) / roi.w, kDeltaWeights[1] * (gt.y - roi.y) / roi.h,
          kDeltaWeights[2] * std::log(gt.w / roi.w), kDeltaWeights[3] * std::log(gt.h / roi.h)};
}

Box2d decode_box_deltas(const Box2d& roi, const Eigen::Vector4d& d) {
  constexpr double kClamp = 4.135;  // log(1000 / 16)
  const double dw = std::min(d(2) / kDeltaWeights[2], kClamp);
  const double dh = std::min(d(3) / kDeltaWeights[3], kClamp);
  return {roi.x + d(0) / kDeltaWeights[0] * roi.w, roi.y + d(1) / kDeltaWeights[1] * roi.h,
          roi.w * std::exp(dw), roi.h * std::exp(dh)};
}

std::vector<RoiLabel> assign_minibatch_labels(std::span<const Box2d> rois, std::span<const PairedObject> objects,
                                              double fg_thr, double bg_thr) {
  if (!(bg_thr >= 0 && bg_thr <= fg_thr && fg_thr <= 1)) {
    throw ValidationError("assign_minibatch_labels: need 0 <= bg_thr <= fg_thr <= 1");
  }
  std::vector<RoiLabel> out(rois.size());
  for (std::size_t i = 0; i < rois.size(); ++i) {
    RoiLabel& lab = out[i];
    for (std::size_t k = 0; k < objects.size(); ++k) {
      if (!objects[k].ref_box) continue;
      const double o = iou(rois[i], *objects[k].ref_box);
      if (o > lab.max_iou) {
        lab.max_iou = o;
        lab.object_index = static_cast<int>(k);
      }
    }
    if (lab.object_index >= 0 && lab.max_iou >= fg_thr) {
      lab.p_star = 1;
      const PairedObject& obj = objects[static_cast<std::size_t>(lab.object_index)];
      lab.g_star = encode_box_deltas(rois[i], *obj.ref_box);
      if (obj.sensed_box) lab.t_star = shift_targets(*obj.ref_box, *obj.sensed_box);
    } else if (lab.max_iou < bg_thr) {
      lab.p_star = 0;
      lab.object_index = -1;
    } else {
      lab.p_star = -1;
    }
  }
  return out;
}

MultiTaskLoss multi_task_loss(const MultiTaskInputs& in, const LossConfig& cfg, MultiTaskGrad* grad) {
  const auto n = static_cast<Eigen::Index>(in.labels.size());
  if (in.logits.rows() != n || in.logits.cols() != 2) throw ConfigError("multi_task_loss: logits must be N x 2");
  if (in.deltas.rows() != n || in.deltas.cols() != 4) throw ConfigError("multi_task_loss: deltas must be N x 4");
  MultiTaskLoss loss;
  if (grad) {
    grad->d_logits = Eigen::MatrixXd::Zero(n, 2);
    grad->d_deltas = Eigen::MatrixXd::Zero(n, 4);
    grad->d_shift = Eigen::MatrixX2d::Zero(n, 2);
    grad->d_asc = Eigen::MatrixX2d::Zero(n, 2);
  }
  int n_cls = 0;
  for (const auto& l : in.labels) n_cls += l.p_star >= 0 ? 1 : 0;
  if (n_cls > 0) {
    const Eigen::MatrixXd p = nn::softmax_rows<double>(in.logits);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int y = in.labels[static_cast<std::size_t>(i)].p_star;
      if (y < 0) continue;
      loss.cls -= std::log(std::max(p(i, y), 1e-300)) / n_cls;
      if (grad) {
        grad->d_logits.row(i) = p.row(i) / n_cls;
        grad->d_logits(i, y) -= 1.0 / n_cls;
      }
      if (y >= 1) {
        const auto& g_star = in.labels[static_cast<std::size_t>(i)].g_star;
        for (int k = 0; k < 4; ++k) {
          const double r = in.deltas(i, k) - g_star(k);
          loss.reg += nn::smooth_l1(r, cfg.smooth_l1_beta) / n_cls;
          if (grad) grad->d_deltas(i, k) = nn::smooth_l1_grad(r, cfg.smooth_l1_beta) / n_cls;
        }
      }
    }
  }
  if (!in.shifts.empty()) {
    if (static_cast<Eigen::Index>(in.shifts.size()) != n) throw ConfigError("multi_task_loss: one shift per RoI");
    // Only RoIs with a sensed counterpart are aligned.
    std::vector<int> align(in.labels.size());
    for (std::size_t i = 0; i < align.size(); ++i) {
      align[i] = (in.labels[i].p_star == 1 && in.shifts[i].target) ? 1 : 0;
    }
    loss.shift = shift_loss(in.shifts, align, cfg.smooth_l1_beta);
    if (grad) grad->d_shift = cfg.lambda1 * shift_loss_grad(in.shifts, align, cfg.smooth_l1_beta);
    if (in.with_asc) {
      loss.asc = asc_loss(in.shifts, align, cfg.smooth_l1_beta);
      if (grad) grad->d_asc = cfg.lambda2 * asc_loss_grad(in.shifts, align, cfg.smooth_l1_beta);
    }
  }
  loss.total = loss.cls + cfg.lambda1 * loss.shift + cfg.lambda2 * loss.asc + loss.reg;
  return loss;
}

}  // namespace wamd
