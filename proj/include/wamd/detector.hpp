#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "wamd/box3d.hpp"
#include "wamd/caf.hpp"
#include "wamd/geometry.hpp"
#include "wamd/nn.hpp"
#include "wamd/paired_data.hpp"
#include "wamd/rfa.hpp"
#include "wamd/roi_align.hpp"
#include "wamd/tensor.hpp"

namespace wamd {

/// Architecture and module switches. Serialized into checkpoints.
struct ModelConfig {
  int input_width{64};
  int input_height{64};
  std::vector<int> channels{8, 16, 16};  // per conv block
  std::vector<int> strides{1, 2, 1};
  int rpn_channels{16};
  std::vector<double> anchor_sizes{12.0, 18.0, 26.0};  // sqrt(area), pixels
  std::vector<double> anchor_aspects{1.6};             // height / width
  PoolSize pool{7, 7, 2};
  int head_hidden{128};
  int shift_hidden{64};
  double context_factor{kDefaultContextFactor};
  Combiner combiner{Combiner::kSum};
  bool rfa{true};
  bool jitter{true};
  bool caf{true};
  bool asc{true};
  bool box3d{false};
  std::string class_label{"person"};
  DimensionTable class_dims{{"object", {0.6, 0.6, 0.9}}};
  // Inference.
  int rpn_pre_nms{600};
  double rpn_nms{0.7};
  int proposals_test{100};
  double nms_iou{0.5};

  int feature_stride() const;
  int feature_channels() const { return channels.back(); }
  int num_anchors() const { return static_cast<int>(anchor_sizes.size() * anchor_aspects.size()); }
  int region_size() const { return feature_channels() * pool.height * pool.width; }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON dump.
  std::uint64_t hash() const;
};

struct ConvLayer {
  Eigen::MatrixXd w;  // out x (in * k * k)
  Eigen::MatrixXd b;  // out x 1
  nn::ConvShape shape;
};

struct DenseLayer {
  Eigen::MatrixXd w;  // out x in
  Eigen::MatrixXd b;  // out x 1
};

struct Backbone {
  std::vector<ConvLayer> convs;
};

struct RpnHead {
  ConvLayer conv;
  ConvLayer cls;  // 1x1, one logit per anchor
  ConvLayer box;  // 1x1, four deltas per anchor
};

struct CafHead {
  DenseLayer ref;     // region -> 2 logits
  DenseLayer sensed;  // region -> 2 logits
};

struct DetectionHead {
  DenseLayer fc;
  DenseLayer cls;
  DenseLayer box;
  DenseLayer box3d;
};

/// Every trainable tensor. The same layout holds gradients and momenta.
struct ModelParams {
  Backbone ref;
  Backbone sensed;
  RpnHead rpn;
  ShiftHead rfa;
  CafHead caf;
  DetectionHead head;

  /// Visits every tensor in a fixed order with a stable name.
  void for_each(const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn);
  void for_each(const std::function<void(const std::string&, const Eigen::MatrixXd&)>& fn) const;
  ModelParams zeros_like() const;
  void set_zero();
};

class Model {
 public:
  /// Random initialization (He-normal weights, zero biases).
  Model(ModelConfig config, std::uint64_t seed);
  /// All tensors zero; used for shape templates and oracle checks.
  static Model zeros(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  explicit Model(ModelConfig config);
  ModelConfig config_;
  ModelParams params_;
  bool trained_{false};
};

struct Proposal {
  Box2d roi;
  double objectness{0};
};

struct DetectionResult {
  Box2d box;
  std::string class_label;
  double confidence{0};
  std::optional<Box3D> box3d;
  ShiftTarget shift;  // predicted alignment of the sensed region
};

struct FeaturePair {
  FeatureMapd ref;
  FeatureMapd sensed;
};

/// Two-stream feature extraction (independent weights per modality).
FeaturePair extract_features(const ScenePair& scene, const Model& model);

/// Anchors for a feature grid, ordered cell-major then size then aspect.
std::vector<Box2d> make_anchors(int feat_h, int feat_w, int stride, const std::vector<double>& sizes,
                                const std::vector<double>& aspects);

/// Greedy non-maximum suppression; returns kept indices in score order.
std::vector<int> nms(const std::vector<Box2d>& boxes, const std::vector<double>& scores, double iou_thr);

/// Fused region proposals: the RPN head runs on f_ref + f_sensed. At most
/// top_k proposals, sorted by objectness, clipped to the image.
std::vector<Proposal> propose_regions(const FeatureMapd& f_ref, const FeatureMapd& f_sensed, const RpnHead& rpn,
                                      const std::vector<Box2d>& anchors, int top_k, const Extent& image,
                                      int pre_nms = 600, double nms_iou = 0.7);

/// Per-RoI outputs of the second stage, before NMS and thresholding.
struct RegionOutputs {
  Eigen::MatrixXd logits;   // N x 2
  Eigen::MatrixXd deltas;   // N x 4
  Eigen::MatrixXd v3d;      // N x 7 (box3d models)
  std::vector<ShiftTarget> shifts;
  std::vector<Box2d> aligned;  // sensed regions actually pooled
  std::vector<ConfidenceWeights> weights;
};

/// Runs alignment, fusion and the detection head on the given RoIs.
RegionOutputs run_regions(const FeaturePair& features, const std::vector<Box2d>& rois, const Model& model,
                          const Extent& image);

/// Full pipeline: features, fused proposals, alignment, fusion, head, NMS;
/// keeps detections with confidence > tau.
std::vector<DetectionResult> detect(const ScenePair& scene, const Model& model, double tau);

/// Training hyper-parameters.
struct TrainConfig {
  int epochs{12};
  double learning_rate{0.02};
  double lr_drop_at{2.0 / 3.0};  // fraction of the run after which lr /= 10
  int warmup_iters{100};
  double momentum{0.9};
  double weight_decay{1e-4};
  double grad_clip{10.0};
  int rois_per_image{48};
  double fg_fraction{0.25};
  int rpn_batch{64};
  int rpn_post_nms_train{64};
  int gt_jitter_copies{4};
  // Let the head's gradient reach the auxiliary classifiers through the
  // fusion weights. Off: they learn from their own cross-entropy only.
  bool caf_weight_grad{false};
  double fg_thr{0.5};
  double bg_thr{0.5};
  LossConfig loss;
  JitterConfig jitter;
  std::uint64_t seed{7};

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct StepLosses {
  MultiTaskLoss head;
  double rpn{0};
  double aux{0};
  double l3d{0};
  double total{0};
  int dropped_3d{0};
};

/// One forward/backward pass on a scene. Gradients accumulate into `grad`.
StepLosses train_step(const Model& model, const ScenePair& scene, const TrainConfig& cfg, std::mt19937_64& rng,
                      ModelParams& grad);

struct EpochLog {
  int epoch{0};
  double learning_rate{0};
  StepLosses mean;
};

/// SGD with momentum over the scenes; returns one log entry per epoch.
/// `progress`, when set, is called after every epoch.
std::vector<EpochLog> train(Model& model, const std::vector<ScenePair>& scenes, const TrainConfig& cfg,
                            const std::function<void(const EpochLog&)>& progress = {});

}  // namespace wamd
