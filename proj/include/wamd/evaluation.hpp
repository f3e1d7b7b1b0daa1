#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wamd/detector.hpp"
#include "wamd/paired_data.hpp"
#include "wamd/version.hpp"

namespace wamd {

/// Which ground-truth objects count. Objects failing the filter become
/// ignore regions: matching them is neither a hit nor a false positive.
struct EvalFilter {
  double min_height{0.0};  // pixels
  Occlusion max_occlusion{Occlusion::kPartial};

  bool keeps(const PairedObject& o, const Box2d& box) const;
};

struct GtBox {
  Box2d box;
  std::string class_label;
  bool ignore{false};
  std::optional<Box3D> box3d;
};

using ImageGt = std::vector<GtBox>;
using ImageDetections = std::vector<DetectionResult>;

enum class Modality { kRef, kSensed };

/// Ground truth in one modality's frame. Objects missing from that modality
/// are kept as ignore regions at their other-modality box.
std::vector<ImageGt> modality_ground_truth(const std::vector<ScenePair>& scenes, Modality m,
                                           const EvalFilter& filter = {});

struct CurvePoint {
  double fppi{0};
  double miss_rate{1};
};

/// Miss rate against false positives per image, one point per distinct
/// confidence level, in order of decreasing threshold.
std::vector<CurvePoint> miss_rate_curve(const std::vector<ImageDetections>& detections,
                                        const std::vector<ImageGt>& gt, double iou_thr = 0.5);

/// Log-average of the curve over 9 FPPI points in [1e-2, 1e0].
double log_average_miss_rate(const std::vector<CurvePoint>& curve);
double log_average_miss_rate(const std::vector<ImageDetections>& detections, const std::vector<ImageGt>& gt,
                             double iou_thr = 0.5);

double modality_mr(const std::vector<ImageDetections>& detections, const std::vector<ScenePair>& scenes,
                   Modality m, const EvalFilter& filter = {});

enum class BoxDims { k2D, k3D };

/// Per-class all-point interpolated AP averaged over classes present in the
/// ground truth.
double mean_average_precision(const std::vector<ImageDetections>& detections, const std::vector<ImageGt>& gt,
                              double iou_thr, BoxDims dims);

inline constexpr double kIouThr2D = 0.5;
inline constexpr double kIouThr3D = 0.25;

enum class MetricKind { kMR, kMAP };

/// Relative degradation, positive when performance got worse.
double degradation_rate(double original, double degraded, MetricKind kind);

enum class Metric { kMr, kMrRef, kMrSensed, kMap2d, kMap3d };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);
MetricKind metric_kind(Metric m);

/// Scores detections on scenes with the chosen metric.
double score(Metric metric, const std::vector<ImageDetections>& detections, const std::vector<ScenePair>& scenes,
             const EvalFilter& filter = {});

struct EvalSettings {
  Metric metric{Metric::kMr};
  EvalFilter filter;
  double score_floor{0.05};  // detections kept for scoring
  int workers{1};
};

/// detect() on every scene; results in scene order regardless of workers.
std::vector<ImageDetections> run_detector(const Model& model, const std::vector<ScenePair>& scenes,
                                          double tau, int workers = 1);

/// Metric as a function of an integer sensed-image shift, memoized.
class ShiftEvaluator {
 public:
  using Fn = std::function<double(int dx, int dy)>;

  explicit ShiftEvaluator(Fn fn) : fn_(std::move(fn)) {}
  ShiftEvaluator(const Model& model, const std::vector<ScenePair>& scenes, const EvalSettings& settings);

  double operator()(int dx, int dy);
  MetricKind kind() const { return kind_; }
  void set_kind(MetricKind k) { kind_ = k; }
  int evaluations() const { return static_cast<int>(cache_.size()); }

 private:
  Fn fn_;
  MetricKind kind_{MetricKind::kMR};
  std::map<std::pair<int, int>, double> cache_;
};

struct SurfacePoint {
  int dx{0};
  int dy{0};
  double value{0};
};

std::vector<std::pair<int, int>> shift_grid(int half_extent);

std::vector<SurfacePoint> robustness_sweep(ShiftEvaluator& eval, const std::vector<std::pair<int, int>>& shifts);

/// Integer pixel step of one unit along a protocol angle (0, 45, 90, 135).
std::pair<int, int> direction_step(int angle_deg);

struct WeakBound {
  int angle_deg{0};
  std::optional<int> plus;   // B_u1, along +direction
  std::optional<int> minus;  // B_u2, along -direction
  int max_px{0};
};

/// Smallest k in 1..max_px with degradation >= 0.5 at k * step (and -k * step).
WeakBound weak_aligned_bound(ShiftEvaluator& eval, int angle_deg, int max_px);

/// Shift multiples round(i * bound / 5), i = 1..5.
std::vector<int> directional_schedule(int bound);

struct DirectionalStats {
  int angle_deg{0};
  double origin{0};
  double mean{0};
  double sigma{0};  // population standard deviation
  std::vector<SurfacePoint> samples;
};

/// Ten samples (five per side) between the origin and the bounds along the
/// angle. Absent bounds fall back to max_px.
DirectionalStats directional_stats(ShiftEvaluator& eval, const WeakBound& bound);

struct DegradationPoint {
  int dx{0};
  int dy{0};
  double rate{0};
};

struct EvalReport {
  std::string tool_version{wamd::tool_version()};
  std::string metric;
  std::string checkpoint;
  int scenes{0};
  std::optional<double> mr, mr_ref, mr_sensed, map2d, map3d;
  std::vector<CurvePoint> mr_curve;
  std::vector<SurfacePoint> shift_surface;
  std::vector<DirectionalStats> directional;
  std::vector<DegradationPoint> degradation;
  std::vector<WeakBound> weak_bounds;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Detections file: {"detections": [{"scene_id", "box": [x0,y0,x1,y1],
/// "score", "class"?, "box3d"?: [x,y,z,l,w,h,theta]}]}. Returned in
/// the order of `scenes`.
std::vector<ImageDetections> load_detections(const std::filesystem::path& path, const std::vector<ScenePair>& scenes);
void save_detections(const std::vector<ImageDetections>& detections, const std::vector<ScenePair>& scenes,
                     const std::filesystem::path& path);

}  // namespace wamd
