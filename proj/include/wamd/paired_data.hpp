#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "wamd/box3d.hpp"
#include "wamd/geometry.hpp"
#include "wamd/tensor.hpp"

namespace wamd {

/// Single-channel image with values in [0, 1], row-major (height x width).
using Image = RowMatrix<double>;

inline constexpr int kAnnotationSchemaVersion = 1;

enum class Occlusion { kNone, kPartial, kHeavy };

std::string to_string(Occlusion o);
Occlusion occlusion_from_string(const std::string& s);

struct PairedObject {
  int pair_id{0};
  std::string class_label{"person"};
  std::optional<Box2d> ref_box;
  std::optional<Box2d> sensed_box;
  bool unpaired{false};
  Occlusion occlusion{Occlusion::kNone};
  bool truncated{false};             // sensed box extends past its image
  std::vector<double> depth_patch;   // meters, optional
  std::optional<Box3D> box3d;        // RGB-D scenes only

  /// Throws ValidationError when the pairing invariants are broken.
  void validate() const;
  friend bool operator==(const PairedObject&, const PairedObject&) = default;
};

/// Smooth displacement field: a per-scene base vector whose magnitude grows
/// quadratically with distance from the image center, reaching `edge_gain`
/// times the base at `smoothness_scale` pixels and beyond.
struct ShiftField {
  double base_dx{0};
  double base_dy{0};
  double edge_gain{1};
  double smoothness_scale{32};
  double center_x{0};
  double center_y{0};

  Eigen::Vector2d at(double x, double y) const;
  friend bool operator==(const ShiftField&, const ShiftField&) = default;
};

struct ShiftFieldConfig {
  double base_shift{3.0};        // mean displacement magnitude, pixels
  double edge_gain{2.0};
  double smoothness_scale{40.0};
  double noise_sigma{0.5};       // per-object jitter, pixels
  double unpaired_rate{0.125};
  /// Fixed direction in degrees; isotropic when absent.
  std::optional<double> direction_deg;

  void validate() const;
};

/// Everything the generator needs besides the canvas, count and seed.
struct SceneGenConfig {
  ShiftFieldConfig shift;
  double min_width{10}, max_width{16};
  double min_aspect{1.3}, max_aspect{2.0};  // height / width
  int n_distractors{2};
  double pixel_noise{0.03};
  double ref_noise_scale{1.0};  // reference noise relative to pixel_noise
  bool depth{false};            // sensed modality is a depth map
  CameraIntrinsics intrinsics{60.0, 32.0, 32.0};
  double depth_scale{10.0};     // meters per unit sensed intensity
  std::string class_label{"person"};
  DimensionTable class_dims{{"object", {0.6, 0.6, 0.9}}};

  void validate() const;
};

struct ScenePair {
  std::string scene_id;
  std::string split{"train"};
  Image ref_image;
  Image sensed_image;
  std::vector<PairedObject> objects;
  std::optional<ShiftField> shift_field;
  std::optional<CameraIntrinsics> intrinsics;
  double depth_scale{0};        // > 0 iff the sensed image is depth
  int applied_dx{0}, applied_dy{0};

  Extent extent() const {
    return {static_cast<int>(ref_image.cols()), static_cast<int>(ref_image.rows())};
  }
  bool has_depth() const { return depth_scale > 0; }
  friend bool operator==(const ScenePair&, const ScenePair&) = default;
};

/// Deterministic synthetic weakly-aligned pair. Boxes are snapped to a
/// 1/256 pixel grid and intensities to 16-bit levels so files round-trip
/// exactly.
ScenePair generate_scene(const SceneGenConfig& config, const Extent& canvas, int n_objects,
                         std::uint64_t seed);

/// Seed for scene `index` derived from a master seed.
std::uint64_t scene_seed(std::uint64_t master_seed, int index);

/// Translates the sensed image (zero padding) and sensed boxes by integer
/// pixels; the reference side is untouched.
ScenePair shift_image(const ScenePair& scene, int dx, int dy);

struct ShiftStatistics {
  std::vector<int> magnitude_hist;   // bin k counts |shift| rounded to k pixels
  std::vector<int> direction_hist;   // 8 bins of 45 degrees, nonzero shifts only
  int paired{0};
  int unpaired{0};
  int shifted{0};                    // paired objects with |shift| >= 0.5 px

  int mode_bin() const;
  double shifted_fraction() const { return paired ? double(shifted) / paired : 0.0; }
};

ShiftStatistics shift_statistics(const std::vector<ScenePair>& dataset);

/// Depth values (meters) of the sensed image inside `box`; empty when the
/// scene has no depth.
std::vector<double> depth_patch(const ScenePair& scene, const Box2d& box);

/// Annotation document I/O. Images are referenced by relative file name and
/// loaded by load_dataset.
struct DatasetMeta {
  int schema_version{kAnnotationSchemaVersion};
  std::string ref_modality{"thermal"};
  std::string sensed_modality{"color"};
  std::map<std::string, std::string> extra;
};

void save_annotations(const std::vector<ScenePair>& scenes, const std::filesystem::path& path,
                      const DatasetMeta& meta = {});

/// Scenes with metadata and objects only (images left empty).
std::vector<ScenePair> load_annotations(const std::filesystem::path& path, DatasetMeta* meta = nullptr);

/// Annotations plus one 16-bit PNG per scene holding [ref | sensed].
void save_dataset(const std::vector<ScenePair>& scenes, const std::filesystem::path& dir,
                  const DatasetMeta& meta = {});
std::vector<ScenePair> load_dataset(const std::filesystem::path& dir, DatasetMeta* meta = nullptr);

std::string scene_image_name(const ScenePair& scene);

}  // namespace wamd
