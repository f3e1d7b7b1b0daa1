#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wamd/detector.hpp"
#include "wamd/evaluation.hpp"
#include "wamd/paired_data.hpp"

// Subcommand implementations behind the wamd binary. Each writes its
// resolved configuration (with the tool version) into the output directory.

namespace wamd {

nlohmann::json to_json(const ShiftFieldConfig& c);
ShiftFieldConfig shift_field_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneGenConfig& c);
SceneGenConfig scene_gen_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EvalFilter& f);
EvalFilter eval_filter_from_json(const nlohmann::json& j);

struct GenDataConfig {
  std::uint64_t seed{1};
  int scenes{500};
  int test_scenes{100};  // the last test_scenes get split "test"
  int width{64};
  int height{64};
  int objects_per_scene{3};
  SceneGenConfig generator;

  void validate() const;
  nlohmann::json to_json() const;
  static GenDataConfig from_json(const nlohmann::json& j);
};

/// Scenes named scene_00000, scene_00001, ... with their split assigned.
std::vector<ScenePair> generate_dataset(const GenDataConfig& cfg);

struct DatasetSummary {
  int scenes{0};
  int train_scenes{0};
  int test_scenes{0};
  int objects{0};
  int unpaired{0};
  std::string checksum;  // over every file of the dataset directory
};

/// FNV-1a over the names and bytes of the regular files in `dir`, in
/// lexicographic order.
std::string directory_checksum(const std::filesystem::path& dir);

DatasetSummary cmd_gen_data(const GenDataConfig& cfg, const std::filesystem::path& out_dir);

struct TrainRunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string split{"train"};
  std::uint64_t init_seed{3};

  nlohmann::json to_json() const;
  static TrainRunConfig from_json(const nlohmann::json& j);
};

/// Ablation switches from the command line; set flags turn modules off.
struct AblationFlags {
  bool no_rfa{false};
  bool no_jitter{false};
  bool no_caf{false};
  bool no_asc{false};

  void apply(ModelConfig& m) const;
};

struct TrainSummary {
  std::filesystem::path checkpoint;
  double final_loss{0};
  int epochs{0};
};

inline constexpr const char* kCheckpointName = "model.ckpt";
inline constexpr const char* kLossLogName = "loss_log.csv";
inline constexpr const char* kResolvedConfigName = "resolved_config.json";
inline constexpr const char* kReportName = "eval_report.json";

/// Scenes of one split ("all" keeps every scene).
std::vector<ScenePair> select_split(std::vector<ScenePair> scenes, const std::string& split);

TrainSummary cmd_train(const TrainRunConfig& cfg, const std::filesystem::path& data_dir,
                       const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

struct EvalRunConfig {
  Metric metric{Metric::kMr};
  std::string split{"test"};
  EvalFilter filter;
  double score_floor{0.05};
  int workers{1};

  EvalSettings settings() const;
  nlohmann::json to_json() const;
  static EvalRunConfig from_json(const nlohmann::json& j);
};

/// Evaluates a checkpoint, or precomputed detections when `detections` is
/// set (the checkpoint may then be empty). Writes the report, the
/// detections and, for MR metrics, an MR-FPPI curve.
EvalReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                    const EvalRunConfig& cfg, const std::filesystem::path& out_dir,
                    const std::optional<std::filesystem::path>& detections = std::nullopt);

struct SweepOptions {
  std::optional<int> grid;  // half extent, e.g. 6 for -6..6
  bool directional{false};
  int max_px{6};
  /// Model whose degradation defines the weak aligned bounds; defaults to
  /// the swept checkpoint itself.
  std::optional<std::filesystem::path> bounds_from;
};

EvalReport cmd_sweep(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                     const SweepOptions& opts, const EvalRunConfig& cfg, const std::filesystem::path& out_dir);

/// Re-renders plots from saved reports: one surface PNG per report with a
/// shift surface and one SVG with every MR curve.
std::vector<std::filesystem::path> cmd_plot(const std::vector<std::filesystem::path>& reports,
                                            const std::filesystem::path& out_dir);

/// Worker count from WAMD_WORKERS, or 1.
int default_workers();

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);

/// {"tool_version", "command", "config"} written as resolved_config.json.
void write_resolved_config(const std::filesystem::path& out_dir, const std::string& command,
                           const nlohmann::json& config);

}  // namespace wamd
