#include "wamd/commands.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json_util.hpp"
#include "wamd/plot.hpp"
#include "wamd/version.hpp"

namespace wamd {

using json = nlohmann::json;
using detail::check_keys;
using detail::read_opt;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config JSON

json to_json(const ShiftFieldConfig& c) {
  json j{{"base_shift", c.base_shift},
         {"edge_gain", c.edge_gain},
         {"smoothness_scale", c.smoothness_scale},
         {"noise_sigma", c.noise_sigma},
         {"unpaired_rate", c.unpaired_rate}};
  j["direction_deg"] = c.direction_deg ? json(*c.direction_deg) : json(nullptr);
  return j;
}

ShiftFieldConfig shift_field_config_from_json(const json& j) {
  check_keys(j, {"base_shift", "edge_gain", "smoothness_scale", "noise_sigma", "unpaired_rate", "direction_deg"},
             "shift config");
  ShiftFieldConfig c;
  read_opt(j, "base_shift", c.base_shift);
  read_opt(j, "edge_gain", c.edge_gain);
  read_opt(j, "smoothness_scale", c.smoothness_scale);
  read_opt(j, "noise_sigma", c.noise_sigma);
  read_opt(j, "unpaired_rate", c.unpaired_rate);
  if (j.contains("direction_deg") && !j.at("direction_deg").is_null()) {
    double d = 0;
    read_opt(j, "direction_deg", d);
    c.direction_deg = d;
  }
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("shift config: ") + e.what());
  }
  return c;
}

json to_json(const SceneGenConfig& c) {
  json dims = json::object();
  for (const auto& [k, d] : c.class_dims) dims[k] = {d.l, d.w, d.h};
  return {{"shift", to_json(c.shift)},
          {"min_width", c.min_width},
          {"max_width", c.max_width},
          {"min_aspect", c.min_aspect},
          {"max_aspect", c.max_aspect},
          {"n_distractors", c.n_distractors},
          {"pixel_noise", c.pixel_noise},
          {"ref_noise_scale", c.ref_noise_scale},
          {"depth", c.depth},
          {"intrinsics", {{"f", c.intrinsics.f}, {"ox", c.intrinsics.ox}, {"oy", c.intrinsics.oy}}},
          {"depth_scale", c.depth_scale},
          {"class_label", c.class_label},
          {"class_dims", dims}};
}

SceneGenConfig scene_gen_config_from_json(const json& j) {
  check_keys(j,
             {"shift", "min_width", "max_width", "min_aspect", "max_aspect", "n_distractors", "pixel_noise",
              "ref_noise_scale", "depth", "intrinsics", "depth_scale", "class_label", "class_dims"},
             "generator config");
  SceneGenConfig c;
  if (j.contains("shift")) c.shift = shift_field_config_from_json(j.at("shift"));
  read_opt(j, "min_width", c.min_width);
  read_opt(j, "max_width", c.max_width);
  read_opt(j, "min_aspect", c.min_aspect);
  read_opt(j, "max_aspect", c.max_aspect);
  read_opt(j, "n_distractors", c.n_distractors);
  read_opt(j, "pixel_noise", c.pixel_noise);
  read_opt(j, "ref_noise_scale", c.ref_noise_scale);
  read_opt(j, "depth", c.depth);
  if (j.contains("intrinsics")) {
    const json& k = j.at("intrinsics");
    check_keys(k, {"f", "ox", "oy"}, "generator intrinsics");
    read_opt(k, "f", c.intrinsics.f);
    read_opt(k, "ox", c.intrinsics.ox);
    read_opt(k, "oy", c.intrinsics.oy);
  }
  read_opt(j, "depth_scale", c.depth_scale);
  read_opt(j, "class_label", c.class_label);
  if (j.contains("class_dims")) {
    c.class_dims.clear();
    for (const auto& [k, v] : j.at("class_dims").items()) {
      if (!v.is_array() || v.size() != 3) throw ConfigError("config field 'class_dims." + k + "': expected [l, w, h]");
      c.class_dims[k] = {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
    }
  }
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  return c;
}

json to_json(const EvalFilter& f) {
  return {{"min_height", f.min_height}, {"max_occlusion", to_string(f.max_occlusion)}};
}

EvalFilter eval_filter_from_json(const json& j) {
  check_keys(j, {"min_height", "max_occlusion"}, "eval filter");
  EvalFilter f;
  read_opt(j, "min_height", f.min_height);
  if (j.contains("max_occlusion")) {
    std::string s;
    read_opt(j, "max_occlusion", s);
    try {
      f.max_occlusion = occlusion_from_string(s);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("eval filter: ") + e.what());
    }
  }
  if (!(f.min_height >= 0)) throw ConfigError("eval filter: min_height must be >= 0");
  return f;
}

void GenDataConfig::validate() const {
  if (scenes < 1) throw ConfigError("gen-data: scenes must be >= 1");
  if (test_scenes < 0 || test_scenes > scenes) throw ConfigError("gen-data: test_scenes must lie in [0, scenes]");
  if (width < 8 || height < 8) throw ConfigError("gen-data: canvas must be at least 8x8");
  if (objects_per_scene < 0) throw ConfigError("gen-data: objects_per_scene must be >= 0");
  try {
    generator.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
}

json GenDataConfig::to_json() const {
  return {{"seed", seed},
          {"scenes", scenes},
          {"test_scenes", test_scenes},
          {"width", width},
          {"height", height},
          {"objects_per_scene", objects_per_scene},
          {"generator", wamd::to_json(generator)}};
}

GenDataConfig GenDataConfig::from_json(const json& j) {
  check_keys(j, {"seed", "scenes", "test_scenes", "width", "height", "objects_per_scene", "generator"},
             "gen-data config");
  GenDataConfig c;
  read_opt(j, "seed", c.seed);
  read_opt(j, "scenes", c.scenes);
  read_opt(j, "test_scenes", c.test_scenes);
  read_opt(j, "width", c.width);
  read_opt(j, "height", c.height);
  read_opt(j, "objects_per_scene", c.objects_per_scene);
  if (j.contains("generator")) c.generator = scene_gen_config_from_json(j.at("generator"));
  c.validate();
  return c;
}

std::vector<ScenePair> generate_dataset(const GenDataConfig& cfg) {
  cfg.validate();
  std::vector<ScenePair> out;
  out.reserve(static_cast<std::size_t>(cfg.scenes));
  for (int i = 0; i < cfg.scenes; ++i) {
    ScenePair s = generate_scene(cfg.generator, {cfg.width, cfg.height}, cfg.objects_per_scene,
                                 scene_seed(cfg.seed, i));
    char id[32];
    std::snprintf(id, sizeof id, "scene_%05d", i);
    s.scene_id = id;
    s.split = i >= cfg.scenes - cfg.test_scenes ? "test" : "train";
    out.push_back(std::move(s));
  }
  return out;
}

json TrainRunConfig::to_json() const {
  return {{"model", model.to_json()}, {"train", train.to_json()}, {"split", split}, {"init_seed", init_seed}};
}

TrainRunConfig TrainRunConfig::from_json(const json& j) {
  check_keys(j, {"model", "train", "split", "init_seed"}, "train run config");
  TrainRunConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  read_opt(j, "split", c.split);
  read_opt(j, "init_seed", c.init_seed);
  return c;
}

void AblationFlags::apply(ModelConfig& m) const {
  if (no_rfa) m.rfa = false;
  if (no_jitter) m.jitter = false;
  if (no_caf) m.caf = false;
  if (no_asc) m.asc = false;
}

EvalSettings EvalRunConfig::settings() const {
  EvalSettings s;
  s.metric = metric;
  s.filter = filter;
  s.score_floor = score_floor;
  s.workers = workers;
  return s;
}

json EvalRunConfig::to_json() const {
  return {{"metric", to_string(metric)},
          {"split", split},
          {"filter", wamd::to_json(filter)},
          {"score_floor", score_floor},
          {"workers", workers}};
}

EvalRunConfig EvalRunConfig::from_json(const json& j) {
  check_keys(j, {"metric", "split", "filter", "score_floor", "workers"}, "eval config");
  EvalRunConfig c;
  if (j.contains("metric")) {
    std::string m;
    read_opt(j, "metric", m);
    try {
      c.metric = metric_from_string(m);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("eval config: ") + e.what());
    }
  }
  read_opt(j, "split", c.split);
  if (j.contains("filter")) c.filter = eval_filter_from_json(j.at("filter"));
  read_opt(j, "score_floor", c.score_floor);
  read_opt(j, "workers", c.workers);
  if (!(c.score_floor >= 0 && c.score_floor < 1)) throw ConfigError("eval config: score_floor must lie in [0, 1)");
  if (c.workers < 1) throw ConfigError("eval config: workers must be >= 1");
  return c;
}

// ---------------------------------------------------------------------------
// Files

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void write_resolved_config(const fs::path& out_dir, const std::string& command, const json& config) {
  write_json_file({{"tool_version", tool_version()}, {"command", command}, {"config", config}},
                  out_dir / kResolvedConfigName);
}

int default_workers() {
  const char* v = std::getenv("WAMD_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("WAMD_WORKERS must be a positive integer, got '") + v + "'");
  return static_cast<int>(n);
}

std::string directory_checksum(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(p[i]);
      h *= 1099511628211ULL;
    }
  };
  for (const auto& f : files) {
    const std::string name = f.generic_string();
    mix(name.data(), name.size() + 1);
    std::ifstream is(dir / f, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    const std::string bytes = ss.str();
    mix(bytes.data(), bytes.size());
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

// ---------------------------------------------------------------------------
// Commands

DatasetSummary cmd_gen_data(const GenDataConfig& cfg, const fs::path& out_dir) {
  const auto scenes = generate_dataset(cfg);
  DatasetMeta meta;
  if (cfg.generator.depth) meta.sensed_modality = "depth";
  fs::create_directories(out_dir);
  save_dataset(scenes, out_dir / "data", meta);

  DatasetSummary s;
  s.scenes = static_cast<int>(scenes.size());
  for (const auto& sc : scenes) {
    (sc.split == "test" ? s.test_scenes : s.train_scenes)++;
    for (const auto& o : sc.objects) {
      ++s.objects;
      if (o.unpaired) ++s.unpaired;
    }
  }
  s.checksum = directory_checksum(out_dir / "data");
  const auto stats = shift_statistics(scenes);
  json hist = stats.magnitude_hist;
  write_json_file({{"scenes", s.scenes},
                   {"train_scenes", s.train_scenes},
                   {"test_scenes", s.test_scenes},
                   {"objects", s.objects},
                   {"unpaired", s.unpaired},
                   {"unpaired_fraction", s.objects ? double(s.unpaired) / s.objects : 0.0},
                   {"shift_magnitude_hist", hist},
                   {"shift_direction_hist", stats.direction_hist},
                   {"shift_mode_px", stats.mode_bin()},
                   {"checksum", s.checksum}},
                  out_dir / "summary.json");
  write_resolved_config(out_dir, "gen-data", cfg.to_json());
  return s;
}

std::vector<ScenePair> select_split(std::vector<ScenePair> scenes, const std::string& split) {
  if (split == "all") return scenes;
  std::erase_if(scenes, [&](const ScenePair& s) { return s.split != split; });
  if (scenes.empty()) throw ConfigError("dataset has no scenes in split '" + split + "'");
  return scenes;
}

namespace {

fs::path dataset_root(const fs::path& data_dir) {
  // Accepts either the gen-data output directory or its data/ subdirectory.
  if (fs::exists(data_dir / "annotations.json")) return data_dir;
  if (fs::exists(data_dir / "data" / "annotations.json")) return data_dir / "data";
  throw ConfigError("no dataset found in " + data_dir.string() + " (missing annotations.json)");
}

std::vector<ScenePair> load_split(const fs::path& data_dir, const std::string& split) {
  return select_split(load_dataset(dataset_root(data_dir)), split);
}

}  // namespace

TrainSummary cmd_train(const TrainRunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                       std::ostream* progress) {
  cfg.model.validate();
  cfg.train.validate();
  const auto scenes = load_split(data_dir, cfg.split);
  fs::create_directories(out_dir);
  write_resolved_config(out_dir, "train", cfg.to_json());

  Model model(cfg.model, cfg.init_seed);
  std::ofstream log(out_dir / kLossLogName);
  if (!log) throw ConfigError("cannot write " + (out_dir / kLossLogName).string());
  log << "epoch,learning_rate,total,cls,shift,asc,reg,rpn,aux,l3d\n";
  log << std::setprecision(10);
  const auto logs = train(model, scenes, cfg.train, [&](const EpochLog& e) {
    const auto& m = e.mean;
    log << e.epoch << ',' << e.learning_rate << ',' << m.total << ',' << m.head.cls << ',' << m.head.shift << ','
        << m.head.asc << ',' << m.head.reg << ',' << m.rpn << ',' << m.aux << ',' << m.l3d << '\n';
    log.flush();
    if (progress) {
      *progress << "epoch " << e.epoch << "  lr " << e.learning_rate << "  loss " << m.total << '\n';
    }
  });

  TrainSummary s;
  s.checkpoint = out_dir / kCheckpointName;
  s.epochs = static_cast<int>(logs.size());
  s.final_loss = logs.empty() ? 0.0 : logs.back().mean.total;
  model.save(s.checkpoint);
  return s;
}

namespace {

void fill_headline(EvalReport& r, Metric metric, double v) {
  switch (metric) {
    case Metric::kMr: r.mr = v; break;
    case Metric::kMrRef: r.mr_ref = v; break;
    case Metric::kMrSensed: r.mr_sensed = v; break;
    case Metric::kMap2d: r.map2d = v; break;
    case Metric::kMap3d: r.map3d = v; break;
  }
}

void check_metric(Metric metric, const std::vector<ScenePair>& scenes) {
  if (metric != Metric::kMap3d) return;
  for (const auto& s : scenes) {
    if (!s.has_depth()) throw ConfigError("metric map3d needs a depth dataset; scene '" + s.scene_id + "' has none");
  }
}

}  // namespace

EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const EvalRunConfig& cfg,
                    const fs::path& out_dir, const std::optional<fs::path>& detections) {
  const auto scenes = load_split(data_dir, cfg.split);
  check_metric(cfg.metric, scenes);
  fs::create_directories(out_dir);
  json resolved = cfg.to_json();
  resolved["checkpoint"] = checkpoint.string();
  resolved["detections"] = detections ? json(detections->string()) : json(nullptr);
  write_resolved_config(out_dir, "eval", resolved);

  std::vector<ImageDetections> dets;
  if (detections) {
    dets = load_detections(*detections, scenes);
  } else {
    const Model model = Model::load(checkpoint);
    dets = run_detector(model, scenes, cfg.score_floor, cfg.workers);
    save_detections(dets, scenes, out_dir / "detections.json");
  }

  EvalReport r;
  r.metric = to_string(cfg.metric);
  r.checkpoint = detections ? detections->string() : checkpoint.string();
  r.scenes = static_cast<int>(scenes.size());
  const double v = score(cfg.metric, dets, scenes, cfg.filter);
  fill_headline(r, cfg.metric, v);
  if (metric_kind(cfg.metric) == MetricKind::kMR) {
    const Modality m = cfg.metric == Metric::kMrSensed ? Modality::kSensed : Modality::kRef;
    r.mr_curve = miss_rate_curve(dets, modality_ground_truth(scenes, m, cfg.filter));
    write_mr_curves_svg({{r.metric, r.mr_curve, v}}, out_dir / "mr_curve.svg");
  }
  write_json_file(r.to_json(), out_dir / kReportName);
  return r;
}

EvalReport cmd_sweep(const fs::path& checkpoint, const fs::path& data_dir, const SweepOptions& opts,
                     const EvalRunConfig& cfg, const fs::path& out_dir) {
  if (!opts.grid && !opts.directional) throw ConfigError("sweep: choose --grid and/or --directional");
  if (opts.grid && *opts.grid < 0) throw ConfigError("sweep: grid extent must be >= 0");
  if (opts.directional && opts.max_px < 1) throw ConfigError("sweep: max_px must be >= 1");
  const auto scenes = load_split(data_dir, cfg.split);
  check_metric(cfg.metric, scenes);
  const Model model = Model::load(checkpoint);
  if (!model.trained()) throw ConfigError("sweep: checkpoint " + checkpoint.string() + " is untrained");
  fs::create_directories(out_dir);
  json resolved = cfg.to_json();
  resolved["checkpoint"] = checkpoint.string();
  resolved["grid"] = opts.grid ? json(*opts.grid) : json(nullptr);
  resolved["directional"] = opts.directional;
  resolved["max_px"] = opts.max_px;
  resolved["bounds_from"] = opts.bounds_from ? json(opts.bounds_from->string()) : json(nullptr);
  write_resolved_config(out_dir, "sweep", resolved);

  const EvalSettings settings = cfg.settings();
  ShiftEvaluator eval(model, scenes, settings);
  EvalReport r;
  r.metric = to_string(cfg.metric);
  r.checkpoint = checkpoint.string();
  r.scenes = static_cast<int>(scenes.size());
  const double origin = eval(0, 0);
  fill_headline(r, cfg.metric, origin);

  auto add_degradation = [&](const SurfacePoint& p) {
    if (p.dx == 0 && p.dy == 0) return;
    const bool seen = std::any_of(r.degradation.begin(), r.degradation.end(),
                                  [&](const DegradationPoint& d) { return d.dx == p.dx && d.dy == p.dy; });
    if (seen) return;
    double rate = 0;
    try {
      rate = degradation_rate(origin, p.value, eval.kind());
    } catch (const MetricError&) {
      return;  // undefined for a zero original metric
    }
    r.degradation.push_back({p.dx, p.dy, rate});
  };

  if (opts.grid) {
    r.shift_surface = robustness_sweep(eval, shift_grid(*opts.grid));
    for (const auto& p : r.shift_surface) add_degradation(p);
    write_surface_png(r.shift_surface, out_dir / "shift_surface.png");
  }
  if (opts.directional) {
    std::optional<Model> bounds_model;
    if (opts.bounds_from) bounds_model = Model::load(*opts.bounds_from);
    std::optional<ShiftEvaluator> bounds_eval;
    if (bounds_model) bounds_eval.emplace(*bounds_model, scenes, settings);
    ShiftEvaluator& be = bounds_eval ? *bounds_eval : eval;
    for (int angle : {0, 45, 90, 135}) {
      const WeakBound b = weak_aligned_bound(be, angle, opts.max_px);
      r.weak_bounds.push_back(b);
      r.directional.push_back(directional_stats(eval, b));
      for (const auto& p : r.directional.back().samples) add_degradation(p);
    }
  }
  write_json_file(r.to_json(), out_dir / kReportName);
  return r;
}

std::vector<fs::path> cmd_plot(const std::vector<fs::path>& reports, const fs::path& out_dir) {
  if (reports.empty()) throw ConfigError("plot: no reports given");
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  std::vector<LabeledCurve> curves;
  json inputs = json::array();
  for (const auto& path : reports) {
    const EvalReport r = EvalReport::from_json(read_json_file(path));
    inputs.push_back(path.string());
    const std::string stem = path.parent_path().filename().string().empty() ? path.stem().string()
                                                                            : path.parent_path().filename().string();
    if (!r.shift_surface.empty()) {
      const fs::path png = out_dir / (stem + "_surface.png");
      write_surface_png(r.shift_surface, png);
      written.push_back(png);
    }
    if (!r.mr_curve.empty()) {
      const double mr = r.mr.value_or(r.mr_ref.value_or(r.mr_sensed.value_or(0.0)));
      curves.push_back({stem, r.mr_curve, mr});
    }
  }
  if (!curves.empty()) {
    const fs::path svg = out_dir / "mr_curves.svg";
    write_mr_curves_svg(curves, svg);
    written.push_back(svg);
  }
  write_resolved_config(out_dir, "plot", {{"reports", inputs}});
  return written;
}

}  // namespace wamd
