#include "wamd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

namespace wamd {

using json = nlohmann::json;

bool EvalFilter::keeps(const PairedObject& o, const Box2d& box) const {
  return box.h >= min_height && static_cast<int>(o.occlusion) <= static_cast<int>(max_occlusion);
}

std::vector<ImageGt> modality_ground_truth(const std::vector<ScenePair>& scenes, Modality m,
                                           const EvalFilter& filter) {
  std::vector<ImageGt> out(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    for (const auto& o : scenes[i].objects) {
      const auto& own = m == Modality::kRef ? o.ref_box : o.sensed_box;
      const auto& other = m == Modality::kRef ? o.sensed_box : o.ref_box;
      GtBox g;
      g.class_label = o.class_label;
      g.box3d = o.box3d;
      if (own) {
        g.box = *own;
        g.ignore = !filter.keeps(o, *own);
      } else if (other) {
        g.box = *other;
        g.ignore = true;
      } else {
        continue;
      }
      out[i].push_back(g);
    }
  }
  return out;
}

namespace {

enum Outcome { kFalsePositive = 0, kTruePositive = 1, kIgnored = -1 };

struct Scored {
  double score;
  int outcome;
};

std::vector<int> by_score(const ImageDetections& dets) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[static_cast<std::size_t>(a)].confidence > dets[static_cast<std::size_t>(b)].confidence;
  });
  return order;
}

// Greedy matching in descending confidence. Non-ignored boxes are tried
// first; a detection that only overlaps an ignore region is dropped.
template <typename Overlap, typename Usable>
void match_image(const ImageDetections& dets, const ImageGt& gt, double thr, Overlap&& overlap, Usable&& usable,
                 std::vector<Scored>& out) {
  std::vector<char> used(gt.size(), 0);
  for (int d : by_score(dets)) {
    const auto& det = dets[static_cast<std::size_t>(d)];
    if (!usable(det)) {
      out.push_back({det.confidence, kFalsePositive});
      continue;
    }
    int best = -1;
    double best_o = thr;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt[g].ignore || used[g]) continue;
      const double o = overlap(det, gt[g]);
      if (o >= best_o) {
        best_o = o;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = 1;
      out.push_back({det.confidence, kTruePositive});
      continue;
    }
    bool ignored = false;
    for (const auto& g : gt) {
      if (g.ignore && overlap(det, g) >= thr) {
        ignored = true;
        break;
      }
    }
    out.push_back({det.confidence, ignored ? kIgnored : kFalsePositive});
  }
}

double overlap2d(const DetectionResult& d, const GtBox& g) { return iou(d.box, g.box); }

void check_sizes(const std::vector<ImageDetections>& detections, const std::vector<ImageGt>& gt) {
  if (detections.size() != gt.size()) {
    throw MetricError("detections cover " + std::to_string(detections.size()) + " images but ground truth has " +
                      std::to_string(gt.size()));
  }
}

// Cumulative counts after each tie group, highest confidence first.
template <typename Emit>
void sweep_ties(std::vector<Scored> all, Emit&& emit) {
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) {
      if (all[j].outcome == kTruePositive) ++tp;
      else if (all[j].outcome == kFalsePositive) ++fp;
      ++j;
    }
    emit(tp, fp);
    i = j;
  }
}

}  // namespace

std::vector<CurvePoint> miss_rate_curve(const std::vector<ImageDetections>& detections, const std::vector<ImageGt>& gt,
                                        double iou_thr) {
  check_sizes(detections, gt);
  long npos = 0;
  std::vector<Scored> all;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (const auto& g : gt[i]) npos += g.ignore ? 0 : 1;
    match_image(detections[i], gt[i], iou_thr, overlap2d, [](const DetectionResult&) { return true; }, all);
  }
  if (npos == 0) throw MetricError("miss rate is undefined without ground-truth objects");
  const double n_img = static_cast<double>(gt.size());
  std::vector<CurvePoint> curve;
  sweep_ties(std::move(all), [&](long tp, long fp) {
    curve.push_back({static_cast<double>(fp) / n_img, 1.0 - static_cast<double>(tp) / static_cast<double>(npos)});
  });
  return curve;
}

double log_average_miss_rate(const std::vector<CurvePoint>& curve) {
  double acc = 0;
  for (int i = 0; i < 9; ++i) {
    const double ref = std::pow(10.0, -2.0 + 0.25 * i);
    double miss = 1.0;  // the (-inf, 0 recall) sentinel
    for (const auto& p : curve) {
      if (p.fppi <= ref) miss = p.miss_rate;
    }
    acc += std::log(std::max(1e-10, miss));
  }
  return std::exp(acc / 9.0);
}

double log_average_miss_rate(const std::vector<ImageDetections>& detections, const std::vector<ImageGt>& gt,
                             double iou_thr) {
  return log_average_miss_rate(miss_rate_curve(detections, gt, iou_thr));
}

double modality_mr(const std::vector<ImageDetections>& detections, const std::vector<ScenePair>& scenes, Modality m,
                   const EvalFilter& filter) {
  return log_average_miss_rate(detections, modality_ground_truth(scenes, m, filter));
}

double mean_average_precision(const std::vector<ImageDetections>& detections, const std::vector<ImageGt>& gt,
                              double iou_thr, BoxDims dims) {
  check_sizes(detections, gt);
  const bool d3 = dims == BoxDims::k3D;
  std::set<std::string> classes;
  for (const auto& img : gt) {
    for (const auto& g : img) {
      if (!g.ignore && (!d3 || g.box3d)) classes.insert(g.class_label);
    }
  }
  if (classes.empty()) throw MetricError("mean average precision is undefined without ground-truth objects");
  double sum = 0;
  for (const auto& cls : classes) {
    long npos = 0;
    std::vector<Scored> all;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      ImageGt g;
      for (auto b : gt[i]) {
        if (b.class_label != cls) continue;
        if (d3 && !b.box3d) b.ignore = true;
        npos += b.ignore ? 0 : 1;
        g.push_back(std::move(b));
      }
      ImageDetections d;
      for (const auto& det : detections[i]) {
        if (det.class_label == cls) d.push_back(det);
      }
      if (d3) {
        match_image(
            d, g, iou_thr,
            [](const DetectionResult& x, const GtBox& y) { return y.box3d ? iou3d(*x.box3d, *y.box3d) : 0.0; },
            [](const DetectionResult& x) { return x.box3d.has_value(); }, all);
      } else {
        match_image(d, g, iou_thr, overlap2d, [](const DetectionResult&) { return true; }, all);
      }
    }
    std::vector<std::pair<double, double>> pr;  // (recall, precision)
    sweep_ties(std::move(all), [&](long tp, long fp) {
      const double prec = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
      pr.emplace_back(static_cast<double>(tp) / static_cast<double>(npos), prec);
    });
    double ap = 0, prev_r = 0;
    for (std::size_t k = 0; k < pr.size(); ++k) {
      double pmax = 0;
      for (std::size_t j = k; j < pr.size(); ++j) pmax = std::max(pmax, pr[j].second);
      ap += (pr[k].first - prev_r) * pmax;
      prev_r = pr[k].first;
    }
    sum += ap;
  }
  return sum / static_cast<double>(classes.size());
}

double degradation_rate(double original, double degraded, MetricKind kind) {
  if (!std::isfinite(original) || !std::isfinite(degraded)) throw MetricError("degradation rate needs finite metrics");
  if (original == 0.0) throw MetricError("degradation rate is undefined for a zero original metric");
  return kind == MetricKind::kMR ? (degraded - original) / original : (original - degraded) / original;
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::kMr: return "mr";
    case Metric::kMrRef: return "mr-ref";
    case Metric::kMrSensed: return "mr-sensed";
    case Metric::kMap2d: return "map2d";
    case Metric::kMap3d: return "map3d";
  }
  return "mr";
}

Metric metric_from_string(const std::string& s) {
  for (Metric m : {Metric::kMr, Metric::kMrRef, Metric::kMrSensed, Metric::kMap2d, Metric::kMap3d}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown metric '" + s + "' (expected mr, mr-ref, mr-sensed, map2d or map3d)");
}

MetricKind metric_kind(Metric m) {
  return (m == Metric::kMap2d || m == Metric::kMap3d) ? MetricKind::kMAP : MetricKind::kMR;
}

double score(Metric metric, const std::vector<ImageDetections>& detections, const std::vector<ScenePair>& scenes,
             const EvalFilter& filter) {
  switch (metric) {
    case Metric::kMr:
    case Metric::kMrRef: return modality_mr(detections, scenes, Modality::kRef, filter);
    case Metric::kMrSensed: return modality_mr(detections, scenes, Modality::kSensed, filter);
    case Metric::kMap2d:
      return mean_average_precision(detections, modality_ground_truth(scenes, Modality::kRef, filter), kIouThr2D,
                                    BoxDims::k2D);
    case Metric::kMap3d:
      for (const auto& s : scenes) {
        if (!s.has_depth()) throw MetricError("map3d needs depth scenes; '" + s.scene_id + "' has none");
      }
      return mean_average_precision(detections, modality_ground_truth(scenes, Modality::kRef, filter), kIouThr3D,
                                    BoxDims::k3D);
  }
  throw MetricError("unknown metric");
}

std::vector<ImageDetections> run_detector(const Model& model, const std::vector<ScenePair>& scenes, double tau,
                                          int workers) {
  std::vector<ImageDetections> out(scenes.size());
  workers = std::max(1, std::min<int>(workers, static_cast<int>(scenes.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < scenes.size(); ++i) out[i] = detect(scenes[i], model, tau);
    return out;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = static_cast<std::size_t>(w); i < scenes.size(); i += static_cast<std::size_t>(workers)) {
          out[i] = detect(scenes[i], model, tau);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

ShiftEvaluator::ShiftEvaluator(const Model& model, const std::vector<ScenePair>& scenes,
                               const EvalSettings& settings)
    : kind_(metric_kind(settings.metric)) {
  fn_ = [&model, &scenes, settings](int dx, int dy) {
    std::vector<ScenePair> moved;
    moved.reserve(scenes.size());
    for (const auto& s : scenes) moved.push_back(shift_image(s, dx, dy));
    const auto dets = run_detector(model, moved, settings.score_floor, settings.workers);
    return score(settings.metric, dets, moved, settings.filter);
  };
}

double ShiftEvaluator::operator()(int dx, int dy) {
  const auto key = std::make_pair(dx, dy);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  const double v = fn_(dx, dy);
  cache_.emplace(key, v);
  return v;
}

std::vector<std::pair<int, int>> shift_grid(int half_extent) {
  if (half_extent < 0) throw ValidationError("shift grid extent must be >= 0");
  std::vector<std::pair<int, int>> out;
  for (int dy = -half_extent; dy <= half_extent; ++dy) {
    for (int dx = -half_extent; dx <= half_extent; ++dx) out.emplace_back(dx, dy);
  }
  return out;
}

std::vector<SurfacePoint> robustness_sweep(ShiftEvaluator& eval, const std::vector<std::pair<int, int>>& shifts) {
  std::vector<SurfacePoint> out;
  out.reserve(shifts.size());
  for (const auto& [dx, dy] : shifts) out.push_back({dx, dy, eval(dx, dy)});
  return out;
}

std::pair<int, int> direction_step(int angle_deg) {
  switch (angle_deg) {
    case 0: return {1, 0};
    case 45: return {1, 1};
    case 90: return {0, 1};
    case 135: return {-1, 1};
  }
  throw ValidationError("direction angle must be 0, 45, 90 or 135, got " + std::to_string(angle_deg));
}

WeakBound weak_aligned_bound(ShiftEvaluator& eval, int angle_deg, int max_px) {
  if (max_px < 1) throw ValidationError("weak_aligned_bound: max_px must be >= 1");
  const auto [ux, uy] = direction_step(angle_deg);
  WeakBound b;
  b.angle_deg = angle_deg;
  b.max_px = max_px;
  const double origin = eval(0, 0);
  for (int sign : {1, -1}) {
    for (int k = 1; k <= max_px; ++k) {
      const double v = eval(sign * k * ux, sign * k * uy);
      if (degradation_rate(origin, v, eval.kind()) >= 0.5) {
        (sign > 0 ? b.plus : b.minus) = k;
        break;
      }
    }
  }
  return b;
}

std::vector<int> directional_schedule(int bound) {
  if (bound < 0) throw ValidationError("directional_schedule: bound must be >= 0");
  std::vector<int> out;
  for (int i = 1; i <= 5; ++i) out.push_back(static_cast<int>(std::lround(i * bound / 5.0)));
  return out;
}

DirectionalStats directional_stats(ShiftEvaluator& eval, const WeakBound& bound) {
  const auto [ux, uy] = direction_step(bound.angle_deg);
  DirectionalStats s;
  s.angle_deg = bound.angle_deg;
  s.origin = eval(0, 0);
  for (int sign : {1, -1}) {
    const int b = (sign > 0 ? bound.plus : bound.minus).value_or(bound.max_px);
    for (int k : directional_schedule(b)) {
      const int dx = sign * k * ux, dy = sign * k * uy;
      s.samples.push_back({dx, dy, eval(dx, dy)});
    }
  }
  double sum = 0;
  for (const auto& p : s.samples) sum += p.value;
  s.mean = sum / static_cast<double>(s.samples.size());
  double var = 0;
  for (const auto& p : s.samples) var += (p.value - s.mean) * (p.value - s.mean);
  s.sigma = std::sqrt(var / static_cast<double>(s.samples.size()));
  return s;
}

// ---------------------------------------------------------------------------
// Report JSON

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> get_opt(const json& j, const char* k) {
  if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
  return j.at(k).get<double>();
}

json surface_json(const std::vector<SurfacePoint>& pts) {
  json a = json::array();
  for (const auto& p : pts) a.push_back({{"dx", p.dx}, {"dy", p.dy}, {"value", p.value}});
  return a;
}

std::vector<SurfacePoint> surface_from(const json& a) {
  std::vector<SurfacePoint> out;
  for (const auto& p : a) out.push_back({p.at("dx").get<int>(), p.at("dy").get<int>(), p.at("value").get<double>()});
  return out;
}

}  // namespace

json EvalReport::to_json() const {
  json j;
  j["tool_version"] = tool_version;
  j["metric"] = metric;
  j["checkpoint"] = checkpoint;
  j["scenes"] = scenes;
  j["mr"] = opt(mr);
  j["mr_ref"] = opt(mr_ref);
  j["mr_sensed"] = opt(mr_sensed);
  j["map2d"] = opt(map2d);
  j["map3d"] = opt(map3d);
  json curve = json::array();
  for (const auto& p : mr_curve) curve.push_back({{"fppi", p.fppi}, {"miss_rate", p.miss_rate}});
  j["mr_curve"] = curve;
  j["shift_surface"] = surface_json(shift_surface);
  json dir = json::array();
  for (const auto& d : directional) {
    dir.push_back({{"angle_deg", d.angle_deg},
                   {"origin", d.origin},
                   {"mean", d.mean},
                   {"sigma", d.sigma},
                   {"samples", surface_json(d.samples)}});
  }
  j["directional"] = dir;
  json deg = json::array();
  for (const auto& d : degradation) deg.push_back({{"dx", d.dx}, {"dy", d.dy}, {"rate", d.rate}});
  j["degradation"] = deg;
  json wb = json::array();
  for (const auto& b : weak_bounds) {
    wb.push_back({{"angle_deg", b.angle_deg},
                  {"b_plus", b.plus ? json(*b.plus) : json(nullptr)},
                  {"b_minus", b.minus ? json(*b.minus) : json(nullptr)},
                  {"max_px", b.max_px}});
  }
  j["weak_bounds"] = wb;
  return j;
}

EvalReport EvalReport::from_json(const json& j) {
  try {
    EvalReport r;
    r.tool_version = j.value("tool_version", std::string{});
    r.metric = j.value("metric", std::string{});
    r.checkpoint = j.value("checkpoint", std::string{});
    r.scenes = j.value("scenes", 0);
    r.mr = get_opt(j, "mr");
    r.mr_ref = get_opt(j, "mr_ref");
    r.mr_sensed = get_opt(j, "mr_sensed");
    r.map2d = get_opt(j, "map2d");
    r.map3d = get_opt(j, "map3d");
    for (const auto& p : j.value("mr_curve", json::array())) {
      r.mr_curve.push_back({p.at("fppi").get<double>(), p.at("miss_rate").get<double>()});
    }
    r.shift_surface = surface_from(j.value("shift_surface", json::array()));
    for (const auto& d : j.value("directional", json::array())) {
      r.directional.push_back({d.at("angle_deg").get<int>(), d.at("origin").get<double>(), d.at("mean").get<double>(),
                               d.at("sigma").get<double>(), surface_from(d.at("samples"))});
    }
    for (const auto& d : j.value("degradation", json::array())) {
      r.degradation.push_back({d.at("dx").get<int>(), d.at("dy").get<int>(), d.at("rate").get<double>()});
    }
    for (const auto& b : j.value("weak_bounds", json::array())) {
      WeakBound w;
      w.angle_deg = b.at("angle_deg").get<int>();
      if (!b.at("b_plus").is_null()) w.plus = b.at("b_plus").get<int>();
      if (!b.at("b_minus").is_null()) w.minus = b.at("b_minus").get<int>();
      w.max_px = b.at("max_px").get<int>();
      r.weak_bounds.push_back(w);
    }
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed eval report: ") + e.what());
  }
}

std::vector<ImageDetections> load_detections(const std::filesystem::path& path, const std::vector<ScenePair>& scenes) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open detections file: " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError("detections file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < scenes.size(); ++i) index[scenes[i].scene_id] = i;
  std::vector<ImageDetections> out(scenes.size());
  if (!j.contains("detections") || !j.at("detections").is_array()) {
    throw ParseError("detections file '" + path.string() + "': missing 'detections' array");
  }
  std::size_t n = 0;
  for (const auto& d : j.at("detections")) {
    const std::string where = "detections file entry " + std::to_string(n++);
    try {
      const std::string id = d.at("scene_id").get<std::string>();
      const auto it = index.find(id);
      if (it == index.end()) throw ParseError(where + ": unknown scene_id '" + id + "'");
      const auto b = d.at("box").get<std::vector<double>>();
      if (b.size() != 4) throw ParseError(where + ": box must be [x0, y0, x1, y1]");
      DetectionResult r;
      r.box = Box2d::from_corners(b[0], b[1], b[2], b[3]);
      validate_box(r.box, "detection box");
      r.confidence = d.at("score").get<double>();
      r.class_label = d.value("class", std::string("person"));
      if (d.contains("box3d") && !d.at("box3d").is_null()) {
        const auto v = d.at("box3d").get<std::vector<double>>();
        if (v.size() != 7) throw ParseError(where + ": box3d must be [x, y, z, l, w, h, theta]");
        r.box3d = Box3D{v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
      }
      out[it->second].push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(where + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  return out;
}

void save_detections(const std::vector<ImageDetections>& detections, const std::vector<ScenePair>& scenes,
                     const std::filesystem::path& path) {
  if (detections.size() != scenes.size()) throw ValidationError("save_detections: one entry per scene required");
  json arr = json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    for (const auto& d : detections[i]) {
      json e{{"scene_id", scenes[i].scene_id},
             {"box", {d.box.x0(), d.box.y0(), d.box.x1(), d.box.y1()}},
             {"score", d.confidence},
             {"class", d.class_label}};
      if (d.box3d) {
        const auto& b = *d.box3d;
        e["box3d"] = {b.x, b.y, b.z, b.l, b.w, b.h, b.theta};
      }
      arr.push_back(std::move(e));
    }
  }
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write detections file: " + path.string());
  os << json{{"detections", arr}}.dump(1) << '\n';
}

}  // namespace wamd
