#include "wamd/paired_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wamd/image_io.hpp"

namespace wamd {

using nlohmann::json;

std::string to_string(Occlusion o) {
  switch (o) {
    case Occlusion::kNone: return "none";
    case Occlusion::kPartial: return "partial";
    case Occlusion::kHeavy: return "heavy";
  }
  return "none";
}

Occlusion occlusion_from_string(const std::string& s) {
  if (s == "none") return Occlusion::kNone;
  if (s == "partial") return Occlusion::kPartial;
  if (s == "heavy") return Occlusion::kHeavy;
  throw ValidationError("unknown occlusion level '" + s + "'");
}

void PairedObject::validate() const {
  if (!ref_box && !sensed_box) throw ValidationError("object has neither a reference nor a sensed box");
  const bool one_side = ref_box.has_value() != sensed_box.has_value();
  if (unpaired != one_side) {
    throw ValidationError(unpaired ? "unpaired object must have exactly one box"
                                   : "paired object must have both boxes");
  }
  if (ref_box) validate_box(*ref_box, "ref box");
  if (sensed_box) validate_box(*sensed_box, "sensed box");
}

Eigen::Vector2d ShiftField::at(double x, double y) const {
  const double r = std::hypot(x - center_x, y - center_y);
  const double u = std::min(1.0, r / smoothness_scale);
  const double gain = 1.0 + (edge_gain - 1.0) * u * u;
  return {base_dx * gain, base_dy * gain};
}

void ShiftFieldConfig::validate() const {
  if (!(smoothness_scale > 0)) throw ValidationError("smoothness_scale must be positive");
  if (!(unpaired_rate >= 0 && unpaired_rate <= 1)) throw ValidationError("unpaired_rate must lie in [0, 1]");
  if (!(noise_sigma >= 0)) throw ValidationError("noise_sigma must be non-negative");
  if (!(base_shift >= 0)) throw ValidationError("base_shift must be non-negative");
  if (!(edge_gain >= 0)) throw ValidationError("edge_gain must be non-negative");
}

void SceneGenConfig::validate() const {
  shift.validate();
  if (!(min_width > 0 && max_width >= min_width)) throw ValidationError("invalid object width range");
  if (!(min_aspect > 0 && max_aspect >= min_aspect)) throw ValidationError("invalid object aspect range");
  if (n_distractors < 0) throw ValidationError("n_distractors must be non-negative");
  if (!(pixel_noise >= 0) || !(ref_noise_scale >= 0)) throw ValidationError("noise levels must be non-negative");
  if (depth && !(depth_scale > 0)) throw ValidationError("depth_scale must be positive");
  if (depth && class_dims.find("object") == class_dims.end()) {
    throw ValidationError("depth scenes need average dimensions for class 'object'");
  }
}

std::uint64_t scene_seed(std::uint64_t master_seed, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::uint64_t out[1];
  std::uint32_t parts[2];
  seq.generate(parts, parts + 2);
  out[0] = (std::uint64_t(parts[0]) << 32) | parts[1];
  return out[0];
}

namespace {

constexpr double kGrid = 256.0;     // boxes live on a 1/256 px grid
constexpr double kLevels = 65535.0;  // 16-bit intensities

double snap(double v) { return std::round(v * kGrid) / kGrid; }
Box2d snap(const Box2d& b) { return {snap(b.x), snap(b.y), snap(b.w), snap(b.h)}; }

// Blends `value` into the pixels covered by [xa, xb) x [ya, yb) with exact
// area coverage so sub-pixel placement is visible in the image.
void fill_rect(Image& img, double xa, double ya, double xb, double yb, double value) {
  const int c0 = std::max(0, static_cast<int>(std::floor(xa)));
  const int c1 = std::min(static_cast<int>(img.cols()) - 1, static_cast<int>(std::ceil(xb)) - 1);
  const int r0 = std::max(0, static_cast<int>(std::floor(ya)));
  const int r1 = std::min(static_cast<int>(img.rows()) - 1, static_cast<int>(std::ceil(yb)) - 1);
  for (int r = r0; r <= r1; ++r) {
    const double cy = std::min(yb, r + 1.0) - std::max(ya, double(r));
    if (cy <= 0) continue;
    for (int c = c0; c <= c1; ++c) {
      const double cx = std::min(xb, c + 1.0) - std::max(xa, double(c));
      if (cx <= 0) continue;
      const double cov = cx * cy;
      img(r, c) = img(r, c) * (1.0 - cov) + value * cov;
    }
  }
}

void fill_box(Image& img, const Box2d& b, double value) { fill_rect(img, b.x0(), b.y0(), b.x1(), b.y1(), value); }

void ring_box(Image& img, const Box2d& b, double value, double background, double thickness) {
  fill_box(img, b, value);
  if (b.w > 2 * thickness && b.h > 2 * thickness) {
    fill_rect(img, b.x0() + thickness, b.y0() + thickness, b.x1() - thickness, b.y1() - thickness, background);
  }
}

void quantize(Image& img) {
  img = (img.array().max(0.0).min(1.0) * kLevels).round() / kLevels;
}

bool inside(const Box2d& b, const Extent& e) {
  return b.x0() >= 0 && b.y0() >= 0 && b.x1() <= e.width && b.y1() <= e.height;
}

struct Glyph {
  Box2d ref;
  Box2d sensed;
  bool real{true};
  bool ref_visible{true};
  bool sensed_visible{true};
  double ref_value{0.8};
  double sensed_value{0.8};
  std::optional<Box3D> box3d;
};

Occlusion occlusion_level(double covered) {
  if (covered < 0.1) return Occlusion::kNone;
  if (covered < 0.5) return Occlusion::kPartial;
  return Occlusion::kHeavy;
}

}  // namespace

ScenePair generate_scene(const SceneGenConfig& config, const Extent& canvas, int n_objects,
                         std::uint64_t seed) {
  config.validate();
  if (n_objects < 0) throw ValidationError("n_objects must be non-negative");
  if (canvas.width <= 0 || canvas.height <= 0) throw ValidationError("canvas must be positive");
  const double tallest = config.max_width * config.max_aspect;
  if (config.max_width + 2 > canvas.width || tallest + 2 > canvas.height) {
    throw GenerationError("canvas " + std::to_string(canvas.width) + "x" + std::to_string(canvas.height) +
                          " cannot hold objects of the configured size");
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };

  ScenePair scene;
  scene.scene_id = "scene";
  const auto& sc = config.shift;
  const double phi = sc.direction_deg ? *sc.direction_deg * std::numbers::pi / 180.0
                                      : uniform(0.0, 2.0 * std::numbers::pi);
  ShiftField field;
  field.base_dx = sc.base_shift * std::cos(phi);
  field.base_dy = sc.base_shift * std::sin(phi);
  field.edge_gain = sc.edge_gain;
  field.smoothness_scale = sc.smoothness_scale;
  field.center_x = canvas.width / 2.0;
  field.center_y = canvas.height / 2.0;
  scene.shift_field = field;

  // Placement: reference boxes inside the canvas with limited overlap.
  std::vector<Glyph> glyphs;
  const int total = n_objects + config.n_distractors;
  for (int g = 0; g < total; ++g) {
    bool placed = false;
    for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
      const double w = uniform(config.min_width, config.max_width);
      const double h = w * uniform(config.min_aspect, config.max_aspect);
      const double x = uniform(w / 2 + 1, canvas.width - w / 2 - 1);
      const double y = uniform(h / 2 + 1, canvas.height - h / 2 - 1);
      const Box2d ref = snap(Box2d{x, y, w, h});
      bool ok = true;
      for (const auto& o : glyphs) {
        if (iou(o.ref, ref) > 0.1) { ok = false; break; }
      }
      if (!ok) continue;
      Glyph gl;
      gl.ref = ref;
      gl.real = g < n_objects;
      const Eigen::Vector2d d = field.at(ref.x, ref.y);
      const double nx = sc.noise_sigma * gauss(rng), ny = sc.noise_sigma * gauss(rng);
      gl.sensed = snap(ref.translated(d.x() + nx, d.y() + ny));
      // Distractors run cooler in the reference modality.
      gl.ref_value = gl.real ? uniform(0.6, 0.9) : uniform(0.2, 0.45);
      gl.sensed_value = uniform(0.7, 0.95);
      glyphs.push_back(gl);
      placed = true;
    }
    if (!placed) {
      throw GenerationError("canvas " + std::to_string(canvas.width) + "x" + std::to_string(canvas.height) +
                            " too small to place " + std::to_string(total) + " glyphs");
    }
  }

  for (auto& gl : glyphs) {
    if (gl.real && unit(rng) < sc.unpaired_rate) {
      if (unit(rng) < 0.5) gl.sensed_visible = false;
      else gl.ref_visible = false;
    }
  }

  const std::string label = config.depth ? "object" : config.class_label;
  if (config.depth) {
    const Dims3 avg = config.class_dims.at("object");
    const auto& k = config.intrinsics;
    for (auto& gl : glyphs) {
      if (!gl.real) continue;
      Box3D b;
      b.l = avg.l * uniform(0.85, 1.15);
      b.w = avg.w * uniform(0.85, 1.15);
      b.theta = uniform(-std::numbers::pi / 4, std::numbers::pi / 4);
      const double span = b.l * std::abs(std::cos(b.theta)) + b.w * std::abs(std::sin(b.theta));
      b.z = k.f * span / gl.ref.w;
      b.h = gl.ref.h * b.z / k.f;
      b.x = b.z * (gl.ref.x - k.ox) / k.f;
      b.y = b.z * (gl.ref.y - k.oy) / k.f;
      gl.box3d = b;
    }
    scene.intrinsics = config.intrinsics;
    scene.depth_scale = config.depth_scale;
  }

  // Rendering.
  const int H = canvas.height, W = canvas.width;
  scene.ref_image = Image::Constant(H, W, 0.1);
  const double sensed_bg = config.depth ? 0.9 : 0.2;
  scene.sensed_image = Image::Constant(H, W, sensed_bg);
  if (config.depth) {
    for (int r = 0; r < H; ++r) scene.sensed_image.row(r).array() -= 0.05 * r / H;  // gentle floor slope
  }
  for (const auto& gl : glyphs) {
    if (gl.ref_visible) fill_box(scene.ref_image, gl.ref, gl.ref_value);
    if (!gl.sensed_visible) continue;
    if (config.depth) {
      // Real objects stand out in depth; distractors are flat prints on the wall.
      if (gl.real) fill_box(scene.sensed_image, gl.sensed, gl.box3d->z / config.depth_scale);
    } else if (gl.real) {
      ring_box(scene.sensed_image, gl.sensed, gl.sensed_value, sensed_bg, 2.0);
    } else {
      fill_box(scene.sensed_image, gl.sensed, gl.sensed_value);
    }
  }
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      scene.ref_image(r, c) += config.ref_noise_scale * config.pixel_noise * gauss(rng);
      scene.sensed_image(r, c) += (config.depth ? 0.002 : config.pixel_noise) * gauss(rng);
    }
  }
  quantize(scene.ref_image);
  quantize(scene.sensed_image);

  // Annotations for the real objects.
  int pair_id = 0;
  for (std::size_t i = 0; i < glyphs.size(); ++i) {
    const auto& gl = glyphs[i];
    if (!gl.real) continue;
    PairedObject obj;
    obj.pair_id = pair_id++;
    obj.class_label = label;
    if (gl.ref_visible) obj.ref_box = gl.ref;
    if (gl.sensed_visible) obj.sensed_box = gl.sensed;
    obj.unpaired = !(gl.ref_visible && gl.sensed_visible);
    const Box2d& own = gl.ref_visible ? gl.ref : gl.sensed;
    double covered = 0;
    for (std::size_t j = i + 1; j < glyphs.size(); ++j) {
      const Box2d& other = gl.ref_visible ? glyphs[j].ref : glyphs[j].sensed;
      covered += intersection_area(own, other);
    }
    obj.occlusion = occlusion_level(covered / own.area());
    obj.truncated = gl.sensed_visible && !inside(gl.sensed, canvas);
    obj.box3d = gl.box3d;
    scene.objects.push_back(std::move(obj));
  }
  return scene;
}

ScenePair shift_image(const ScenePair& scene, int dx, int dy) {
  ScenePair out = scene;
  out.applied_dx += dx;
  out.applied_dy += dy;
  if (dx == 0 && dy == 0) return out;
  const Image& src = scene.sensed_image;
  const auto H = src.rows(), W = src.cols();
  out.sensed_image = Image::Zero(H, W);
  for (Eigen::Index r = 0; r < H; ++r) {
    const Eigen::Index sr = r - dy;
    if (sr < 0 || sr >= H) continue;
    for (Eigen::Index c = 0; c < W; ++c) {
      const Eigen::Index scol = c - dx;
      if (scol < 0 || scol >= W) continue;
      out.sensed_image(r, c) = src(sr, scol);
    }
  }
  const Extent e = scene.extent();
  for (auto& obj : out.objects) {
    if (!obj.sensed_box) continue;
    obj.sensed_box = obj.sensed_box->translated(dx, dy);
    obj.truncated = !inside(*obj.sensed_box, e);
  }
  return out;
}

int ShiftStatistics::mode_bin() const {
  if (magnitude_hist.empty()) return -1;
  return static_cast<int>(std::max_element(magnitude_hist.begin(), magnitude_hist.end()) - magnitude_hist.begin());
}

ShiftStatistics shift_statistics(const std::vector<ScenePair>& dataset) {
  ShiftStatistics s;
  s.direction_hist.assign(8, 0);
  for (const auto& scene : dataset) {
    for (const auto& obj : scene.objects) {
      if (!obj.ref_box || !obj.sensed_box) {
        ++s.unpaired;
        continue;
      }
      ++s.paired;
      const double dx = obj.sensed_box->x - obj.ref_box->x;
      const double dy = obj.sensed_box->y - obj.ref_box->y;
      const double mag = std::hypot(dx, dy);
      const auto bin = static_cast<std::size_t>(std::lround(mag));
      if (s.magnitude_hist.size() <= bin) s.magnitude_hist.resize(bin + 1, 0);
      ++s.magnitude_hist[bin];
      if (mag >= 0.5) {
        ++s.shifted;
        double ang = std::atan2(dy, dx) * 180.0 / std::numbers::pi;
        if (ang < 0) ang += 360.0;
        const int dbin = static_cast<int>(std::floor((ang + 22.5) / 45.0)) % 8;
        ++s.direction_hist[static_cast<std::size_t>(dbin)];
      }
    }
  }
  return s;
}

std::vector<double> depth_patch(const ScenePair& scene, const Box2d& box) {
  std::vector<double> out;
  if (!scene.has_depth()) return out;
  const Image& d = scene.sensed_image;
  const int c0 = std::max(0, static_cast<int>(std::floor(box.x0())));
  const int c1 = std::min(static_cast<int>(d.cols()) - 1, static_cast<int>(std::ceil(box.x1())) - 1);
  const int r0 = std::max(0, static_cast<int>(std::floor(box.y0())));
  const int r1 = std::min(static_cast<int>(d.rows()) - 1, static_cast<int>(std::ceil(box.y1())) - 1);
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) out.push_back(d(r, c) * scene.depth_scale);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotation JSON

namespace {

json box_to_json(const std::optional<Box2d>& b) {
  if (!b) return nullptr;
  return json::array({b->x0(), b->y0(), b->x1(), b->y1()});
}

[[noreturn]] void schema_error(const std::string& scene_id, const std::string& field, const std::string& why) {
  throw ParseError("annotation schema violation in scene '" + scene_id + "', field '" + field + "': " + why);
}

const json& require(const json& obj, const char* field, const std::string& scene_id) {
  if (!obj.is_object() || !obj.contains(field)) schema_error(scene_id, field, "missing");
  return obj.at(field);
}

double number(const json& v, const std::string& scene_id, const std::string& field) {
  if (!v.is_number()) schema_error(scene_id, field, "expected a number");
  return v.get<double>();
}

std::optional<Box2d> box_from_json(const json& v, const std::string& scene_id, const std::string& field) {
  if (v.is_null()) return std::nullopt;
  if (!v.is_array() || v.size() != 4) schema_error(scene_id, field, "expected [x0, y0, x1, y1] or null");
  const double x0 = number(v[0], scene_id, field), y0 = number(v[1], scene_id, field);
  const double x1 = number(v[2], scene_id, field), y1 = number(v[3], scene_id, field);
  const Box2d b = Box2d::from_corners(x0, y0, x1, y1);
  if (!b.valid()) schema_error(scene_id, field, "box must have positive width and height");
  return b;
}

json scene_to_json(const ScenePair& s) {
  json j;
  j["scene_id"] = s.scene_id;
  j["split"] = s.split;
  j["image_file"] = scene_image_name(s);
  j["width"] = s.extent().width;
  j["height"] = s.extent().height;
  j["applied_shift"] = json::array({s.applied_dx, s.applied_dy});
  if (s.shift_field) {
    const auto& f = *s.shift_field;
    j["shift_field"] = {{"base_dx", f.base_dx}, {"base_dy", f.base_dy}, {"edge_gain", f.edge_gain},
                        {"smoothness_scale", f.smoothness_scale}, {"center", {f.center_x, f.center_y}}};
  }
  if (s.intrinsics) {
    j["intrinsics"] = {{"f", s.intrinsics->f}, {"ox", s.intrinsics->ox}, {"oy", s.intrinsics->oy}};
  }
  if (s.has_depth()) j["depth_scale"] = s.depth_scale;
  json objs = json::array();
  for (const auto& o : s.objects) {
    json jo;
    jo["pair_id"] = o.pair_id;
    jo["class"] = o.class_label;
    jo["ref"] = box_to_json(o.ref_box);
    jo["sensed"] = box_to_json(o.sensed_box);
    jo["unpaired"] = o.unpaired;
    jo["occlusion"] = to_string(o.occlusion);
    jo["truncated"] = o.truncated;
    if (o.box3d) {
      const auto& b = *o.box3d;
      jo["box3d"] = {b.x, b.y, b.z, b.l, b.w, b.h, b.theta};
    }
    if (!o.depth_patch.empty()) jo["depth_patch"] = o.depth_patch;
    objs.push_back(std::move(jo));
  }
  j["objects"] = std::move(objs);
  return j;
}

ScenePair scene_from_json(const json& j, std::size_t index) {
  ScenePair s;
  std::string id = "#" + std::to_string(index);
  if (!j.is_object()) schema_error(id, "scene", "expected an object");
  const json& jid = require(j, "scene_id", id);
  if (!jid.is_string()) schema_error(id, "scene_id", "expected a string");
  id = s.scene_id = jid.get<std::string>();
  if (j.contains("split")) {
    if (!j["split"].is_string()) schema_error(id, "split", "expected a string");
    s.split = j["split"].get<std::string>();
  }
  const int width = static_cast<int>(number(require(j, "width", id), id, "width"));
  const int height = static_cast<int>(number(require(j, "height", id), id, "height"));
  if (width <= 0 || height <= 0) schema_error(id, "width/height", "must be positive");
  s.ref_image = Image::Zero(height, width);
  s.sensed_image = Image::Zero(height, width);
  if (j.contains("applied_shift")) {
    const auto& a = j["applied_shift"];
    if (!a.is_array() || a.size() != 2) schema_error(id, "applied_shift", "expected [dx, dy]");
    s.applied_dx = static_cast<int>(number(a[0], id, "applied_shift"));
    s.applied_dy = static_cast<int>(number(a[1], id, "applied_shift"));
  }
  if (j.contains("shift_field")) {
    const auto& f = j["shift_field"];
    ShiftField sf;
    sf.base_dx = number(require(f, "base_dx", id), id, "shift_field.base_dx");
    sf.base_dy = number(require(f, "base_dy", id), id, "shift_field.base_dy");
    sf.edge_gain = number(require(f, "edge_gain", id), id, "shift_field.edge_gain");
    sf.smoothness_scale = number(require(f, "smoothness_scale", id), id, "shift_field.smoothness_scale");
    const auto& c = require(f, "center", id);
    if (!c.is_array() || c.size() != 2) schema_error(id, "shift_field.center", "expected [x, y]");
    sf.center_x = number(c[0], id, "shift_field.center");
    sf.center_y = number(c[1], id, "shift_field.center");
    s.shift_field = sf;
  }
  if (j.contains("intrinsics")) {
    const auto& k = j["intrinsics"];
    CameraIntrinsics ci;
    ci.f = number(require(k, "f", id), id, "intrinsics.f");
    ci.ox = number(require(k, "ox", id), id, "intrinsics.ox");
    ci.oy = number(require(k, "oy", id), id, "intrinsics.oy");
    if (!(ci.f > 0)) schema_error(id, "intrinsics.f", "must be positive");
    s.intrinsics = ci;
  }
  if (j.contains("depth_scale")) s.depth_scale = number(j["depth_scale"], id, "depth_scale");

  const json& objs = require(j, "objects", id);
  if (!objs.is_array()) schema_error(id, "objects", "expected an array");
  std::vector<int> seen;
  for (std::size_t k = 0; k < objs.size(); ++k) {
    const json& jo = objs[k];
    const std::string prefix = "objects[" + std::to_string(k) + "].";
    if (!jo.is_object()) schema_error(id, prefix.substr(0, prefix.size() - 1), "expected an object");
    PairedObject o;
    if (!jo.contains("pair_id")) schema_error(id, prefix + "pair_id", "missing");
    if (!jo["pair_id"].is_number_integer()) schema_error(id, prefix + "pair_id", "expected an integer");
    o.pair_id = jo["pair_id"].get<int>();
    if (std::find(seen.begin(), seen.end(), o.pair_id) != seen.end()) {
      schema_error(id, prefix + "pair_id", "duplicate pair_id " + std::to_string(o.pair_id));
    }
    seen.push_back(o.pair_id);
    const json& cls = require(jo, "class", id);
    if (!cls.is_string()) schema_error(id, prefix + "class", "expected a string");
    o.class_label = cls.get<std::string>();
    o.ref_box = box_from_json(require(jo, "ref", id), id, prefix + "ref");
    o.sensed_box = box_from_json(require(jo, "sensed", id), id, prefix + "sensed");
    const json& up = require(jo, "unpaired", id);
    if (!up.is_boolean()) schema_error(id, prefix + "unpaired", "expected a boolean");
    o.unpaired = up.get<bool>();
    if (jo.contains("occlusion")) {
      if (!jo["occlusion"].is_string()) schema_error(id, prefix + "occlusion", "expected a string");
      try {
        o.occlusion = occlusion_from_string(jo["occlusion"].get<std::string>());
      } catch (const ValidationError& e) {
        schema_error(id, prefix + "occlusion", e.what());
      }
    }
    if (jo.contains("truncated")) {
      if (!jo["truncated"].is_boolean()) schema_error(id, prefix + "truncated", "expected a boolean");
      o.truncated = jo["truncated"].get<bool>();
    }
    if (jo.contains("box3d")) {
      const auto& b = jo["box3d"];
      if (!b.is_array() || b.size() != 7) schema_error(id, prefix + "box3d", "expected 7 numbers");
      Box3D bx;
      bx.x = number(b[0], id, prefix + "box3d");
      bx.y = number(b[1], id, prefix + "box3d");
      bx.z = number(b[2], id, prefix + "box3d");
      bx.l = number(b[3], id, prefix + "box3d");
      bx.w = number(b[4], id, prefix + "box3d");
      bx.h = number(b[5], id, prefix + "box3d");
      bx.theta = number(b[6], id, prefix + "box3d");
      if (!bx.valid()) schema_error(id, prefix + "box3d", "dimensions must be positive");
      o.box3d = bx;
    }
    if (jo.contains("depth_patch")) {
      const auto& d = jo["depth_patch"];
      if (!d.is_array()) schema_error(id, prefix + "depth_patch", "expected an array");
      for (const auto& v : d) o.depth_patch.push_back(number(v, id, prefix + "depth_patch"));
    }
    try {
      o.validate();
    } catch (const ValidationError& e) {
      schema_error(id, prefix + "unpaired", e.what());
    }
    s.objects.push_back(std::move(o));
  }
  return s;
}

}  // namespace

std::string scene_image_name(const ScenePair& scene) { return "scenes/" + scene.scene_id + ".png"; }

void save_annotations(const std::vector<ScenePair>& scenes, const std::filesystem::path& path,
                      const DatasetMeta& meta) {
  json doc;
  doc["schema_version"] = meta.schema_version;
  doc["ref_modality"] = meta.ref_modality;
  doc["sensed_modality"] = meta.sensed_modality;
  if (!meta.extra.empty()) doc["extra"] = meta.extra;
  json arr = json::array();
  for (const auto& s : scenes) arr.push_back(scene_to_json(s));
  doc["scenes"] = std::move(arr);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << doc.dump(1) << '\n';
}

std::vector<ScenePair> load_annotations(const std::filesystem::path& path, DatasetMeta* meta) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open annotation file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("schema_version") || !doc["schema_version"].is_number_integer()) {
    throw ParseError(path.string() + ": missing integer field 'schema_version'");
  }
  const int version = doc["schema_version"].get<int>();
  if (version != kAnnotationSchemaVersion) {
    throw ParseError(path.string() + ": unsupported schema_version " + std::to_string(version));
  }
  if (meta) {
    meta->schema_version = version;
    meta->ref_modality = doc.value("ref_modality", meta->ref_modality);
    meta->sensed_modality = doc.value("sensed_modality", meta->sensed_modality);
    if (doc.contains("extra") && doc["extra"].is_object()) {
      for (const auto& [k, v] : doc["extra"].items()) {
        if (v.is_string()) meta->extra[k] = v.get<std::string>();
      }
    }
  }
  if (!doc.contains("scenes") || !doc["scenes"].is_array()) {
    throw ParseError(path.string() + ": missing array field 'scenes'");
  }
  std::vector<ScenePair> scenes;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < doc["scenes"].size(); ++i) {
    scenes.push_back(scene_from_json(doc["scenes"][i], i));
    if (std::find(ids.begin(), ids.end(), scenes.back().scene_id) != ids.end()) {
      schema_error(scenes.back().scene_id, "scene_id", "duplicate scene id");
    }
    ids.push_back(scenes.back().scene_id);
  }
  return scenes;
}

void save_dataset(const std::vector<ScenePair>& scenes, const std::filesystem::path& dir,
                  const DatasetMeta& meta) {
  std::filesystem::create_directories(dir / "scenes");
  for (const auto& s : scenes) {
    const auto H = s.ref_image.rows(), W = s.ref_image.cols();
    Gray16 px(H, 2 * W);
    px.leftCols(W) = (s.ref_image.array() * kLevels).round().cast<std::uint16_t>();
    px.rightCols(W) = (s.sensed_image.array().max(0.0).min(1.0) * kLevels).round().cast<std::uint16_t>();
    write_png16(dir / scene_image_name(s), px);
  }
  save_annotations(scenes, dir / "annotations.json", meta);
}

std::vector<ScenePair> load_dataset(const std::filesystem::path& dir, DatasetMeta* meta) {
  auto scenes = load_annotations(dir / "annotations.json", meta);
  for (auto& s : scenes) {
    const Gray16 px = read_png16(dir / scene_image_name(s));
    const auto H = s.ref_image.rows(), W = s.ref_image.cols();
    if (px.rows() != H || px.cols() != 2 * W) {
      throw ParseError("scene '" + s.scene_id + "': image size does not match width/height");
    }
    s.ref_image = px.leftCols(W).cast<double>() / kLevels;
    s.sensed_image = px.rightCols(W).cast<double>() / kLevels;
  }
  return scenes;
}

}  // namespace wamd
