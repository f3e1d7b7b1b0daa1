#include "wamd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json_util.hpp"

namespace wamd {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

int ModelConfig::feature_stride() const {
  int s = 1;
  for (int v : strides) s *= v;
  return s;
}

void ModelConfig::validate() const {
  if (channels.empty() || channels.size() != strides.size()) {
    throw ConfigError("model: channels and strides must be non-empty and of equal length");
  }
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] < 1 || strides[i] < 1) throw ConfigError("model: channels and strides must be positive");
  }
  if (input_width < 8 || input_height < 8) throw ConfigError("model: input must be at least 8x8");
  const int s = feature_stride();
  if (input_width % s != 0 || input_height % s != 0) {
    throw ConfigError("model: input size must be divisible by the feature stride " + std::to_string(s));
  }
  if (rpn_channels < 1 || head_hidden < 1 || shift_hidden < 1) throw ConfigError("model: layer widths must be positive");
  if (anchor_sizes.empty() || anchor_aspects.empty()) throw ConfigError("model: anchors need sizes and aspects");
  for (double v : anchor_sizes) {
    if (!(v > 0)) throw ConfigError("model: anchor sizes must be positive");
  }
  for (double v : anchor_aspects) {
    if (!(v > 0)) throw ConfigError("model: anchor aspects must be positive");
  }
  if (pool.height < 1 || pool.width < 1 || pool.sampling < 1) throw ConfigError("model: pool size must be positive");
  if (!(context_factor >= 1.0)) throw ConfigError("model: context_factor must be >= 1");
  if (box3d && class_dims.find(class_label) == class_dims.end()) {
    throw ConfigError("model: no average dimensions for class '" + class_label + "'");
  }
  if (proposals_test < 0 || rpn_pre_nms < 1) throw ConfigError("model: proposal counts must be positive");
  if (!(nms_iou > 0 && nms_iou <= 1) || !(rpn_nms > 0 && rpn_nms <= 1)) {
    throw ConfigError("model: NMS thresholds must lie in (0, 1]");
  }
}

json ModelConfig::to_json() const {
  json dims = json::object();
  for (const auto& [k, d] : class_dims) dims[k] = {d.l, d.w, d.h};
  return {{"input_width", input_width},
          {"input_height", input_height},
          {"channels", channels},
          {"strides", strides},
          {"rpn_channels", rpn_channels},
          {"anchor_sizes", anchor_sizes},
          {"anchor_aspects", anchor_aspects},
          {"pool", {{"height", pool.height}, {"width", pool.width}, {"sampling", pool.sampling}}},
          {"head_hidden", head_hidden},
          {"shift_hidden", shift_hidden},
          {"context_factor", context_factor},
          {"combiner", combiner == Combiner::kSum ? "sum" : "concat"},
          {"rfa", rfa},
          {"jitter", jitter},
          {"caf", caf},
          {"asc", asc},
          {"box3d", box3d},
          {"class_label", class_label},
          {"class_dims", dims},
          {"rpn_pre_nms", rpn_pre_nms},
          {"rpn_nms", rpn_nms},
          {"proposals_test", proposals_test},
          {"nms_iou", nms_iou}};
}

using detail::check_keys;
using detail::read_opt;

ModelConfig ModelConfig::from_json(const json& j) {
  check_keys(j,
             {"input_width", "input_height", "channels", "strides", "rpn_channels", "anchor_sizes", "anchor_aspects",
              "pool", "head_hidden", "shift_hidden", "context_factor", "combiner", "rfa", "jitter", "caf", "asc",
              "box3d", "class_label", "class_dims", "rpn_pre_nms", "rpn_nms", "proposals_test", "nms_iou"},
             "model config");
  ModelConfig c;
  read_opt(j, "input_width", c.input_width);
  read_opt(j, "input_height", c.input_height);
  read_opt(j, "channels", c.channels);
  read_opt(j, "strides", c.strides);
  read_opt(j, "rpn_channels", c.rpn_channels);
  read_opt(j, "anchor_sizes", c.anchor_sizes);
  read_opt(j, "anchor_aspects", c.anchor_aspects);
  if (j.contains("pool")) {
    const json& p = j.at("pool");
    check_keys(p, {"height", "width", "sampling"}, "model config pool");
    read_opt(p, "height", c.pool.height);
    read_opt(p, "width", c.pool.width);
    read_opt(p, "sampling", c.pool.sampling);
  }
  read_opt(j, "head_hidden", c.head_hidden);
  read_opt(j, "shift_hidden", c.shift_hidden);
  read_opt(j, "context_factor", c.context_factor);
  if (j.contains("combiner")) {
    std::string s;
    read_opt(j, "combiner", s);
    if (s == "sum") c.combiner = Combiner::kSum;
    else if (s == "concat") c.combiner = Combiner::kConcat;
    else throw ConfigError("config field 'combiner': expected \"sum\" or \"concat\", got \"" + s + "\"");
  }
  read_opt(j, "rfa", c.rfa);
  read_opt(j, "jitter", c.jitter);
  read_opt(j, "caf", c.caf);
  read_opt(j, "asc", c.asc);
  read_opt(j, "box3d", c.box3d);
  read_opt(j, "class_label", c.class_label);
  if (j.contains("class_dims")) {
    c.class_dims.clear();
    for (const auto& [k, v] : j.at("class_dims").items()) {
      if (!v.is_array() || v.size() != 3) throw ConfigError("config field 'class_dims." + k + "': expected [l, w, h]");
      c.class_dims[k] = {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
    }
  }
  read_opt(j, "rpn_pre_nms", c.rpn_pre_nms);
  read_opt(j, "rpn_nms", c.rpn_nms);
  read_opt(j, "proposals_test", c.proposals_test);
  read_opt(j, "nms_iou", c.nms_iou);
  c.validate();
  return c;
}

namespace {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::uint64_t ModelConfig::hash() const {
  const std::string s = to_json().dump();
  return fnv1a(s.data(), s.size());
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"learning_rate", learning_rate},
          {"lr_drop_at", lr_drop_at},
          {"warmup_iters", warmup_iters},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip},
          {"rois_per_image", rois_per_image},
          {"fg_fraction", fg_fraction},
          {"rpn_batch", rpn_batch},
          {"rpn_post_nms_train", rpn_post_nms_train},
          {"gt_jitter_copies", gt_jitter_copies},
          {"caf_weight_grad", caf_weight_grad},
          {"fg_thr", fg_thr},
          {"bg_thr", bg_thr},
          {"lambda1", loss.lambda1},
          {"lambda2", loss.lambda2},
          {"smooth_l1_beta", loss.smooth_l1_beta},
          {"sigma0", jitter.sigma0},
          {"sigma1", jitter.sigma1},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  check_keys(j,
             {"epochs", "learning_rate", "lr_drop_at", "warmup_iters", "momentum", "weight_decay", "grad_clip",
              "rois_per_image", "fg_fraction", "rpn_batch", "rpn_post_nms_train", "gt_jitter_copies", "caf_weight_grad",
              "fg_thr", "bg_thr", "lambda1", "lambda2", "smooth_l1_beta", "sigma0", "sigma1", "seed"},
             "train config");
  TrainConfig c;
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "lr_drop_at", c.lr_drop_at);
  read_opt(j, "warmup_iters", c.warmup_iters);
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "grad_clip", c.grad_clip);
  read_opt(j, "rois_per_image", c.rois_per_image);
  read_opt(j, "fg_fraction", c.fg_fraction);
  read_opt(j, "rpn_batch", c.rpn_batch);
  read_opt(j, "rpn_post_nms_train", c.rpn_post_nms_train);
  read_opt(j, "gt_jitter_copies", c.gt_jitter_copies);
  read_opt(j, "caf_weight_grad", c.caf_weight_grad);
  read_opt(j, "fg_thr", c.fg_thr);
  read_opt(j, "bg_thr", c.bg_thr);
  read_opt(j, "lambda1", c.loss.lambda1);
  read_opt(j, "lambda2", c.loss.lambda2);
  read_opt(j, "smooth_l1_beta", c.loss.smooth_l1_beta);
  read_opt(j, "sigma0", c.jitter.sigma0);
  read_opt(j, "sigma1", c.jitter.sigma1);
  read_opt(j, "seed", c.seed);
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (rois_per_image < 1 || rpn_batch < 1) throw ConfigError("train: batch sizes must be positive");
  if (!(fg_fraction > 0 && fg_fraction <= 1)) throw ConfigError("train: fg_fraction must lie in (0, 1]");
  if (loss.lambda1 < 0 || loss.lambda2 < 0) throw ConfigError("train: lambda1 and lambda2 must be >= 0");
  if (jitter.sigma0 < 0 || jitter.sigma1 < 0) throw ConfigError("train: jitter sigmas must be >= 0");
  if (!(bg_thr >= 0 && bg_thr <= fg_thr && fg_thr <= 1)) throw ConfigError("train: need 0 <= bg_thr <= fg_thr <= 1");
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

ConvLayer make_conv(int in, int out, int k, int stride) {
  ConvLayer c;
  c.shape = {in, out, k, stride, k / 2};
  c.w = Eigen::MatrixXd::Zero(out, c.shape.patch());
  c.b = Eigen::MatrixXd::Zero(out, 1);
  return c;
}

DenseLayer make_dense(int in, int out) {
  return {Eigen::MatrixXd::Zero(out, in), Eigen::MatrixXd::Zero(out, 1)};
}

template <typename P, typename Fn>
void visit(P& p, Fn&& fn) {
  auto conv = [&](const std::string& name, auto& c) {
    fn(name + ".w", c.w);
    fn(name + ".b", c.b);
  };
  for (std::size_t i = 0; i < p.ref.convs.size(); ++i) conv("ref.conv" + std::to_string(i), p.ref.convs[i]);
  for (std::size_t i = 0; i < p.sensed.convs.size(); ++i) conv("sensed.conv" + std::to_string(i), p.sensed.convs[i]);
  conv("rpn.conv", p.rpn.conv);
  conv("rpn.cls", p.rpn.cls);
  conv("rpn.box", p.rpn.box);
  fn("rfa.fc1.w", p.rfa.w1);
  fn("rfa.fc1.b", p.rfa.b1);
  fn("rfa.fc2.w", p.rfa.w2);
  fn("rfa.fc2.b", p.rfa.b2);
  conv("caf.ref", p.caf.ref);
  conv("caf.sensed", p.caf.sensed);
  conv("head.fc", p.head.fc);
  conv("head.cls", p.head.cls);
  conv("head.box", p.head.box);
  conv("head.box3d", p.head.box3d);
}

}  // namespace

void ModelParams::for_each(const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn) {
  visit(*this, fn);
}

void ModelParams::for_each(const std::function<void(const std::string&, const Eigen::MatrixXd&)>& fn) const {
  visit(*this, fn);
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  z.set_zero();
  return z;
}

void ModelParams::set_zero() {
  for_each([](const std::string&, Eigen::MatrixXd& m) { m.setZero(); });
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  auto backbone = [&] {
    Backbone b;
    int in = 1;
    for (std::size_t i = 0; i < c.channels.size(); ++i) {
      b.convs.push_back(make_conv(in, c.channels[i], 3, c.strides[i]));
      in = c.channels[i];
    }
    return b;
  };
  params_.ref = backbone();
  params_.sensed = backbone();
  const int C = c.feature_channels(), A = c.num_anchors(), D = c.region_size();
  params_.rpn.conv = make_conv(C, c.rpn_channels, 3, 1);
  params_.rpn.cls = make_conv(c.rpn_channels, A, 1, 1);
  params_.rpn.box = make_conv(c.rpn_channels, 4 * A, 1, 1);
  params_.rfa = ShiftHead::zeros(D, c.shift_hidden, c.combiner);
  params_.caf.ref = make_dense(D, 2);
  params_.caf.sensed = make_dense(D, 2);
  params_.head.fc = make_dense(D, c.head_hidden);
  params_.head.cls = make_dense(c.head_hidden, 2);
  params_.head.box = make_dense(c.head_hidden, 4);
  params_.head.box3d = make_dense(c.head_hidden, c.box3d ? 7 : 0);
}

Model Model::zeros(ModelConfig config) { return Model(std::move(config)); }

Model::Model(ModelConfig config, std::uint64_t seed) : Model(std::move(config)) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto fill = [&](Eigen::MatrixXd& w, double std) {
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std * gauss(rng);
  };
  auto he = [&](Eigen::MatrixXd& w) { fill(w, std::sqrt(2.0 / std::max<Eigen::Index>(1, w.cols()))); };
  for (auto* bb : {&params_.ref, &params_.sensed}) {
    for (auto& c : bb->convs) he(c.w);
  }
  he(params_.rpn.conv.w);
  fill(params_.rpn.cls.w, 0.01);
  fill(params_.rpn.box.w, 0.01);
  he(params_.rfa.w1);
  fill(params_.rfa.w2, 0.001);
  fill(params_.caf.ref.w, 0.01);
  fill(params_.caf.sensed.w, 0.01);
  he(params_.head.fc.w);
  fill(params_.head.cls.w, 0.01);
  fill(params_.head.box.w, 0.001);
  fill(params_.head.box3d.w, 0.001);
}

// Checkpoint layout (little-endian):
//   "WAMDCKPT" | u32 version | u32 trained | u64 config length | config JSON
//   | u64 config hash | u32 tensor count | tensors
// each tensor: u32 name length | name | u32 rows | u32 cols | f64 data (column-major).
namespace {

constexpr char kMagic[8] = {'W', 'A', 'M', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError("checkpoint '" + path + "': truncated file");
  return v;
}

}  // namespace

void Model::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof kMagic);
  put(os, kCheckpointVersion);
  put<std::uint32_t>(os, trained_ ? 1u : 0u);
  const std::string cfg = config_.to_json().dump();
  put<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<std::uint64_t>(os, config_.hash());
  std::uint32_t n = 0;
  params_.for_each([&](const std::string&, const Eigen::MatrixXd&) { ++n; });
  put(os, n);
  params_.for_each([&](const std::string& name, const Eigen::MatrixXd& m) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  if (!os) throw ConfigError("failed writing checkpoint: " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + p);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) throw ParseError("checkpoint '" + p + "': bad magic");
  const auto version = get<std::uint32_t>(is, p);
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint '" + p + "': unsupported version " + std::to_string(version));
  }
  const bool trained = get<std::uint32_t>(is, p) != 0;
  const auto len = get<std::uint64_t>(is, p);
  if (len > (1u << 24)) throw ParseError("checkpoint '" + p + "': implausible config length");
  std::string cfg(len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(len));
  if (!is) throw ParseError("checkpoint '" + p + "': truncated config");
  const auto stored_hash = get<std::uint64_t>(is, p);
  ModelConfig config;
  try {
    config = ModelConfig::from_json(json::parse(cfg));
  } catch (const json::exception& e) {
    throw ParseError("checkpoint '" + p + "': config is not valid JSON: " + e.what());
  }
  if (config.hash() != stored_hash) throw ParseError("checkpoint '" + p + "': config hash mismatch");
  Model m(config);
  m.trained_ = trained;
  const auto n = get<std::uint32_t>(is, p);
  std::uint32_t expected = 0;
  m.params_.for_each([&](const std::string&, Eigen::MatrixXd&) { ++expected; });
  if (n != expected) throw ParseError("checkpoint '" + p + "': tensor count does not match the architecture");
  m.params_.for_each([&](const std::string& name, Eigen::MatrixXd& t) {
    const auto nl = get<std::uint32_t>(is, p);
    std::string got(nl, '\0');
    is.read(got.data(), nl);
    if (got != name) throw ParseError("checkpoint '" + p + "': expected tensor '" + name + "', found '" + got + "'");
    const auto rows = get<std::uint32_t>(is, p), cols = get<std::uint32_t>(is, p);
    if (rows != t.rows() || cols != t.cols()) throw ParseError("checkpoint '" + p + "': shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw ParseError("checkpoint '" + p + "': truncated tensor " + name);
  });
  return m;
}

// ---------------------------------------------------------------------------
// Forward building blocks

namespace {

struct BackboneTrace {
  std::vector<FeatureMapd> inputs;
  std::vector<RowMatrix<double>> cols;
  std::vector<FeatureMapd> acts;
};

FeatureMapd image_map(const Image& img) {
  FeatureMapd x(1, static_cast<int>(img.rows()), static_cast<int>(img.cols()), 1);
  x.values = Eigen::Map<const RowMatrix<double>>(img.data(), 1, img.size());
  return x;
}

FeatureMapd backbone_forward(const Backbone& bb, const Image& img, BackboneTrace* tr) {
  FeatureMapd x = image_map(img);
  for (const auto& layer : bb.convs) {
    RowMatrix<double> cols;
    FeatureMapd y = nn::conv2d(x, layer.w, layer.b, layer.shape, tr ? &cols : nullptr);
    nn::relu_inplace(y.values);
    if (tr) {
      tr->inputs.push_back(std::move(x));
      tr->cols.push_back(std::move(cols));
      tr->acts.push_back(y);
    }
    x = std::move(y);
  }
  return x;
}

void backbone_backward(const Backbone& bb, const BackboneTrace& tr, FeatureMapd g, Backbone& grad) {
  for (int i = static_cast<int>(bb.convs.size()) - 1; i >= 0; --i) {
    const auto& layer = bb.convs[static_cast<std::size_t>(i)];
    nn::relu_backward(g.values, tr.acts[static_cast<std::size_t>(i)].values);
    FeatureMapd gin = tr.inputs[static_cast<std::size_t>(i)].zeros_like();
    auto& gl = grad.convs[static_cast<std::size_t>(i)];
    nn::conv2d_backward(g, tr.cols[static_cast<std::size_t>(i)], layer.w, layer.shape, gl.w, gl.b,
                        i > 0 ? &gin : nullptr);
    g = std::move(gin);
  }
}

struct RpnTrace {
  FeatureMapd fused, hidden;
  RowMatrix<double> cols_conv, cols_cls, cols_box;
};

struct RpnOut {
  Eigen::VectorXd logits;  // K
  Eigen::MatrixXd deltas;  // K x 4
};

RpnOut rpn_forward(const RpnHead& rpn, const FeatureMapd& fr, const FeatureMapd& fs, RpnTrace* tr) {
  require_same_shape(fr, fs, "propose_regions");
  FeatureMapd fused = fr;
  fused.values += fs.values;
  RowMatrix<double> c0, c1, c2;
  FeatureMapd hidden = nn::conv2d(fused, rpn.conv.w, rpn.conv.b, rpn.conv.shape, tr ? &c0 : nullptr);
  nn::relu_inplace(hidden.values);
  const FeatureMapd cls = nn::conv2d(hidden, rpn.cls.w, rpn.cls.b, rpn.cls.shape, tr ? &c1 : nullptr);
  const FeatureMapd box = nn::conv2d(hidden, rpn.box.w, rpn.box.b, rpn.box.shape, tr ? &c2 : nullptr);
  const int A = cls.channels, cells = cls.height * cls.width;
  RpnOut out{Eigen::VectorXd(cells * A), Eigen::MatrixXd(cells * A, 4)};
  for (int cell = 0; cell < cells; ++cell) {
    for (int a = 0; a < A; ++a) {
      const int k = cell * A + a;
      out.logits(k) = cls.values(a, cell);
      for (int j = 0; j < 4; ++j) out.deltas(k, j) = box.values(a * 4 + j, cell);
    }
  }
  if (tr) {
    tr->fused = std::move(fused);
    tr->hidden = std::move(hidden);
    tr->cols_conv = std::move(c0);
    tr->cols_cls = std::move(c1);
    tr->cols_box = std::move(c2);
  }
  return out;
}

// Returns the gradient with respect to the fused map (= each modality map).
FeatureMapd rpn_backward(const RpnHead& rpn, const RpnTrace& tr, const Eigen::VectorXd& d_logits,
                         const Eigen::MatrixXd& d_deltas, RpnHead& grad) {
  const int A = rpn.cls.shape.out_channels;
  const int cells = tr.hidden.height * tr.hidden.width;
  FeatureMapd g_cls(A, tr.hidden.height, tr.hidden.width, tr.hidden.stride);
  FeatureMapd g_box(4 * A, tr.hidden.height, tr.hidden.width, tr.hidden.stride);
  for (int cell = 0; cell < cells; ++cell) {
    for (int a = 0; a < A; ++a) {
      const int k = cell * A + a;
      g_cls.values(a, cell) = d_logits(k);
      for (int j = 0; j < 4; ++j) g_box.values(a * 4 + j, cell) = d_deltas(k, j);
    }
  }
  FeatureMapd g_hidden = tr.hidden.zeros_like();
  nn::conv2d_backward(g_cls, tr.cols_cls, rpn.cls.w, rpn.cls.shape, grad.cls.w, grad.cls.b, &g_hidden);
  nn::conv2d_backward(g_box, tr.cols_box, rpn.box.w, rpn.box.shape, grad.box.w, grad.box.b, &g_hidden);
  nn::relu_backward(g_hidden.values, tr.hidden.values);
  FeatureMapd g_fused = tr.fused.zeros_like();
  nn::conv2d_backward(g_hidden, tr.cols_conv, rpn.conv.w, rpn.conv.shape, grad.conv.w, grad.conv.b, &g_fused);
  return g_fused;
}

std::vector<Proposal> proposals_from_rpn(const RpnOut& ro, const std::vector<Box2d>& anchors, int top_k,
                                         const Extent& image, int pre_nms, double nms_iou) {
  if (top_k <= 0) return {};
  if (static_cast<Eigen::Index>(anchors.size()) != ro.logits.size()) {
    throw ConfigError("propose_regions: anchor count does not match the proposal head");
  }
  std::vector<int> order(anchors.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return ro.logits(a) > ro.logits(b); });
  if (static_cast<int>(order.size()) > pre_nms) order.resize(static_cast<std::size_t>(pre_nms));
  std::vector<Box2d> boxes;
  std::vector<double> scores;
  for (int k : order) {
    const Box2d b = clip_box(decode_box_deltas(anchors[static_cast<std::size_t>(k)], ro.deltas.row(k).transpose()),
                             image);
    if (!(b.w >= 2.0 && b.h >= 2.0) || !std::isfinite(b.x) || !std::isfinite(b.y)) continue;
    boxes.push_back(b);
    scores.push_back(nn::sigmoid(ro.logits(k)));
  }
  std::vector<Proposal> out;
  for (int i : nms(boxes, scores, nms_iou)) {
    if (static_cast<int>(out.size()) >= top_k) break;
    out.push_back({boxes[static_cast<std::size_t>(i)], scores[static_cast<std::size_t>(i)]});
  }
  return out;
}

Box2d context_box(const Box2d& roi, double factor) { return scale_box(roi, factor); }

Eigen::MatrixXd pool_rows(const FeatureMapd& f, const std::vector<Box2d>& boxes, const PoolSize& ps) {
  const int D = f.channels * ps.height * ps.width;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(boxes.size()), D);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = flatten(pool_region(f, boxes[i], ps).feature);
  }
  return out;
}

void pool_rows_backward(const FeatureMapd& f, const std::vector<Box2d>& boxes, const PoolSize& ps,
                        const Eigen::MatrixXd& g, FeatureMapd& gf) {
  const int bins = ps.height * ps.width;
  Eigen::RowVectorXd row;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    row = g.row(static_cast<Eigen::Index>(i));
    if (row.isZero(0.0)) continue;
    const RowMatrix<double> go = Eigen::Map<const RowMatrix<double>>(row.data(), f.channels, bins);
    pool_region_backward(f, boxes[i], ps, go, &gf);
  }
}

std::vector<Box2d> shifted(const std::vector<Box2d>& boxes, const Eigen::MatrixXd& t) {
  std::vector<Box2d> out(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i] = apply_shift(boxes[i], ShiftTarget{t(r, 0), t(r, 1)});
  }
  return out;
}

std::vector<Box2d> contexts(const std::vector<Box2d>& boxes, double factor) {
  std::vector<Box2d> out(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) out[i] = context_box(boxes[i], factor);
  return out;
}

// Everything the second stage computes, kept for the backward pass.
struct StageTrace {
  std::vector<Box2d> rois, sensed, ctx_r, ctx_s, nctx_r, nctx_s, aligned;
  Eigen::MatrixXd Cr, Cs, NCr, NCs;
  ShiftHeadCache sc, nc;
  Eigen::MatrixXd t, tn;
  Eigen::MatrixXd Fr, Fs, zr, zs, pr, ps, fused, hidden;
  std::vector<ConfidenceWeights> w;
  RegionOutputs out;
};

// rois: reference regions. sensed: sensed regions before alignment.
// nbr_offsets (optional): per-RoI translation in pixels for the neighbour pair.
StageTrace stage_forward(const FeaturePair& f, const std::vector<Box2d>& rois, const std::vector<Box2d>& sensed,
                         const std::vector<Eigen::Vector2d>* nbr_offsets, const Model& model) {
  const ModelConfig& mc = model.config();
  const ModelParams& P = model.params();
  StageTrace s;
  s.rois = rois;
  s.sensed = sensed;
  const auto N = static_cast<Eigen::Index>(rois.size());
  if (mc.rfa) {
    s.ctx_r = contexts(rois, mc.context_factor);
    s.ctx_s = contexts(sensed, mc.context_factor);
    s.Cr = pool_rows(f.ref, s.ctx_r, mc.pool);
    s.Cs = pool_rows(f.sensed, s.ctx_s, mc.pool);
    s.t = shift_head_forward(P.rfa, s.Cr, s.Cs, &s.sc);
    s.aligned = shifted(sensed, s.t);
    if (nbr_offsets) {
      s.nctx_r.resize(rois.size());
      s.nctx_s.resize(rois.size());
      for (std::size_t i = 0; i < rois.size(); ++i) {
        const auto& d = (*nbr_offsets)[i];
        s.nctx_r[i] = s.ctx_r[i].translated(d.x(), d.y());
        s.nctx_s[i] = s.ctx_s[i].translated(d.x(), d.y());
      }
      s.NCr = pool_rows(f.ref, s.nctx_r, mc.pool);
      s.NCs = pool_rows(f.sensed, s.nctx_s, mc.pool);
      s.tn = shift_head_forward(P.rfa, s.NCr, s.NCs, &s.nc);
    }
  } else {
    s.t = Eigen::MatrixXd::Zero(N, 2);
    s.aligned = sensed;
  }
  s.Fr = pool_rows(f.ref, rois, mc.pool);
  s.Fs = pool_rows(f.sensed, s.aligned, mc.pool);
  s.w.resize(rois.size());
  if (mc.caf) {
    s.zr = nn::linear<double>(s.Fr, P.caf.ref.w, P.caf.ref.b);
    s.zs = nn::linear<double>(s.Fs, P.caf.sensed.w, P.caf.sensed.b);
    s.pr = nn::softmax_rows<double>(s.zr);
    s.ps = nn::softmax_rows<double>(s.zs);
    s.fused.resize(N, s.Fr.cols());
    for (Eigen::Index i = 0; i < N; ++i) {
      auto& w = s.w[static_cast<std::size_t>(i)];
      w = confidence_weights(s.pr(i, 1), s.ps(i, 1));
      s.fused.row(i) = w.w_ref * s.Fr.row(i) + w.sensed_gain() * s.Fs.row(i);
    }
  } else {
    s.fused = s.Fr + s.Fs;
  }
  s.hidden = nn::linear<double>(s.fused, P.head.fc.w, P.head.fc.b);
  nn::relu_inplace(s.hidden);
  s.out.logits = nn::linear<double>(s.hidden, P.head.cls.w, P.head.cls.b);
  s.out.deltas = nn::linear<double>(s.hidden, P.head.box.w, P.head.box.b);
  if (mc.box3d) s.out.v3d = nn::linear<double>(s.hidden, P.head.box3d.w, P.head.box3d.b);
  s.out.shifts.resize(rois.size());
  for (Eigen::Index i = 0; i < N; ++i) s.out.shifts[static_cast<std::size_t>(i)] = {s.t(i, 0), s.t(i, 1)};
  s.out.aligned = s.aligned;
  s.out.weights = s.w;
  return s;
}

struct StageGrad {
  Eigen::MatrixXd logits, deltas, v3d;  // N x 2, N x 4, N x 7 (may be empty)
  Eigen::MatrixXd t, tn;                // N x 2 (may be empty)
  Eigen::MatrixXd zr, zs;               // auxiliary logits (may be empty)
};

void add_shift_grad(ShiftHead& dst, const ShiftHeadGrad& g) {
  dst.w1 += g.w1;
  dst.b1 += g.b1;
  dst.w2 += g.w2;
  dst.b2 += g.b2;
}

void stage_backward(const FeaturePair& f, const StageTrace& s, StageGrad g, const Model& model, ModelParams& grad,
                    FeaturePair& gf, bool caf_weight_grad) {
  const ModelConfig& mc = model.config();
  const ModelParams& P = model.params();
  const auto N = s.hidden.rows();
  Eigen::MatrixXd g_hidden =
      nn::linear_backward<double>(g.logits, s.hidden, P.head.cls.w, grad.head.cls.w, grad.head.cls.b);
  g_hidden += nn::linear_backward<double>(g.deltas, s.hidden, P.head.box.w, grad.head.box.w, grad.head.box.b);
  if (mc.box3d && g.v3d.size() > 0) {
    g_hidden += nn::linear_backward<double>(g.v3d, s.hidden, P.head.box3d.w, grad.head.box3d.w, grad.head.box3d.b);
  }
  nn::relu_backward(g_hidden, s.hidden);
  const Eigen::MatrixXd g_fused =
      nn::linear_backward<double>(g_hidden, s.fused, P.head.fc.w, grad.head.fc.w, grad.head.fc.b);

  Eigen::MatrixXd gFr, gFs;
  if (mc.caf) {
    gFr.resize(N, s.Fr.cols());
    gFs.resize(N, s.Fs.cols());
    Eigen::MatrixXd dzr = g.zr.size() ? g.zr : Eigen::MatrixXd::Zero(N, 2);
    Eigen::MatrixXd dzs = g.zs.size() ? g.zs : Eigen::MatrixXd::Zero(N, 2);
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto fg = reweight_fuse_backward(g_fused.row(i), s.Fr.row(i), s.Fs.row(i), s.w[static_cast<std::size_t>(i)]);
      gFr.row(i) = fg.d_ref;
      gFs.row(i) = fg.d_sensed;
      if (!caf_weight_grad) continue;
      // p1 = softmax(z)_1 => dp1/dz = p1 (1 - p1) (-1, +1).
      const double jr = s.pr(i, 1) * (1.0 - s.pr(i, 1)), js = s.ps(i, 1) * (1.0 - s.ps(i, 1));
      dzr(i, 0) -= fg.d_p1_ref * jr;
      dzr(i, 1) += fg.d_p1_ref * jr;
      dzs(i, 0) -= fg.d_p1_sensed * js;
      dzs(i, 1) += fg.d_p1_sensed * js;
    }
    gFr += nn::linear_backward<double>(dzr, s.Fr, P.caf.ref.w, grad.caf.ref.w, grad.caf.ref.b);
    gFs += nn::linear_backward<double>(dzs, s.Fs, P.caf.sensed.w, grad.caf.sensed.w, grad.caf.sensed.b);
  } else {
    gFr = g_fused;
    gFs = g_fused;
  }
  // The aligned position is treated as a constant: no gradient through t.
  pool_rows_backward(f.ref, s.rois, mc.pool, gFr, gf.ref);
  pool_rows_backward(f.sensed, s.aligned, mc.pool, gFs, gf.sensed);

  if (mc.rfa) {
    const int D = mc.region_size();
    auto head_back = [&](const ShiftHeadCache& cache, const Eigen::MatrixXd& gt, const std::vector<Box2d>& br,
                         const std::vector<Box2d>& bs) {
      if (gt.size() == 0 || gt.isZero(0.0)) return;
      ShiftHeadGrad hg = ShiftHeadGrad::zeros_like(P.rfa);
      const Eigen::MatrixXd g_in = shift_head_backward(P.rfa, cache, gt, hg);
      add_shift_grad(grad.rfa, hg);
      Eigen::MatrixXd g_r, g_s;
      split_combined_grad(g_in, P.rfa.combiner, D, g_r, g_s);
      pool_rows_backward(f.ref, br, mc.pool, g_r, gf.ref);
      pool_rows_backward(f.sensed, bs, mc.pool, g_s, gf.sensed);
    };
    head_back(s.sc, g.t, s.ctx_r, s.ctx_s);
    if (!s.nctx_r.empty()) head_back(s.nc, g.tn, s.nctx_r, s.nctx_s);
  }
}

void check_scene(const ScenePair& scene, const ModelConfig& mc) {
  const Extent e = scene.extent();
  if (e.width != mc.input_width || e.height != mc.input_height ||
      scene.sensed_image.cols() != scene.ref_image.cols() || scene.sensed_image.rows() != scene.ref_image.rows()) {
    throw ConfigError("scene '" + scene.scene_id + "' is " + std::to_string(e.width) + "x" +
                      std::to_string(e.height) + " but the model expects " + std::to_string(mc.input_width) + "x" +
                      std::to_string(mc.input_height));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Public pipeline

FeaturePair extract_features(const ScenePair& scene, const Model& model) {
  check_scene(scene, model.config());
  return {backbone_forward(model.params().ref, scene.ref_image, nullptr),
          backbone_forward(model.params().sensed, scene.sensed_image, nullptr)};
}

std::vector<Box2d> make_anchors(int feat_h, int feat_w, int stride, const std::vector<double>& sizes,
                                const std::vector<double>& aspects) {
  std::vector<Box2d> out;
  out.reserve(static_cast<std::size_t>(feat_h * feat_w) * sizes.size() * aspects.size());
  for (int y = 0; y < feat_h; ++y) {
    for (int x = 0; x < feat_w; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      for (double s : sizes) {
        for (double a : aspects) {
          const double r = std::sqrt(a);
          out.push_back({cx, cy, s / r, s * r});
        }
      }
    }
  }
  return out;
}

std::vector<int> nms(const std::vector<Box2d>& boxes, const std::vector<double>& scores, double iou_thr) {
  if (boxes.size() != scores.size()) throw ValidationError("nms: one score per box required");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] >
                                                                          scores[static_cast<std::size_t>(b)]; });
  std::vector<int> keep;
  std::vector<char> dead(boxes.size(), 0);
  for (int i : order) {
    if (dead[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (dead[static_cast<std::size_t>(j)] || j == i) continue;
      if (iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) > iou_thr) {
        dead[static_cast<std::size_t>(j)] = 1;
      }
    }
    dead[static_cast<std::size_t>(i)] = 1;
  }
  return keep;
}

std::vector<Proposal> propose_regions(const FeatureMapd& f_ref, const FeatureMapd& f_sensed, const RpnHead& rpn,
                                      const std::vector<Box2d>& anchors, int top_k, const Extent& image, int pre_nms,
                                      double nms_iou) {
  if (top_k <= 0) return {};
  const RpnOut ro = rpn_forward(rpn, f_ref, f_sensed, nullptr);
  return proposals_from_rpn(ro, anchors, top_k, image, pre_nms, nms_iou);
}

RegionOutputs run_regions(const FeaturePair& features, const std::vector<Box2d>& rois, const Model& model,
                          const Extent&) {
  return stage_forward(features, rois, rois, nullptr, model).out;
}

std::vector<DetectionResult> detect(const ScenePair& scene, const Model& model, double tau) {
  const ModelConfig& mc = model.config();
  if (!model.trained()) throw ConfigError("detect: model has not been trained");
  if (mc.box3d && !scene.has_depth()) throw ConfigError("detect: a 3D model needs a depth scene");
  const FeaturePair f = extract_features(scene, model);
  const Extent ext = scene.extent();
  const auto anchors = make_anchors(f.ref.height, f.ref.width, mc.feature_stride(), mc.anchor_sizes, mc.anchor_aspects);
  const auto props = propose_regions(f.ref, f.sensed, model.params().rpn, anchors, mc.proposals_test, ext,
                                     mc.rpn_pre_nms, mc.rpn_nms);
  if (props.empty()) return {};
  std::vector<Box2d> rois;
  for (const auto& p : props) rois.push_back(p.roi);
  const RegionOutputs ro = run_regions(f, rois, model, ext);
  const Eigen::MatrixXd prob = nn::softmax_rows<double>(ro.logits);
  std::vector<Box2d> boxes;
  std::vector<double> scores;
  std::vector<int> src;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Box2d b = clip_box(decode_box_deltas(rois[i], ro.deltas.row(r).transpose()), ext);
    if (!b.valid()) continue;
    boxes.push_back(b);
    scores.push_back(prob(r, 1));
    src.push_back(static_cast<int>(i));
  }
  std::vector<DetectionResult> out;
  for (int k : nms(boxes, scores, mc.nms_iou)) {
    const auto ku = static_cast<std::size_t>(k);
    if (!(scores[ku] > tau)) continue;
    const auto i = static_cast<std::size_t>(src[ku]);
    DetectionResult d;
    d.box = boxes[ku];
    d.class_label = mc.class_label;
    d.confidence = scores[ku];
    d.shift = ro.shifts[i];
    if (mc.box3d) {
      try {
        const Box3D init = init_box3d(boxes[ku], depth_patch(scene, ro.aligned[i]), *scene.intrinsics, mc.class_dims,
                                      mc.class_label);
        const Box3Targets<double> v = ro.v3d.row(static_cast<Eigen::Index>(i)).transpose();
        d.box3d = decode_3d(init, v);
      } catch (const InitializationError&) {
        // No usable depth: the detection keeps its 2D box only.
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

constexpr double kRpnPosIou = 0.6;
constexpr double kRpnNegIou = 0.3;

double rpn_loss(const RpnOut& ro, const std::vector<Box2d>& anchors, const std::vector<Box2d>& gts, int batch,
                std::mt19937_64& rng, double beta, Eigen::VectorXd& d_logits, Eigen::MatrixXd& d_deltas) {
  const auto K = static_cast<int>(anchors.size());
  d_logits = Eigen::VectorXd::Zero(K);
  d_deltas = Eigen::MatrixXd::Zero(K, 4);
  std::vector<int> label(static_cast<std::size_t>(K), -1), match(static_cast<std::size_t>(K), -1);
  std::vector<double> best_for_gt(gts.size(), 0.0);
  Eigen::MatrixXd ious(K, static_cast<Eigen::Index>(gts.size()));
  for (int k = 0; k < K; ++k) {
    double best = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double o = iou(anchors[static_cast<std::size_t>(k)], gts[g]);
      ious(k, static_cast<Eigen::Index>(g)) = o;
      best_for_gt[g] = std::max(best_for_gt[g], o);
      if (o > best) {
        best = o;
        match[static_cast<std::size_t>(k)] = static_cast<int>(g);
      }
    }
    if (best < kRpnNegIou) label[static_cast<std::size_t>(k)] = 0;
    else if (best >= kRpnPosIou) label[static_cast<std::size_t>(k)] = 1;
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (best_for_gt[g] < 0.1) continue;
    for (int k = 0; k < K; ++k) {
      if (ious(k, static_cast<Eigen::Index>(g)) == best_for_gt[g]) {
        label[static_cast<std::size_t>(k)] = 1;
        match[static_cast<std::size_t>(k)] = static_cast<int>(g);
      }
    }
  }
  std::vector<int> pos, neg;
  for (int k = 0; k < K; ++k) {
    if (label[static_cast<std::size_t>(k)] == 1) pos.push_back(k);
    else if (label[static_cast<std::size_t>(k)] == 0) neg.push_back(k);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  if (static_cast<int>(pos.size()) > batch / 2) pos.resize(static_cast<std::size_t>(batch / 2));
  const int n_neg = std::min<int>(static_cast<int>(neg.size()), batch - static_cast<int>(pos.size()));
  neg.resize(static_cast<std::size_t>(n_neg));
  const double n = static_cast<double>(pos.size() + neg.size());
  if (n == 0) return 0.0;
  double loss = 0;
  auto bce = [&](int k, int y) {
    const double z = ro.logits(k);
    // log(1 + e^z) - y z, computed stably.
    loss += (std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z) / n;
    d_logits(k) = (nn::sigmoid(z) - y) / n;
  };
  for (int k : neg) bce(k, 0);
  for (int k : pos) {
    bce(k, 1);
    const Eigen::Vector4d target =
        encode_box_deltas(anchors[static_cast<std::size_t>(k)], gts[static_cast<std::size_t>(match[static_cast<std::size_t>(k)])]);
    for (int j = 0; j < 4; ++j) {
      const double r = ro.deltas(k, j) - target(j);
      loss += nn::smooth_l1(r, beta) / n;
      d_deltas(k, j) = nn::smooth_l1_grad(r, beta) / n;
    }
  }
  return loss;
}

double cross_entropy(const Eigen::MatrixXd& z, const std::vector<RoiLabel>& labels, Eigen::MatrixXd& dz) {
  dz = Eigen::MatrixXd::Zero(z.rows(), z.cols());
  int n = 0;
  for (const auto& l : labels) n += l.p_star >= 0 ? 1 : 0;
  if (n == 0) return 0.0;
  const Eigen::MatrixXd p = nn::softmax_rows<double>(z);
  double loss = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)].p_star;
    if (y < 0) continue;
    loss -= std::log(std::max(p(i, y), 1e-300)) / n;
    dz.row(i) = p.row(i) / n;
    dz(i, y) -= 1.0 / n;
  }
  return loss;
}

}  // namespace

StepLosses train_step(const Model& model, const ScenePair& scene, const TrainConfig& cfg, std::mt19937_64& rng,
                      ModelParams& grad) {
  const ModelConfig& mc = model.config();
  const ModelParams& P = model.params();
  check_scene(scene, mc);
  if (mc.box3d && !(scene.has_depth() && scene.intrinsics)) {
    throw ConfigError("train: scene '" + scene.scene_id + "' has no depth but the model regresses 3D boxes");
  }
  const Extent ext = scene.extent();
  const int stride = mc.feature_stride();
  StepLosses L;

  BackboneTrace tr_r, tr_s;
  FeaturePair f{backbone_forward(P.ref, scene.ref_image, &tr_r), backbone_forward(P.sensed, scene.sensed_image, &tr_s)};
  FeaturePair gf{f.ref.zeros_like(), f.sensed.zeros_like()};

  // Proposal stage.
  std::vector<Box2d> gts;
  for (const auto& o : scene.objects) {
    if (o.ref_box) gts.push_back(*o.ref_box);
  }
  const auto anchors = make_anchors(f.ref.height, f.ref.width, stride, mc.anchor_sizes, mc.anchor_aspects);
  RpnTrace rt;
  const RpnOut ro = rpn_forward(P.rpn, f.ref, f.sensed, &rt);
  Eigen::VectorXd d_rpn_logits;
  Eigen::MatrixXd d_rpn_deltas;
  L.rpn = rpn_loss(ro, anchors, gts, cfg.rpn_batch, rng, cfg.loss.smooth_l1_beta, d_rpn_logits, d_rpn_deltas);

  // Candidate regions: proposals, ground truth, and perturbed ground truth.
  std::vector<Box2d> cand;
  for (const auto& p : proposals_from_rpn(ro, anchors, cfg.rpn_post_nms_train, ext, mc.rpn_pre_nms, mc.rpn_nms)) {
    cand.push_back(p.roi);
  }
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (const auto& g : gts) {
    cand.push_back(g);
    for (int c = 0; c < cfg.gt_jitter_copies; ++c) {
      const Box2d b{g.x + 0.15 * g.w * u(rng), g.y + 0.15 * g.h * u(rng), g.w * std::exp(0.2 * u(rng)),
                    g.h * std::exp(0.2 * u(rng))};
      const Box2d cb = clip_box(b, ext);
      if (cb.w >= 2 && cb.h >= 2) cand.push_back(cb);
    }
  }
  const auto cand_labels = assign_minibatch_labels(cand, scene.objects, cfg.fg_thr, cfg.bg_thr);
  std::vector<int> fg, bg;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (cand_labels[i].p_star == 1) fg.push_back(static_cast<int>(i));
    else if (cand_labels[i].p_star == 0) bg.push_back(static_cast<int>(i));
  }
  std::shuffle(fg.begin(), fg.end(), rng);
  std::shuffle(bg.begin(), bg.end(), rng);
  const int R = cfg.rois_per_image;
  const int n_fg = std::min<int>(static_cast<int>(fg.size()), static_cast<int>(std::lround(cfg.fg_fraction * R)));
  const int n_bg = std::min<int>(static_cast<int>(bg.size()), R - n_fg);
  std::vector<Box2d> rois;
  std::vector<RoiLabel> labels;
  for (int i = 0; i < n_fg; ++i) {
    rois.push_back(cand[static_cast<std::size_t>(fg[static_cast<std::size_t>(i)])]);
    labels.push_back(cand_labels[static_cast<std::size_t>(fg[static_cast<std::size_t>(i)])]);
  }
  for (int i = 0; i < n_bg; ++i) {
    rois.push_back(cand[static_cast<std::size_t>(bg[static_cast<std::size_t>(i)])]);
    labels.push_back(cand_labels[static_cast<std::size_t>(bg[static_cast<std::size_t>(i)])]);
  }
  const std::size_t N = rois.size();

  // Sensed regions: jittered copies when alignment is trained with jitter.
  std::vector<Box2d> sensed = rois;
  std::vector<ShiftTarget> tj(N);
  const bool jitter = mc.rfa && mc.jitter;
  if (jitter) {
    for (std::size_t i = 0; i < N; ++i) {
      const auto j = roi_jitter(rois[i], cfg.jitter, rng);
      sensed[i] = j.roi;
      tj[i] = j.jitter;
    }
  }
  std::vector<Eigen::Vector2d> offsets;
  const bool asc = mc.rfa && mc.asc;
  if (asc) {
    offsets.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
      const Box2d n = asc_pair(rois[i], stride, rng);
      offsets[i] = {n.x - rois[i].x, n.y - rois[i].y};
    }
  }

  StageTrace st = stage_forward(f, rois, sensed, asc ? &offsets : nullptr, model);

  MultiTaskInputs in;
  in.logits = st.out.logits;
  in.deltas = st.out.deltas;
  in.labels = labels;
  in.with_asc = asc;
  if (mc.rfa) {
    in.shifts.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
      auto& sp = in.shifts[i];
      const auto r = static_cast<Eigen::Index>(i);
      sp.roi_index = static_cast<int>(i);
      sp.predicted = {st.t(r, 0), st.t(r, 1)};
      if (labels[i].t_star) sp.target = jitter ? enrich_target(*labels[i].t_star, tj[i]) : *labels[i].t_star;
      if (asc) sp.neighbor_predicted = ShiftTarget{st.tn(r, 0), st.tn(r, 1)};
    }
  }
  MultiTaskGrad mg;
  L.head = multi_task_loss(in, cfg.loss, &mg);

  StageGrad sg;
  sg.logits = mg.d_logits;
  sg.deltas = mg.d_deltas;
  if (mc.rfa) {
    sg.t = mg.d_shift;
    if (asc) sg.tn = mg.d_asc;
  }
  if (mc.caf) {
    L.aux = cross_entropy(st.zr, labels, sg.zr) + cross_entropy(st.zs, labels, sg.zs);
  }
  if (mc.box3d) {
    sg.v3d = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(N), 7);
    std::vector<std::pair<std::size_t, Box3Targets<double>>> targets;
    for (std::size_t i = 0; i < N; ++i) {
      if (labels[i].p_star != 1) continue;
      const auto& obj = scene.objects[static_cast<std::size_t>(labels[i].object_index)];
      if (!obj.box3d) continue;
      try {
        const Box3D init = init_box3d(rois[i], depth_patch(scene, st.aligned[i]), *scene.intrinsics, mc.class_dims,
                                      mc.class_label);
        targets.emplace_back(i, encode_3d_targets(init, *obj.box3d));
      } catch (const InitializationError&) {
        ++L.dropped_3d;
      }
    }
    for (const auto& [i, vs] : targets) {
      const auto r = static_cast<Eigen::Index>(i);
      const Box3Targets<double> v = st.out.v3d.row(r).transpose();
      const double n = static_cast<double>(targets.size());
      L.l3d += loss_3d(1, v, vs, cfg.loss.smooth_l1_beta) / n;
      sg.v3d.row(r) = loss_3d_grad(1, v, vs, cfg.loss.smooth_l1_beta).transpose() / n;
    }
  }
  L.total = L.head.total + L.rpn + L.aux + L.l3d;

  stage_backward(f, st, std::move(sg), model, grad, gf, cfg.caf_weight_grad);
  const FeatureMapd g_fused = rpn_backward(P.rpn, rt, d_rpn_logits, d_rpn_deltas, grad.rpn);
  gf.ref.values += g_fused.values;
  gf.sensed.values += g_fused.values;
  backbone_backward(P.ref, tr_r, std::move(gf.ref), grad.ref);
  backbone_backward(P.sensed, tr_s, std::move(gf.sensed), grad.sensed);
  return L;
}

namespace {

void accumulate(StepLosses& acc, const StepLosses& s) {
  acc.head.cls += s.head.cls;
  acc.head.shift += s.head.shift;
  acc.head.asc += s.head.asc;
  acc.head.reg += s.head.reg;
  acc.head.total += s.head.total;
  acc.rpn += s.rpn;
  acc.aux += s.aux;
  acc.l3d += s.l3d;
  acc.total += s.total;
  acc.dropped_3d += s.dropped_3d;
}

void scale(StepLosses& s, double k) {
  s.head.cls *= k;
  s.head.shift *= k;
  s.head.asc *= k;
  s.head.reg *= k;
  s.head.total *= k;
  s.rpn *= k;
  s.aux *= k;
  s.l3d *= k;
  s.total *= k;
}

}  // namespace

std::vector<EpochLog> train(Model& model, const std::vector<ScenePair>& scenes, const TrainConfig& cfg,
                            const std::function<void(const EpochLog&)>& progress) {
  cfg.validate();
  if (scenes.empty()) throw ConfigError("train: no training scenes");
  std::mt19937_64 rng(cfg.seed);
  ModelParams grad = model.params().zeros_like();
  ModelParams velocity = model.params().zeros_like();
  std::vector<int> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> logs;
  const int drop_epoch = static_cast<int>(std::ceil(cfg.lr_drop_at * cfg.epochs));
  long iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double base_lr = epoch < drop_epoch ? cfg.learning_rate : cfg.learning_rate * 0.1;
    EpochLog log;
    log.epoch = epoch;
    log.learning_rate = base_lr;
    for (int idx : order) {
      grad.set_zero();
      const StepLosses s = train_step(model, scenes[static_cast<std::size_t>(idx)], cfg, rng, grad);
      if (!std::isfinite(s.total)) {
        throw ConfigError("train: loss diverged at epoch " + std::to_string(epoch) + " (scene '" +
                          scenes[static_cast<std::size_t>(idx)].scene_id + "')");
      }
      accumulate(log.mean, s);
      double sq = 0;
      grad.for_each([&](const std::string&, const Eigen::MatrixXd& g) { sq += g.squaredNorm(); });
      const double norm = std::sqrt(sq);
      const double clip = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
      const double lr = iter < cfg.warmup_iters ? base_lr * (0.1 + 0.9 * double(iter) / cfg.warmup_iters) : base_lr;
      ++iter;
      // Walk the three parameter sets in lockstep.
      std::vector<Eigen::MatrixXd*> gs, vs;
      grad.for_each([&](const std::string&, Eigen::MatrixXd& g) { gs.push_back(&g); });
      velocity.for_each([&](const std::string&, Eigen::MatrixXd& v) { vs.push_back(&v); });
      std::size_t k = 0;
      model.params().for_each([&](const std::string&, Eigen::MatrixXd& w) {
        Eigen::MatrixXd& v = *vs[k];
        const Eigen::MatrixXd& g = *gs[k];
        ++k;
        v = cfg.momentum * v - lr * (clip * g + cfg.weight_decay * w);
        w += v;
      });
    }
    scale(log.mean, 1.0 / static_cast<double>(scenes.size()));
    logs.push_back(log);
    if (progress) progress(log);
  }
  model.set_trained(true);
  return logs;
}

}  // namespace wamd
