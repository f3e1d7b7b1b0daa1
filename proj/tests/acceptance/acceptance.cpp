// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.
//
//   wamd_acceptance [--only N] [--work DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "wamd/box3d.hpp"
#include "wamd/commands.hpp"
#include "wamd/detector.hpp"
#include "wamd/evaluation.hpp"
#include "wamd/geometry.hpp"
#include "wamd/paired_data.hpp"
#include "wamd/rfa.hpp"

namespace fs = std::filesystem;
using namespace wamd;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass{false};
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool close_rel(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1. Geometry round trips.
Outcome geometry_round_trips() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> pos(0, 200), size(2, 80), pos3(-5, 5), dim(0.2, 3), yaw(-1.5, 1.5);
  int bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const Box2d r{pos(rng), pos(rng), size(rng), size(rng)};
    const Box2d s{pos(rng), pos(rng), r.w, r.h};
    const Box2d back = apply_shift(r, shift_targets(r, s));
    if (!close_rel(back.x, s.x, 1e-9) || !close_rel(back.y, s.y, 1e-9) || back.w != r.w || back.h != r.h) ++bad;
  }
  for (int i = 0; i < 1000; ++i) {
    auto box = [&] {
      Box3D b;
      b.x = pos3(rng);
      b.y = pos3(rng);
      b.z = 5 + pos3(rng);
      b.l = dim(rng);
      b.w = dim(rng);
      b.h = dim(rng);
      b.theta = yaw(rng);
      return b;
    };
    const Box3D init = box(), gt = box();
    const auto a = decode_3d(init, encode_3d_targets(init, gt)).vector();
    const auto b = gt.vector();
    for (int k = 0; k < 7; ++k) {
      if (!close_rel(a(k), b(k), 1e-9)) {
        ++bad;
        break;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 5.0, std::to_string(bad) + " mismatches of 2000, " + fmt("%.3f s", secs)};
}

// 2 and 3 run the finite-difference and oracle unit suites.
Outcome run_suites(const std::vector<std::pair<std::string, std::string>>& suites, double limit_s, const fs::path& work) {
  const auto t0 = Clock::now();
  std::string failed;
  int ran = 0;
  for (const auto& [binary, filter] : suites) {
    const fs::path json_out = work / (fs::path(binary).filename().string() + "_result.json");
    fs::remove(json_out);
    const std::string cmd = "\"" + binary + "\" --gtest_filter='" + filter + "' --gtest_output=json:\"" +
                            json_out.string() + "\" > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    int tests = 0;
    if (fs::exists(json_out)) tests = read_json_file(json_out).value("tests", 0);
    ran += tests;
    if (rc != 0 || tests == 0) failed += " " + fs::path(binary).filename().string();
  }
  const double secs = seconds_since(t0);
  const bool ok = failed.empty() && secs < limit_s;
  return {ok, std::to_string(ran) + " tests" + (failed.empty() ? std::string(", all pass") : ", failing:" + failed) +
                  ", " + fmt("%.1f s", secs)};
}

Outcome gradient_suite(const fs::path& work) {
  const std::string d = WAMD_TEST_DIR;
  return run_suites({{d + "/test_rfa", "ShiftLoss.GradientsMatchFiniteDifferences:MultiTaskLoss.GradientMatchesFiniteDifferences:"
                                       "ShiftHead.*FiniteDifferences"},
                     {d + "/test_caf", "ReweightFuseBackward.MatchesFiniteDifferences"},
                     {d + "/test_roi_align", "PoolRegionBackward.*"},
                     {d + "/test_box3d", "Loss3d.GradientMatchesFiniteDifferences"},
                     {d + "/test_detector", "TrainStep.*"}},
                    120.0, work);
}

Outcome metric_oracles(const fs::path& work) {
  const std::string d = WAMD_TEST_DIR;
  return run_suites({{d + "/test_evaluation", "MissRate.MatchesBruteForceOracle:MeanAveragePrecision.MatchesBruteForceOracle"}},
                    1e9, work);
}

// 4. Relative degradation of a miss rate going from 15.2 to 25.1.
Outcome degradation_scalar() {
  const double r = degradation_rate(15.2, 25.1, MetricKind::kMR);
  return {std::abs(r - 0.651) <= 0.001, fmt("R_d = %.5f", r)};
}

// 5. Jitter statistics and label invariance.
Outcome jitter_statistics() {
  const JitterConfig cfg{0.05, 0.08};
  std::mt19937_64 rng(55);
  const Box2d roi{40, 40, 12, 20};
  const int n = 100000;
  double sx = 0, sxx = 0, sy = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    const auto j = roi_jitter(roi, cfg, rng);
    sx += j.jitter.tx;
    sxx += j.jitter.tx * j.jitter.tx;
    sy += j.jitter.ty;
    syy += j.jitter.ty * j.jitter.ty;
  }
  const double sdx = std::sqrt(sxx / n - (sx / n) * (sx / n));
  const double sdy = std::sqrt(syy / n - (sy / n) * (sy / n));
  const bool sigma_ok = std::abs(sdx / cfg.sigma0 - 1) <= 0.02 && std::abs(sdy / cfg.sigma1 - 1) <= 0.02;

  std::uniform_real_distribution<double> u(0, 1);
  int flips = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<PairedObject> objs(3);
    for (std::size_t k = 0; k < objs.size(); ++k) {
      auto& o = objs[k];
      o.pair_id = static_cast<int>(k);
      o.ref_box = Box2d{10 + 40 * u(rng), 10 + 40 * u(rng), 6 + 10 * u(rng), 8 + 14 * u(rng)};
      o.sensed_box = o.ref_box->translated(8 * u(rng) - 4, 8 * u(rng) - 4);
      if (k == 2 && u(rng) < 0.3) {
        o.sensed_box.reset();
        o.unpaired = true;
      }
    }
    const Box2d& near = *objs[static_cast<std::size_t>(trial % 3)].ref_box;
    const std::vector<Box2d> rois{near.translated(6 * u(rng) - 3, 6 * u(rng) - 3), Box2d{32, 32, 10, 14}};
    const auto before = assign_minibatch_labels(rois, objs);
    std::vector<Box2d> sensed;
    std::vector<ShiftTarget> tj;
    for (const auto& r : rois) {
      const auto j = roi_jitter(r, JitterConfig{0.2, 0.2}, rng);
      sensed.push_back(j.roi);
      tj.push_back(j.jitter);
    }
    const auto after = assign_minibatch_labels(rois, objs);
    for (std::size_t i = 0; i < rois.size(); ++i) {
      const auto& a = before[i];
      const auto& b = after[i];
      bool same = a.p_star == b.p_star && a.object_index == b.object_index && a.g_star == b.g_star &&
                  a.t_star.has_value() == b.t_star.has_value();
      if (same && a.t_star) {
        // The enriched target still points the jittered region at the sensed object.
        const Box2d moved = apply_shift(sensed[i], enrich_target(*a.t_star, tj[i]));
        const Box2d want = apply_shift(rois[i], *a.t_star);
        same = std::abs(moved.x - want.x) < 1e-9 && std::abs(moved.y - want.y) < 1e-9;
      }
      if (!same) ++flips;
    }
  }
  return {sigma_ok && flips == 0, fmt("sigma_x %.5f", sdx) + fmt(" (cfg %.3f)", cfg.sigma0) + fmt(", sigma_y %.5f", sdy) +
                                      fmt(" (cfg %.3f)", cfg.sigma1) + ", " + std::to_string(flips) + " label flips"};
}

// 6. Robustness of the full model against the baseline.
double shift_mae_px(const Model& model, const std::vector<ScenePair>& scenes) {
  double sum = 0;
  int n = 0;
  for (const auto& s : scenes) {
    std::vector<Box2d> rois, truth;
    for (const auto& o : s.objects) {
      if (!o.ref_box || !o.sensed_box || o.unpaired) continue;
      rois.push_back(*o.ref_box);
      truth.push_back(*o.sensed_box);
    }
    if (rois.empty()) continue;
    const auto out = run_regions(extract_features(s, model), rois, model, s.extent());
    for (std::size_t i = 0; i < rois.size(); ++i) {
      const Box2d p = apply_shift(rois[i], out.shifts[i]);
      sum += std::hypot(p.x - truth[i].x, p.y - truth[i].y);
      ++n;
    }
  }
  return n ? sum / n : 0.0;
}

Outcome robustness(const fs::path& work) {
  const auto t0 = Clock::now();
  const fs::path cfgdir = WAMD_CONFIG_DIR;
  const fs::path data = work / "robust_data", base = work / "robust_base", full = work / "robust_full";
  for (const auto& p : {data, base, full}) fs::remove_all(p);

  const GenDataConfig gd = GenDataConfig::from_json(read_json_file(cfgdir / "robustness_data.json"));
  gd.validate();
  const auto ds = cmd_gen_data(gd, data);
  cmd_train(TrainRunConfig::from_json(read_json_file(cfgdir / "baseline.json")), data, base);
  cmd_train(TrainRunConfig::from_json(read_json_file(cfgdir / "full.json")), data, full);

  EvalRunConfig ec = EvalRunConfig::from_json(read_json_file(cfgdir / "eval.json"));
  SweepOptions o;
  o.directional = true;
  o.max_px = 6;
  o.bounds_from = base / kCheckpointName;
  const auto rb = cmd_sweep(base / kCheckpointName, data, o, ec, work / "robust_sweep_base");
  const auto rf = cmd_sweep(full / kCheckpointName, data, o, ec, work / "robust_sweep_full");

  bool sigma_ok = true;
  std::string ratios;
  for (std::size_t i = 0; i < rb.directional.size(); ++i) {
    const double sb = rb.directional[i].sigma, sf = rf.directional[i].sigma;
    const double ratio = sb > 0 ? sf / sb : (sf > 0 ? INFINITY : 0.0);
    if (!(sf < 0.5 * sb)) sigma_ok = false;
    ratios += (i ? "/" : "") + fmt("%.2f", ratio);
  }
  const double ob = rb.directional.front().origin, of = rf.directional.front().origin;
  const bool origin_ok = of <= ob;  // miss rate: lower is better

  std::vector<ScenePair> test;
  for (auto& s : load_dataset(data / "data")) {
    if (s.split == "test") test.push_back(std::move(s));
  }
  const double mae = shift_mae_px(Model::load(full / kCheckpointName), test);
  const double secs = seconds_since(t0);
  const bool ok = sigma_ok && origin_ok && mae < 2.0 && secs < 45 * 60;
  return {ok, std::to_string(ds.scenes) + " scenes, " + fmt("%.1f%% unpaired; ", 100.0 * ds.unpaired / ds.objects) +
                  "sigma full/base " + ratios + fmt("; origin MR full %.4f", of) + fmt(" vs base %.4f", ob) +
                  fmt("; shift MAE %.2f px", mae) + fmt("; %.0f s", secs)};
}

// 7. Suppressed sensed features leave predictions bit-identical.
bool same_bits(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

Outcome caf_suppression() {
  GenDataConfig gd;
  gd.seed = 77;
  gd.scenes = 6;
  gd.test_scenes = 0;
  const auto scenes = generate_dataset(gd);
  ModelConfig mc;
  Model m(mc, 17);
  // Zero sensed auxiliary classifier: p1 = 0.5, so w_sensed * w_disagree = 0.
  m.params().caf.sensed.w.setZero();
  m.params().caf.sensed.b.setZero();
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0, 2);
  int changed = 0, checks = 0;
  for (const auto& s : scenes) {
    const auto f = extract_features(s, m);
    std::vector<Box2d> rois;
    for (const auto& o : s.objects) rois.push_back(o.ref_box ? *o.ref_box : *o.sensed_box);
    for (const auto& p : propose_regions(f.ref, f.sensed, m.params().rpn,
                                         make_anchors(f.ref.height, f.ref.width, mc.feature_stride(), mc.anchor_sizes,
                                                      mc.anchor_aspects),
                                         20, s.extent())) {
      rois.push_back(p.roi);
    }
    const auto base = run_regions(f, rois, m, s.extent());
    for (int trial = 0; trial < 5; ++trial) {
      FeaturePair g = f;
      for (Eigen::Index i = 0; i < g.sensed.values.size(); ++i) g.sensed.values.data()[i] += noise(rng);
      const auto out = run_regions(g, rois, m, s.extent());
      bool same = same_bits(out.logits, base.logits) && same_bits(out.deltas, base.deltas);
      for (std::size_t i = 0; same && i < out.weights.size(); ++i) same = out.weights[i].sensed_gain() == 0.0;
      if (!same) ++changed;
      ++checks;
    }
  }
  return {changed == 0 && checks > 0, std::to_string(changed) + " of " + std::to_string(checks) + " perturbed runs changed"};
}

// 8. Determinism of generation and training.
Outcome determinism(const fs::path& work) {
  GenDataConfig gd = GenDataConfig::from_json(read_json_file(fs::path(WAMD_CONFIG_DIR) / "gen_data.json"));
  gd.scenes = 40;
  gd.test_scenes = 8;
  TrainRunConfig tc;
  tc.train.epochs = 2;
  std::string sums[2];
  double losses[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path d = work / ("det_data_" + std::to_string(k)), t = work / ("det_train_" + std::to_string(k));
    fs::remove_all(d);
    fs::remove_all(t);
    sums[k] = cmd_gen_data(gd, d).checksum;
    losses[k] = cmd_train(tc, d, t).final_loss;
  }
  const bool ok = sums[0] == sums[1] && std::memcmp(&losses[0], &losses[1], sizeof(double)) == 0;
  char buf[160];
  std::snprintf(buf, sizeof buf, "checksums %s / %s, final loss %.17g / %.17g", sums[0].c_str(), sums[1].c_str(),
                losses[0], losses[1]);
  return {ok, buf};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  fs::path work = fs::temp_directory_path() / "wamd_acceptance";
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) only = std::atoi(argv[++i]);
    else if (std::strcmp(argv[i], "--work") == 0 && i + 1 < argc) work = argv[++i];
    else {
      std::fprintf(stderr, "usage: %s [--only N] [--work DIR]\n", argv[0]);
      return 2;
    }
  }
  fs::create_directories(work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"geometry round trips", geometry_round_trips},
      {"gradient suite", [&] { return gradient_suite(work); }},
      {"metric oracles", [&] { return metric_oracles(work); }},
      {"degradation scalar", degradation_scalar},
      {"jitter statistics", jitter_statistics},
      {"shift robustness", [&] { return robustness(work); }},
      {"fusion suppression invariance", caf_suppression},
      {"determinism", [&] { return determinism(work); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (only && only != id) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures ? 1 : 0;
}
