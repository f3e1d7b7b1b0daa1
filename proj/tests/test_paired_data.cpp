#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "wamd/paired_data.hpp"

using namespace wamd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("wamd_pd_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<ScenePair> make_scenes(const SceneGenConfig& cfg, int n, std::uint64_t seed = 5) {
  std::vector<ScenePair> out;
  for (int i = 0; i < n; ++i) {
    auto s = generate_scene(cfg, Extent{64, 64}, 3, scene_seed(seed, i));
    s.scene_id = "s" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(PairedObject, ValidateInvariants) {
  PairedObject o;
  o.ref_box = Box2d{5, 5, 2, 4};
  o.sensed_box = Box2d{6, 5, 2, 4};
  EXPECT_NO_THROW(o.validate());
  o.unpaired = true;
  EXPECT_THROW(o.validate(), ValidationError);
  o.sensed_box.reset();
  EXPECT_NO_THROW(o.validate());
  o.ref_box.reset();
  EXPECT_THROW(o.validate(), ValidationError);
}

TEST(GenerateScene, SameSeedSameScene) {
  SceneGenConfig cfg;
  const auto a = generate_scene(cfg, Extent{64, 64}, 3, 99);
  const auto b = generate_scene(cfg, Extent{64, 64}, 3, 99);
  EXPECT_EQ(a, b);
  const auto c = generate_scene(cfg, Extent{64, 64}, 3, 100);
  EXPECT_NE(a.ref_image, c.ref_image);
}

TEST(GenerateScene, AlignedConfigGivesZeroTargets) {
  SceneGenConfig cfg;
  cfg.shift.base_shift = 0;
  cfg.shift.edge_gain = 1;
  cfg.shift.noise_sigma = 0;
  for (const auto& s : make_scenes(cfg, 20)) {
    for (const auto& o : s.objects) {
      if (!o.ref_box || !o.sensed_box) continue;
      const auto t = shift_targets(*o.ref_box, *o.sensed_box);
      EXPECT_EQ(t.tx, 0.0);
      EXPECT_EQ(t.ty, 0.0);
    }
  }
}

TEST(GenerateScene, NoUnpairedWhenRateIsZero) {
  SceneGenConfig cfg;
  cfg.shift.unpaired_rate = 0;
  for (const auto& s : make_scenes(cfg, 30)) {
    for (const auto& o : s.objects) {
      EXPECT_TRUE(o.ref_box && o.sensed_box);
      EXPECT_FALSE(o.unpaired);
    }
  }
}

TEST(GenerateScene, ImagesInUnitRange) {
  const auto s = generate_scene(SceneGenConfig{}, Extent{64, 48}, 3, 1);
  EXPECT_EQ(s.ref_image.rows(), 48);
  EXPECT_EQ(s.ref_image.cols(), 64);
  EXPECT_GE(s.ref_image.minCoeff(), 0.0);
  EXPECT_LE(s.ref_image.maxCoeff(), 1.0);
  EXPECT_GE(s.sensed_image.minCoeff(), 0.0);
  EXPECT_LE(s.sensed_image.maxCoeff(), 1.0);
}

TEST(GenerateScene, SensedOffsetsFollowTheField) {
  SceneGenConfig cfg;
  cfg.shift.noise_sigma = 0;
  const auto s = generate_scene(cfg, Extent{64, 64}, 3, 8);
  for (const auto& o : s.objects) {
    if (!o.ref_box || !o.sensed_box) continue;
    const Eigen::Vector2d d = s.shift_field->at(o.ref_box->x, o.ref_box->y);
    // Boxes are snapped to 1/256 px.
    EXPECT_NEAR(o.sensed_box->x - o.ref_box->x, d.x(), 1.0 / 128);
    EXPECT_NEAR(o.sensed_box->y - o.ref_box->y, d.y(), 1.0 / 128);
  }
}

TEST(GenerateScene, RejectsTinyCanvas) {
  EXPECT_THROW(generate_scene(SceneGenConfig{}, Extent{12, 12}, 3, 1), GenerationError);
}

TEST(ShiftImage, ZeroDeltaIsIdentity) {
  const auto s = generate_scene(SceneGenConfig{}, Extent{64, 64}, 3, 4);
  EXPECT_EQ(shift_image(s, 0, 0), s);
}

TEST(ShiftImage, CornerOfSweepGridMovesSensedOnly) {
  const auto s = generate_scene(SceneGenConfig{}, Extent{64, 64}, 3, 4);
  const auto t = shift_image(s, -6, 6);
  EXPECT_EQ(t.ref_image, s.ref_image);
  EXPECT_EQ(t.applied_dx, -6);
  EXPECT_EQ(t.applied_dy, 6);
  for (int r = 6; r < 64; ++r) {
    for (int c = 0; c < 58; ++c) EXPECT_EQ(t.sensed_image(r, c), s.sensed_image(r - 6, c + 6));
  }
  EXPECT_EQ(t.sensed_image(0, 0), 0.0);
}

TEST(ShiftImage, RoundTripRestoresBoxes) {
  const auto s = generate_scene(SceneGenConfig{}, Extent{64, 64}, 3, 12);
  const auto back = shift_image(shift_image(s, 3, -5), -3, 5);
  ASSERT_EQ(back.objects.size(), s.objects.size());
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    EXPECT_EQ(back.objects[i].sensed_box, s.objects[i].sensed_box);
    EXPECT_EQ(back.objects[i].ref_box, s.objects[i].ref_box);
  }
  EXPECT_EQ(back.applied_dx, 0);
  EXPECT_EQ(back.applied_dy, 0);
  // Interior pixels survive the round trip.
  EXPECT_EQ(back.sensed_image.block(5, 3, 54, 58), s.sensed_image.block(5, 3, 54, 58));
}

TEST(ShiftStatistics, AlignedDataInZeroBin) {
  SceneGenConfig cfg;
  cfg.shift.base_shift = 0;
  cfg.shift.noise_sigma = 0;
  const auto st = shift_statistics(make_scenes(cfg, 20));
  ASSERT_FALSE(st.magnitude_hist.empty());
  EXPECT_EQ(st.magnitude_hist[0], st.paired);
  EXPECT_EQ(st.shifted, 0);
  EXPECT_EQ(st.mode_bin(), 0);
}

TEST(ShiftStatistics, ModeNearBaseShift) {
  SceneGenConfig cfg;
  cfg.shift.base_shift = 5;
  cfg.shift.edge_gain = 1;
  const auto scenes = make_scenes(cfg, 60);
  const auto st = shift_statistics(scenes);
  // Independent recount from the boxes.
  std::vector<int> hist(32, 0);
  for (const auto& s : scenes) {
    for (const auto& o : s.objects) {
      if (!o.ref_box || !o.sensed_box) continue;
      const double m = std::hypot(o.sensed_box->x - o.ref_box->x, o.sensed_box->y - o.ref_box->y);
      ++hist[static_cast<std::size_t>(std::lround(m))];
    }
  }
  const int mode = static_cast<int>(std::max_element(hist.begin(), hist.end()) - hist.begin());
  EXPECT_EQ(st.mode_bin(), mode);
  EXPECT_GE(mode, 4);
  EXPECT_LE(mode, 6);
}

TEST(ShiftStatistics, MostObjectsShiftedUnderDefaultConfig) {
  const auto st = shift_statistics(make_scenes(SceneGenConfig{}, 40));
  EXPECT_GT(st.shifted_fraction(), 0.5);
}

TEST(Annotations, SaveLoadRoundTrip) {
  const fs::path dir = temp_dir("roundtrip");
  auto scenes = make_scenes(SceneGenConfig{}, 4);
  save_annotations(scenes, dir / "annotations.json");
  const auto loaded = load_annotations(dir / "annotations.json");
  ASSERT_EQ(loaded.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(loaded[i].scene_id, scenes[i].scene_id);
    EXPECT_EQ(loaded[i].objects, scenes[i].objects);
    EXPECT_EQ(loaded[i].shift_field, scenes[i].shift_field);
  }
}

TEST(Annotations, DatasetRoundTripIsExact) {
  const fs::path dir = temp_dir("dataset");
  SceneGenConfig cfg;
  cfg.depth = true;
  auto scenes = make_scenes(cfg, 3);
  save_dataset(scenes, dir);
  const auto loaded = load_dataset(dir);
  ASSERT_EQ(loaded.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) EXPECT_EQ(loaded[i], scenes[i]);
}

TEST(Annotations, UnpairedWithTwoBoxesRejected) {
  const fs::path dir = temp_dir("bad_unpaired");
  auto scenes = make_scenes(SceneGenConfig{}, 1);
  save_annotations(scenes, dir / "a.json");
  nlohmann::json doc = nlohmann::json::parse(std::ifstream(dir / "a.json"));
  auto& obj = doc["scenes"][0]["objects"][0];
  obj["ref"] = {1, 1, 5, 9};
  obj["sensed"] = {2, 1, 6, 9};
  obj["unpaired"] = true;
  std::ofstream(dir / "a.json") << doc.dump();
  EXPECT_THROW(load_annotations(dir / "a.json"), ParseError);
}

TEST(Annotations, MissingPairIdNamedInError) {
  const fs::path dir = temp_dir("bad_pair_id");
  auto scenes = make_scenes(SceneGenConfig{}, 1);
  save_annotations(scenes, dir / "a.json");
  nlohmann::json doc = nlohmann::json::parse(std::ifstream(dir / "a.json"));
  doc["scenes"][0]["objects"][0].erase("pair_id");
  std::ofstream(dir / "a.json") << doc.dump();
  try {
    load_annotations(dir / "a.json");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("pair_id"), std::string::npos) << msg;
    EXPECT_NE(msg.find("s0"), std::string::npos) << msg;
  }
}

TEST(Annotations, WrongSchemaVersionRejected) {
  const fs::path dir = temp_dir("bad_version");
  save_annotations(make_scenes(SceneGenConfig{}, 1), dir / "a.json");
  nlohmann::json doc = nlohmann::json::parse(std::ifstream(dir / "a.json"));
  doc["schema_version"] = 99;
  std::ofstream(dir / "a.json") << doc.dump();
  EXPECT_THROW(load_annotations(dir / "a.json"), ParseError);
}

TEST(DepthPatch, ValuesInMetersInsideBox) {
  SceneGenConfig cfg;
  cfg.depth = true;
  const auto s = generate_scene(cfg, Extent{64, 64}, 2, 3);
  ASSERT_TRUE(s.has_depth());
  const auto& o = s.objects.front();
  ASSERT_TRUE(o.box3d);
  const Box2d box = o.sensed_box ? *o.sensed_box : *o.ref_box;
  const auto d = depth_patch(s, box);
  ASSERT_FALSE(d.empty());
  std::vector<double> sorted = d;
  std::sort(sorted.begin(), sorted.end());
  if (o.sensed_box) {
    EXPECT_NEAR(sorted[sorted.size() / 2], o.box3d->z, 0.05 * o.box3d->z);
  }
  EXPECT_TRUE(depth_patch(generate_scene(SceneGenConfig{}, Extent{64, 64}, 2, 3), box).empty());
}
