#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "wamd/box3d.hpp"

using namespace wamd;
using wamd::testing::relative_error;

namespace {

const DimensionTable kDims{{"person", {0.5, 0.4, 1.7}}};

Box3D random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(-5, 5), dim(0.2, 3), yaw(-1.5, 1.5);
  Box3D b;
  b.x = pos(rng);
  b.y = pos(rng);
  b.z = 5 + pos(rng);
  b.l = dim(rng);
  b.w = dim(rng);
  b.h = dim(rng);
  b.theta = yaw(rng);
  return b;
}

}  // namespace

TEST(InitBox3d, PrincipalPointGivesZeroLateralOffset) {
  const CameraIntrinsics k{500, 320, 240};
  for (double z : {0.5, 2.0, 17.0}) {
    const std::vector<double> patch(9, z);
    const Box3D b = init_box3d(Box2d{320, 240, 40, 80}, patch, k, kDims, "person");
    EXPECT_EQ(b.x, 0.0);
    EXPECT_EQ(b.y, 0.0);
    EXPECT_EQ(b.z, z);
  }
}

TEST(InitBox3d, HandSubstitution) {
  const CameraIntrinsics k{500, 320, 240};
  const std::vector<double> patch(25, 2.0);
  const Box3D b = init_box3d(Box2d{420, 290, 40, 80}, patch, k, kDims, "person");
  EXPECT_NEAR(b.x, 0.4, 1e-12);
  EXPECT_NEAR(b.y, 0.2, 1e-12);
  EXPECT_NEAR(b.z, 2.0, 1e-12);
  EXPECT_EQ(b.l, 0.5);
  EXPECT_EQ(b.w, 0.4);
  EXPECT_EQ(b.h, 1.7);
  EXPECT_EQ(b.theta, 0.0);
}

TEST(InitBox3d, MedianIgnoresOutlier) {
  const CameraIntrinsics k{500, 320, 240};
  std::vector<double> patch{2.0, 2.1, 1.9, 2.0, 2.05, 1.95, 2.0, 2.02, 2.0};
  const double clean = init_box3d(Box2d{320, 240, 4, 4}, patch, k, kDims, "person").z;
  patch[4] = 900.0;
  EXPECT_EQ(init_box3d(Box2d{320, 240, 4, 4}, patch, k, kDims, "person").z, clean);
  EXPECT_EQ(clean, 2.0);
}

TEST(InitBox3d, Errors) {
  const CameraIntrinsics k{500, 320, 240};
  const std::vector<double> none{0.0, -1.0, std::numeric_limits<double>::quiet_NaN()};
  EXPECT_THROW(init_box3d(Box2d{1, 1, 1, 1}, none, k, kDims, "person"), InitializationError);
  const std::vector<double> ok{1.0};
  EXPECT_THROW(init_box3d(Box2d{1, 1, 1, 1}, ok, k, kDims, "car"), ConfigError);
  EXPECT_THROW(init_box3d(Box2d{1, 1, 1, 1}, ok, CameraIntrinsics{0, 0, 0}, kDims, "person"), ValidationError);
}

TEST(Encode3d, IdentityGivesZeroTargets) {
  std::mt19937_64 rng(1);
  const Box3D b = random_box(rng);
  EXPECT_EQ(encode_3d_targets(b, b), Box3DTargets::Zero());
}

TEST(Encode3d, DoubledDimensionsGiveLogTwo) {
  Box3D init;
  init.l = 0.5;
  init.w = 0.4;
  init.h = 1.7;
  Box3D gt = init;
  gt.l *= 2;
  gt.w *= 2;
  gt.h *= 2;
  const auto v = encode_3d_targets(init, gt);
  EXPECT_NEAR(v(3), std::numbers::ln2, 1e-15);
  EXPECT_NEAR(v(4), std::numbers::ln2, 1e-15);
  EXPECT_NEAR(v(5), std::numbers::ln2, 1e-15);
}

TEST(Encode3d, RoundTripsRandomBoxes) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Box3D init = random_box(rng), gt = random_box(rng);
    const Box3D back = decode_3d(init, encode_3d_targets(init, gt));
    const auto a = back.vector(), b = gt.vector();
    for (int k = 0; k < 7; ++k) EXPECT_LE(std::abs(a(k) - b(k)), 1e-9 * std::max(1.0, std::abs(b(k))));
  }
}

TEST(Encode3d, RejectsDegenerateBoxes) {
  Box3D bad;
  bad.l = 0;
  EXPECT_THROW(encode_3d_targets(bad, Box3D{}), ValidationError);
  EXPECT_THROW(encode_3d_targets(Box3D{}, bad), ValidationError);
}

TEST(Loss3d, IndicatorGateAndHandValue) {
  Box3DTargets v = Box3DTargets::Random();
  Box3DTargets vs = Box3DTargets::Random();
  EXPECT_EQ(loss_3d(0, v, vs), 0.0);
  EXPECT_EQ(loss_3d(1, v, v), 0.0);
  Box3DTargets one = Box3DTargets::Zero();
  one(2) = 0.5;
  EXPECT_DOUBLE_EQ(loss_3d(1, Box3DTargets::Zero().eval(), one), 0.125);
  EXPECT_EQ(loss_3d_grad(0, v, vs), Box3DTargets::Zero());
}

TEST(Loss3d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1.5);
  for (int trial = 0; trial < 50; ++trial) {
    Box3DTargets v, vs;
    for (int k = 0; k < 7; ++k) {
      v(k) = n(rng);
      vs(k) = n(rng);
    }
    const Box3DTargets g = loss_3d_grad(1, v, vs);
    for (int k = 0; k < 7; ++k) {
      auto f = [&](double x) {
        Box3DTargets w = v;
        w(k) = x;
        return loss_3d(1, w, vs);
      };
      EXPECT_LT(relative_error(g(k), wamd::testing::central_difference(f, v(k))), 1e-4);
    }
  }
}

TEST(WrapHalfPi, FoldsIntoRange) {
  EXPECT_NEAR(wrap_half_pi(std::numbers::pi), 0.0, 1e-12);
  EXPECT_NEAR(wrap_half_pi(0.3 + std::numbers::pi), 0.3, 1e-12);
  EXPECT_NEAR(wrap_half_pi(-0.3 - 2 * std::numbers::pi), -0.3, 1e-12);
}

TEST(Iou3d, IdentityDisjointAndAxisAligned) {
  Box3D a;
  a.l = 2;
  a.w = 2;
  a.h = 2;
  EXPECT_NEAR(iou3d(a, a), 1.0, 1e-12);
  Box3D far = a;
  far.x = 10;
  EXPECT_EQ(iou3d(a, far), 0.0);
  Box3D half = a;
  half.x = 1;  // half the volume overlaps: 4 / (8 + 8 - 4)
  EXPECT_NEAR(iou3d(a, half), 1.0 / 3.0, 1e-12);
  Box3D rotated = a;
  rotated.theta = std::numbers::pi / 2;  // a square footprint rotated onto itself
  EXPECT_NEAR(iou3d(a, rotated), 1.0, 1e-12);
}

TEST(Iou3d, MatchesMonteCarlo) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> off(-0.8, 0.8), yaw(-1.5, 1.5), dim(0.8, 2.0);
  auto inside = [](const Box3D& b, double x, double y, double z) {
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double dx = x - b.x, dz = z - b.z;
    const double along = c * dx + s * dz, across = -s * dx + c * dz;
    return std::abs(along) <= b.l / 2 && std::abs(across) <= b.w / 2 && std::abs(y - b.y) <= b.h / 2;
  };
  for (int trial = 0; trial < 10; ++trial) {
    Box3D a, b;
    a.l = dim(rng), a.w = dim(rng), a.h = dim(rng), a.theta = yaw(rng);
    b = a;
    b.x = off(rng), b.y = off(rng), b.z = off(rng), b.theta = yaw(rng), b.l = dim(rng), b.w = dim(rng);
    std::uniform_real_distribution<double> u(-2.5, 2.5);
    const int n = 400000;
    int ia = 0, ib = 0, both = 0;
    for (int i = 0; i < n; ++i) {
      const double x = u(rng), y = u(rng), z = u(rng);
      const bool in_a = inside(a, x, y, z), in_b = inside(b, x, y, z);
      ia += in_a;
      ib += in_b;
      both += in_a && in_b;
    }
    const double mc = double(both) / (ia + ib - both);
    EXPECT_NEAR(iou3d(a, b), mc, 0.01) << "trial " << trial;
  }
}
