#include <random>

#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "wamd/roi_align.hpp"

using namespace wamd;
using wamd::testing::relative_error;

namespace {

FeatureMapd random_map(int c, int h, int w, int stride, std::uint64_t seed) {
  FeatureMapd f(c, h, w, stride);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  for (Eigen::Index i = 0; i < f.values.size(); ++i) f.values.data()[i] = n(rng);
  return f;
}

}  // namespace

TEST(PoolRegion, ConstantMapGivesConstant) {
  FeatureMapd f(2, 10, 12, 4);
  f.values.row(0).setConstant(0.7);
  f.values.row(1).setConstant(-2.5);
  const auto p = pool_region(f, Box2d{20, 18, 13, 17});
  EXPECT_FALSE(p.outside);
  for (int k = 0; k < p.feature.height * p.feature.width; ++k) {
    EXPECT_NEAR(p.feature.values(0, k), 0.7, 1e-12);
    EXPECT_NEAR(p.feature.values(1, k), -2.5, 1e-12);
  }
}

TEST(PoolRegion, FullMapAtOwnResolutionIsIdentity) {
  const auto f = random_map(3, 6, 8, 2, 1);
  const Box2d full = Box2d::from_corners(0, 0, 16, 12);
  const auto p = pool_region(f, full, PoolSize{6, 8, 1});
  EXPECT_LT((p.feature.values - f.values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PoolRegion, OutsideRoiIsFlaggedAndZero) {
  const auto f = random_map(1, 4, 4, 1, 2);
  const auto p = pool_region(f, Box2d{40, 40, 3, 3});
  EXPECT_TRUE(p.outside);
  EXPECT_EQ(p.feature.values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(PoolRegion, RejectsInvalidRoi) {
  const auto f = random_map(1, 4, 4, 1, 2);
  EXPECT_THROW(pool_region(f, Box2d{2, 2, 0, 3}), ValidationError);
}

namespace {

// Scalar objective sum(G .* pool(f, roi)) for a fixed random G.
double objective(const FeatureMapd& f, const Box2d& roi, const PoolSize& size, const RowMatrix<double>& g) {
  return (pool_region(f, roi, size).feature.values.array() * g.array()).sum();
}

}  // namespace

TEST(PoolRegionBackward, FeatureGradientMatchesFiniteDifferences) {
  const PoolSize size{3, 3, 2};
  auto f = random_map(2, 7, 9, 2, 3);
  const Box2d roi{8.3, 6.1, 9.7, 7.9};
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  RowMatrix<double> g(2, 9);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n(rng);
  FeatureMapd grad = f.zeros_like();
  pool_region_backward(f, roi, size, g, &grad);
  for (Eigen::Index i = 0; i < f.values.size(); ++i) {
    const double x0 = f.values.data()[i];
    const double h = 1e-6;
    f.values.data()[i] = x0 + h;
    const double up = objective(f, roi, size, g);
    f.values.data()[i] = x0 - h;
    const double dn = objective(f, roi, size, g);
    f.values.data()[i] = x0;
    EXPECT_LT(relative_error(grad.values.data()[i], (up - dn) / (2 * h)), 1e-4) << "index " << i;
  }
}

TEST(PoolRegionBackward, RoiGradientMatchesFiniteDifferences) {
  const PoolSize size{4, 3, 2};
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_map(2, 8, 8, 4, 100 + trial);
    const Box2d roi{6 + 20 * u(rng), 6 + 20 * u(rng), 4 + 10 * u(rng), 4 + 10 * u(rng)};
    RowMatrix<double> g(2, size.height * size.width);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n(rng);
    const Eigen::Vector4d analytic = pool_region_backward<double>(f, roi, size, g, nullptr);
    for (int k = 0; k < 4; ++k) {
      auto eval = [&](double delta) {
        Box2d r = roi;
        double* p[4] = {&r.x, &r.y, &r.w, &r.h};
        *p[k] += delta;
        return objective(f, r, size, g);
      };
      const double h = 1e-6;
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      EXPECT_LT(relative_error(analytic(k), numeric), 1e-4) << "trial " << trial << " coord " << k;
    }
  }
}
