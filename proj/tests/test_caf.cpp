#include <cstring>
#include <random>

#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "wamd/caf.hpp"

using namespace wamd;
using wamd::testing::relative_error;

TEST(ModalityConfidence, HandValues) {
  EXPECT_DOUBLE_EQ(modality_confidence(0.5, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(modality_confidence(1.0, 0.0), 1.0);
  EXPECT_NEAR(modality_confidence(0.9, 0.1), 0.8, 1e-15);
}

TEST(ModalityConfidence, RejectsInvalidProbabilities) {
  EXPECT_THROW(modality_confidence(1.2, -0.2), ValidationError);
  EXPECT_THROW(modality_confidence(0.6, 0.6), ValidationError);
}

TEST(DisagreementWeight, HandValues) {
  EXPECT_DOUBLE_EQ(disagreement_weight(0.3, 0.3), 1.0);
  EXPECT_NEAR(disagreement_weight(0.9, 0.1), 0.2, 1e-15);
  EXPECT_THROW(disagreement_weight(0.5, 1.5), ValidationError);
}

TEST(DisagreementWeight, SameForBothClasses) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng);
    EXPECT_NEAR(disagreement_weight(a, b), 1 - std::abs((1 - a) - (1 - b)), 1e-15);
  }
}

TEST(ReweightFuse, SuppressedSensedFeatureHasNoEffect) {
  // p1_sensed = 0.5 makes w_sensed = 0.
  const auto w = confidence_weights(0.8, 0.5);
  ASSERT_EQ(w.sensed_gain(), 0.0);
  Eigen::MatrixXd ref = Eigen::MatrixXd::Random(3, 5);
  Eigen::MatrixXd sensed = Eigen::MatrixXd::Random(3, 5);
  const Eigen::MatrixXd base = reweight_fuse(ref, sensed, w);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 100);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::MatrixXd noisy = sensed;
    for (Eigen::Index i = 0; i < noisy.size(); ++i) noisy.data()[i] += n(rng);
    const Eigen::MatrixXd out = reweight_fuse(ref, noisy, w);
    EXPECT_EQ(0, std::memcmp(out.data(), base.data(), sizeof(double) * out.size()));
  }
}

TEST(ReweightFuse, SymmetricUnderModalitySwap) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(2, 4), b = Eigen::MatrixXd::Random(2, 4);
  // Equal, agreeing probabilities: both weights 0.6, disagreement weight 1.
  const auto w = confidence_weights(0.8, 0.8);
  const Eigen::MatrixXd ab = reweight_fuse(a, b, w);
  const Eigen::MatrixXd ba = reweight_fuse(b, a, w);
  EXPECT_LT((ab - ba).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ReweightFuse, UnpairedScenarioAttenuatesSensedFivefold) {
  const auto disagree = confidence_weights(0.9, 0.1);
  const auto agree = confidence_weights(0.9, 0.9);
  EXPECT_NEAR(disagree.w_disagree, 0.2, 1e-15);
  EXPECT_NEAR(agree.sensed_gain() / disagree.sensed_gain(), 5.0, 1e-12);
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(1, 3);
  Eigen::MatrixXd sensed = Eigen::MatrixXd::Ones(1, 3);
  const Eigen::MatrixXd fused = reweight_fuse(ref, sensed, disagree);
  EXPECT_NEAR(fused(0, 0), 0.8 * 0.2, 1e-15);
}

TEST(ReweightFuse, ShapeMismatchThrows) {
  Eigen::MatrixXd a(2, 3), b(3, 2);
  a.setZero();
  b.setZero();
  EXPECT_THROW(reweight_fuse(a, b, confidence_weights(0.5, 0.5)), ConfigError);
}

TEST(ReweightFuseBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    double pr = u(rng), ps = u(rng);
    // Stay away from the kinks of |.|.
    if (std::abs(pr - 0.5) < 0.01 || std::abs(ps - 0.5) < 0.01 || std::abs(pr - ps) < 0.01) continue;
    Eigen::MatrixXd ref(2, 3), sen(2, 3), g(2, 3);
    for (auto* m : {&ref, &sen, &g}) {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng);
    }
    auto objective = [&](const Eigen::MatrixXd& r, const Eigen::MatrixXd& s, double p1r, double p1s) {
      const Eigen::MatrixXd f = reweight_fuse(r, s, confidence_weights(p1r, p1s));
      return (f.array() * g.array()).sum();
    };
    const auto grad = reweight_fuse_backward(g, ref, sen, confidence_weights(pr, ps));
    const double h = 1e-7;
    EXPECT_LT(relative_error(grad.d_p1_ref, (objective(ref, sen, pr + h, ps) - objective(ref, sen, pr - h, ps)) / (2 * h)),
              1e-4);
    EXPECT_LT(relative_error(grad.d_p1_sensed,
                             (objective(ref, sen, pr, ps + h) - objective(ref, sen, pr, ps - h)) / (2 * h)),
              1e-4);
    for (Eigen::Index i = 0; i < ref.size(); ++i) {
      Eigen::MatrixXd up = ref, dn = ref;
      up.data()[i] += h;
      dn.data()[i] -= h;
      EXPECT_LT(relative_error(grad.d_ref.data()[i], (objective(up, sen, pr, ps) - objective(dn, sen, pr, ps)) / (2 * h)),
                1e-4);
      up = sen;
      dn = sen;
      up.data()[i] += h;
      dn.data()[i] -= h;
      EXPECT_LT(
          relative_error(grad.d_sensed.data()[i], (objective(ref, up, pr, ps) - objective(ref, dn, pr, ps)) / (2 * h)),
          1e-4);
    }
  }
}
