#include <gtest/gtest.h>

#include <numbers>

#include "ept/data.hpp"
#include "ept/divergences.hpp"
#include "ept/ratio_fit.hpp"
#include "test_support.hpp"

namespace {

using namespace ept;
using ad::Var;

const char* const kNames[] = {"chi2", "kl", "js", "logd"};

TEST(FDivergence, SecondDerivativeExamples) {
  EXPECT_EQ(make_f_divergence("chi2").f_double_prime(3.7), 1.0);
  EXPECT_EQ(make_f_divergence("kl").f_double_prime(2.0), 0.5);
  EXPECT_EQ(make_f_divergence("js").f(1.0), 0.0);
}

TEST(FDivergence, UnknownNameThrows) {
  EXPECT_THROW(make_f_divergence("hellinger"), std::invalid_argument);
  EXPECT_THROW(make_energy("tv"), std::invalid_argument);
}

TEST(FDivergence, NormalisedAndConvexOnGrid) {
  for (const char* name : kNames) {
    const FDivergence d = make_f_divergence(name);
    EXPECT_NEAR(d.f(1.0), 0.0, 1e-15) << name;
    for (double u = 0.01; u <= 100.0; u *= 1.1) EXPECT_GT(d.f_double_prime(u), 0.0) << name << " at " << u;
  }
}

TEST(FDivergence, DerivativesMatchFiniteDifferences) {
  for (const char* name : kNames) {
    const FDivergence d = make_f_divergence(name);
    for (double u = 0.05; u <= 50.0; u *= 1.7) {
      const double h = 1e-6 * u;
      const double fp = (d.f(u + h) - d.f(u - h)) / (2 * h);
      const double fpp = (d.f_prime(u + h) - d.f_prime(u - h)) / (2 * h);
      EXPECT_NEAR(fp, d.f_prime(u), 1e-6 * std::max(1.0, std::abs(fp))) << name << " at " << u;
      EXPECT_NEAR(fpp, d.f_double_prime(u), 1e-5 * std::max(1.0, std::abs(fpp))) << name << " at " << u;
    }
  }
}

TEST(Velocity, Chi2OfHalfSquaredNorm) {
  const auto field = [](Var x) { return 0.5 * ad::row_sqnorm(x); };
  const Tensor v = velocity_from_ratio(make_f_divergence("chi2"), field, Tensor::matrix(1, 2, {1, 2})).velocity;
  EXPECT_EQ(v(0, 0), -1.0);
  EXPECT_EQ(v(0, 1), -2.0);
}

TEST(Velocity, KlOfExponentialAtZero) {
  const auto field = [](Var x) { return ad::reshape(ad::exp(x), Shape{x.value().rows()}); };
  const Tensor v = velocity_from_ratio(make_f_divergence("kl"), field, Tensor::matrix(1, 1, {0.0})).velocity;
  EXPECT_DOUBLE_EQ(v(0, 0), -1.0);
}

TEST(Velocity, FittedChi2VelocityOnGaussianPair) {
  // p = N(0,1), q = N(1,1): r(x) = exp(x - 1/2), so v(0.5) = -r'(0.5) = -1.
  Stream s(0, "gaussian-pair");
  const Tensor p = normal_matrix(20000, 1, s);
  Tensor q = normal_matrix(20000, 1, s);
  for (double& v : q.values()) v += 1.0;
  RatioFitter fitter({ObjectiveKind::Lsdr, 0.0}, init_scalar_net(1, {64, 64, 64}, 0), RmsPropOptions{5e-4}, 1000, 0);
  fitter.fit(p, q, 3000);
  const VelocitySample vs = velocity_from_ratio(make_f_divergence("chi2"), fitter.field(), Tensor::matrix(1, 1, {0.5}));
  EXPECT_NEAR(vs.velocity(0, 0), -1.0, 0.3);
  EXPECT_NEAR(vs.field_values[0], 1.0, 0.15);

  // A ReLU fit has a piecewise-constant gradient, so also compare the
  // velocity averaged over [0, 1] with -(r(1) - r(0)).
  Tensor grid(Shape{101, 1});
  for (std::size_t i = 0; i < 101; ++i) grid[i] = 0.01 * static_cast<double>(i);
  const Tensor v = velocity_from_ratio(make_f_divergence("chi2"), fitter.field(), grid).velocity;
  double avg = 0;
  for (std::size_t i = 0; i < 101; ++i) avg += v[i] / 101.0;
  EXPECT_NEAR(avg, -(std::exp(0.5) - std::exp(-0.5)), 0.25);
}

TEST(Velocity, DifferenceExamples) {
  const auto identity = [](Var x) { return ad::reshape(x, Shape{x.value().rows()}); };
  const Tensor v1 = velocity_from_difference(identity, Tensor::matrix(3, 1, {-2, 0, 5})).velocity;
  for (double v : v1.storage()) EXPECT_EQ(v, -2.0);

  const auto constant = [](Var x) { return 0.0 * ad::row_sqnorm(x) + 3.0; };
  const Tensor v2 = velocity_from_difference(constant, Tensor::matrix(2, 2, {1, 2, 3, 4})).velocity;
  for (double v : v2.storage()) EXPECT_EQ(v, 0.0);

  const auto sq = [](Var x) { return ad::row_sqnorm(x); };
  const Tensor v3 = velocity_from_difference(sq, Tensor::matrix(1, 2, {1, 1})).velocity;
  EXPECT_EQ(v3(0, 0), -4.0);
  EXPECT_EQ(v3(0, 1), -4.0);
}

TEST(Velocity, StationaryWhereGradientVanishes) {
  const auto flat = [](Var x) { return 0.0 * ad::row_sqnorm(x) + 1.3; };
  Stream s(1, "x");
  const Tensor xs = ept::testing::uniform_tensor(Shape{16, 3}, -3, 3, s);
  for (const char* name : kNames) {
    const Tensor v = velocity_from_ratio(make_f_divergence(name), flat, xs).velocity;
    for (double x : v.storage()) EXPECT_EQ(x, 0.0) << name;
  }
}

TEST(Velocity, Chi2IsNegativeInputGradient) {
  const Mlp net = init_scalar_net(2, {32, 32}, 6);
  Stream s(2, "x");
  const Tensor xs = ept::testing::uniform_tensor(Shape{64, 2}, -3, 3, s);
  const FieldEval fe = evaluate_field(NetField{&net}, xs);
  const Tensor v = velocity_from_ratio(make_f_divergence("chi2"), NetField{&net}, xs).velocity;
  for (std::size_t k = 0; k < v.size(); ++k) EXPECT_NEAR(v[k], -fe.gradients[k], 1e-12);
}

TEST(Velocity, ShapeContractForEveryEnergy) {
  const Mlp net = init_scalar_net(3, {16}, 1);
  Stream s(3, "x");
  for (const char* name : {"chi2", "kl", "js", "logd", "l2"}) {
    const Tensor xs = ept::testing::uniform_tensor(Shape{10 + s.below(20), 3}, -3, 3, s);
    const VelocitySample vs = velocity_from_energy(make_energy(name), NetField{&net, OutputLink::Softplus}, xs);
    EXPECT_EQ(vs.velocity.shape(), xs.shape()) << name;
    EXPECT_TRUE(vs.velocity.all_finite()) << name;
  }
}

TEST(Velocity, ClampKeepsKlFiniteForNonPositiveRatio) {
  const auto negative = [](Var x) { return ad::reshape(x, Shape{x.value().rows()}) - 5.0; };
  const Tensor xs = Tensor::matrix(3, 1, {0, 1, 2});
  const VelocitySample vs = velocity_from_ratio(make_f_divergence("kl"), negative, xs);
  EXPECT_EQ(vs.clamped, 3u);
  for (double v : vs.velocity.storage()) EXPECT_DOUBLE_EQ(v, -1.0 / kRatioClampLow);
  const VelocitySample chi = velocity_from_ratio(make_f_divergence("chi2"), negative, xs);
  EXPECT_EQ(chi.clamped, 0u);
}

}  // namespace
