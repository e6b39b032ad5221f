#include "snf/energy.hpp"
#include "snf/rng.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace snf;
using snf::testing::fd_gradient;
using snf::testing::max_rel_err;

namespace {

Vector v2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

TEST(Gaussian, ClosedFormValues) {
  const IsotropicGaussian g(2);
  EXPECT_EQ(eval_energy(g, v2(0, 0)), 0.0);
  EXPECT_EQ(eval_energy(g, v2(1, 1)), 1.0);
  EXPECT_EQ(eval_gradient(g, v2(2, -3)), v2(2, -3));
}

TEST(Gaussian, ShiftedAndScaled) {
  const IsotropicGaussian g(v2(1, -1), 2.0);
  EXPECT_DOUBLE_EQ(g.value(v2(3, -1)), 0.5);
  EXPECT_TRUE(g.gradient(v2(3, 1)).isApprox(v2(0.5, 0.5)));
}

TEST(DoubleWell, ValueBySubstitution) {
  const DoubleWell dw(2, {1, 6, 1, 1});
  const double x1 = std::sqrt(3.0), x2 = 0.0;
  // 1/4 x^4 - 3 x^2 + x + x2^2 / 2 with x^2 = 3
  const double expected = 9.0 / 4.0 - 9.0 + std::sqrt(3.0) + 0.5 * x2 * x2;
  EXPECT_NEAR(eval_energy(dw, v2(x1, x2)), expected, 1e-14);
}

TEST(DoubleWell, EvenInSecondCoordinate) {
  const DoubleWell dw;
  RngStream rng(4);
  for (int i = 0; i < 50; ++i) {
    const double a = 3 * rng.normal(), b = 3 * rng.normal();
    EXPECT_EQ(dw.value(v2(a, b)), dw.value(v2(a, -b)));
    EXPECT_EQ(dw.gradient(v2(a, 0.0))[1], 0.0);
  }
}

TEST(DoubleWell, HigherDimensionsAreGaussianTail) {
  const DoubleWell dw(4, {1, 6, 1, 2});
  Vector y(4);
  y << 0.5, 1, 2, 3;
  EXPECT_DOUBLE_EQ(dw.value(y), dw.axis_energy(0.5) + 0.5 * 2 * (1 + 4 + 9));
}

TEST(Interpolate, Endpoints) {
  auto prior = std::make_shared<IsotropicGaussian>(2);
  auto target = std::make_shared<DoubleWell>();
  RngStream rng(5);
  const auto p0 = interpolate(prior, target, 0.0);
  const auto p1 = interpolate(prior, target, 1.0);
  for (int i = 0; i < 20; ++i) {
    const Vector y = snf::testing::random_vector(2, rng, 2.0);
    EXPECT_EQ(p0->value(y), prior->value(y));
    EXPECT_EQ(p1->value(y), target->value(y));
    EXPECT_EQ(p0->gradient(y), prior->gradient(y));
    EXPECT_EQ(p1->gradient(y), target->gradient(y));
  }
}

TEST(Interpolate, QuarterMix) {
  auto prior = std::make_shared<IsotropicGaussian>(2);
  auto target = std::make_shared<DoubleWell>();
  const Vector y = v2(1, 1);
  const double uz = 1.0;                     // (1 + 1) / 2
  const double ux = 0.25 - 3.0 + 1.0 + 0.5;  // direct arithmetic
  EXPECT_NEAR(interpolate(prior, target, 0.25)->value(y), 0.75 * uz + 0.25 * ux, 1e-14);
}

TEST(Interpolate, GradientOfHalfMixAveragesGaussians) {
  auto a = std::make_shared<IsotropicGaussian>(v2(1, 0), 1.0);
  auto b = std::make_shared<IsotropicGaussian>(v2(-1, 2), 1.0);
  const Vector y = v2(0.3, -0.7);
  EXPECT_TRUE(interpolate(a, b, 0.5)->gradient(y).isApprox(0.5 * (a->gradient(y) + b->gradient(y))));
}

TEST(Interpolate, LinearInLambda) {
  auto prior = std::make_shared<IsotropicGaussian>(2);
  auto target = std::make_shared<DoubleWell>();
  RngStream rng(6);
  for (int i = 0; i < 20; ++i) {
    const Vector y = snf::testing::random_vector(2, rng, 2.0);
    const double e1 = interpolate(prior, target, 0.2)->value(y);
    const double e2 = interpolate(prior, target, 0.5)->value(y);
    const double e3 = interpolate(prior, target, 0.8)->value(y);
    EXPECT_NEAR(e2 - e1, e3 - e2, 1e-12 * (1 + std::abs(e3)));
  }
}

TEST(Interpolate, RejectsBadLambdaAndDims) {
  auto prior = std::make_shared<IsotropicGaussian>(2);
  auto target = std::make_shared<DoubleWell>();
  EXPECT_THROW(interpolate(prior, target, -0.1), std::invalid_argument);
  EXPECT_THROW(interpolate(prior, target, 1.5), std::invalid_argument);
  EXPECT_THROW(interpolate(std::make_shared<IsotropicGaussian>(3), target, 0.5),
               std::invalid_argument);
}

TEST(Energy, DimensionMismatchThrows) {
  const IsotropicGaussian g(2);
  EXPECT_THROW(g.value(Vector::Zero(3)), std::invalid_argument);
  EXPECT_THROW(g.gradient(Vector::Zero(1)), std::invalid_argument);
  EXPECT_THROW(IsotropicGaussian(0), std::invalid_argument);
  EXPECT_THROW(IsotropicGaussian(2, 0.0), std::invalid_argument);
  EXPECT_THROW(DoubleWell(0), std::invalid_argument);
}

TEST(Energy, GradientsMatchFiniteDifferences) {
  auto prior = std::make_shared<IsotropicGaussian>(v2(0.3, -0.2), 1.7);
  auto target = std::make_shared<DoubleWell>(2, DoubleWellParams{1.3, 5, 0.7, 2});
  const std::vector<EnergyModel> models = {prior, target, interpolate(prior, target, 0.37)};
  RngStream rng(7);
  for (const auto& m : models) {
    for (int i = 0; i < 50; ++i) {
      const Vector y = snf::testing::random_vector(2, rng, 2.0);
      const Vector fd = fd_gradient([&](const Vector& p) { return m->value(p); }, y);
      EXPECT_LE(max_rel_err(m->gradient(y), fd, 1e-6), 1e-5) << m->kind();
    }
  }
}

TEST(Energy, HessianVectorMatchesGradientDifferences) {
  auto prior = std::make_shared<IsotropicGaussian>(3);
  auto target = std::make_shared<DoubleWell>(3);
  const auto mix = interpolate(prior, target, 0.6);
  RngStream rng(8);
  for (int i = 0; i < 30; ++i) {
    const Vector y = snf::testing::random_vector(3, rng, 2.0);
    const Vector v = snf::testing::random_vector(3, rng);
    const double h = 1e-6;
    const Vector fd = (mix->gradient(y + h * v) - mix->gradient(y - h * v)) / (2 * h);
    EXPECT_LE(max_rel_err(mix->hessian_vector(y, v), fd, 1e-6), 1e-6);
  }
}

TEST(Energy, BatchHelpersMatchPointwise) {
  const DoubleWell dw;
  Matrix ys(2, 3);
  ys << 0, 1, -1, 2, 0.5, 0;
  const Vector e = eval_energies(dw, ys);
  const Matrix g = eval_gradients(dw, ys);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(e[k], dw.value(ys.col(k)));
    EXPECT_EQ(g.col(k), dw.gradient(ys.col(k)));
  }
}

}  // namespace
