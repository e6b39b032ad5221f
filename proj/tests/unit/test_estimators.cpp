#include "snf/estimators.hpp"
#include "snf/image.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace snf;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Matrix normal_points(int d, Eigen::Index n, RngStream& rng, double mean = 0.0, double sd = 1.0) {
  Matrix out(d, n);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = mean + sd * rng.normal();
  return out;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// ---------------------------------------------------------------- importance sampling

TEST(Importance, UniformWeightsGiveSampleMean) {
  RngStream rng(1);
  const Vector o = snf::testing::random_vector(1000, rng);
  const Estimate e = importance_expectation(Vector::Constant(1000, -3.7), o);
  EXPECT_NEAR(e.value, o.mean(), 1e-14);
  // delta method reduces to sd / sqrt(n) up to the (n-1)/n factor
  const double sd = std::sqrt(snf::testing::sample_variance(o) * 999.0 / 1000.0);
  EXPECT_NEAR(e.std_error, sd / std::sqrt(1000.0), 1e-12);
}

TEST(Importance, TwoPointsByHand) {
  Vector lw(2), o(2);
  lw << 0.0, std::log(3.0);
  o << 0.0, 1.0;
  EXPECT_NEAR(importance_expectation(lw, o).value, 0.75, 1e-15);
}

TEST(Importance, ConstantObservableIsExactlyOne) {
  RngStream rng(2);
  const Vector lw = snf::testing::random_vector(5000, rng, 4.0);
  EXPECT_EQ(importance_expectation(lw, Vector::Ones(5000)).value, 1.0);
}

TEST(Importance, InvariantUnderLogWeightShift) {
  RngStream rng(3);
  const Vector lw = snf::testing::random_vector(500, rng, 2.0);
  const Vector o = snf::testing::random_vector(500, rng);
  const Estimate a = importance_expectation(lw, o);
  const Estimate b = importance_expectation((lw.array() + 812.5).matrix(), o);
  EXPECT_NEAR(a.value, b.value, 1e-12);
  EXPECT_NEAR(a.std_error, b.std_error, 1e-12);
  // huge log weights must not overflow
  const Estimate c = importance_expectation((lw.array() + 1e5).matrix(), o);
  EXPECT_NEAR(a.value, c.value, 1e-10);
}

TEST(Importance, NarrowGaussianSecondMoment) {
  // proposal N(0, 1), target N(0, 1/4): log w = -2 x^2 + x^2 / 2
  RngStream rng(4);
  const Eigen::Index n = 100000;
  const WeightedEnsemble ens(normal_points(1, n, rng), Vector::Zero(n));
  WeightedEnsemble w = ens;
  for (Eigen::Index k = 0; k < n; ++k) w.log_weights[k] = -1.5 * ens.points(0, k) * ens.points(0, k);
  const Estimate e = importance_expectation(w, [](ConstVectorRef x) { return x[0] * x[0]; });
  EXPECT_LE(std::abs(e.value - 0.25), 3 * e.std_error);
  EXPECT_LT(e.std_error, 0.01);
}

TEST(Importance, Errors) {
  EXPECT_THROW(importance_expectation(Vector::Constant(3, -kInf), Vector::Ones(3)), std::invalid_argument);
  EXPECT_THROW(importance_expectation(Vector(), Vector()), std::invalid_argument);
  EXPECT_THROW(importance_expectation(Vector::Zero(3), Vector::Ones(2)), std::invalid_argument);
  Vector lw = Vector::Zero(3);
  lw[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(importance_expectation(lw, Vector::Ones(3)), std::invalid_argument);
  EXPECT_THROW(WeightedEnsemble(Matrix::Zero(2, 3), Vector::Zero(2)), std::invalid_argument);
}

TEST(Importance, EffectiveSampleSize) {
  EXPECT_NEAR(effective_sample_size(Vector::Zero(40)), 40.0, 1e-12);
  Vector lw = Vector::Constant(10, -kInf);
  lw[3] = 0.0;
  EXPECT_NEAR(effective_sample_size(lw), 1.0, 1e-15);
  EXPECT_NEAR(log_sum_exp(Vector::Constant(4, 1000.0)), 1000.0 + std::log(4.0), 1e-12);
}

// ---------------------------------------------------------------- neural MCMC

TEST(NeuralMcmc, EqualWeightsReproduceProposals) {
  RngStream rng(5);
  const Matrix pts = normal_points(2, 300, rng);
  const NeuralMcmcChain c = neural_mcmc_resample(WeightedEnsemble(pts, Vector::Constant(300, 0.7)), rng);
  EXPECT_EQ(c.states, pts);
  EXPECT_EQ(c.accepted, 299);
}

TEST(NeuralMcmc, MuchHeavierProposalAlwaysAccepted) {
  Matrix pts(1, 2);
  pts << 0.0, 1.0;
  Vector lw(2);
  lw << 0.0, std::log(1e9);
  for (std::uint64_t s = 0; s < 100; ++s) {
    RngStream rng(6, s);
    const NeuralMcmcChain c = neural_mcmc_resample(WeightedEnsemble(pts, lw), rng);
    EXPECT_EQ(c.source[1], 1);
  }
}

TEST(NeuralMcmc, LighterProposalAcceptedAtWeightRatio) {
  Matrix pts(1, 2);
  pts << 0.0, 1.0;
  Vector lw(2);
  lw << 0.0, std::log(0.3);
  int acc = 0;
  const int trials = 20000;
  for (int s = 0; s < trials; ++s) {
    RngStream rng(7, static_cast<std::uint64_t>(s));
    acc += neural_mcmc_resample(WeightedEnsemble(pts, lw), rng).source[1] == 1;
  }
  EXPECT_LE(std::abs(acc / double(trials) - 0.3), 4 * std::sqrt(0.3 * 0.7 / trials));
}

TEST(NeuralMcmc, ChainReachesTargetVariance) {
  RngStream rng(8);
  const Eigen::Index n = 100000;
  const Matrix pts = normal_points(1, n, rng);
  const Vector lw = (-1.5 * pts.row(0).array().square()).matrix().transpose();
  const NeuralMcmcChain c = neural_mcmc_resample(WeightedEnsemble(pts, lw), rng);
  EXPECT_LE(std::abs(snf::testing::sample_variance(c.states.row(0).transpose()) - 0.25), 0.02);
}

TEST(NeuralMcmc, AgreesWithImportanceSampling) {
  // a deterministic affine flow x = 0.8 z + 0.3 against a standard normal target
  RngStream rng(9);
  const Eigen::Index n = 50000;
  const Matrix z = normal_points(1, n, rng);
  const Matrix x = (0.8 * z.array() + 0.3).matrix();
  Vector lw(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    lw[k] = -0.5 * x(0, k) * x(0, k) + 0.5 * z(0, k) * z(0, k) + std::log(0.8);
  }
  const WeightedEnsemble ens(x, lw);
  const auto obs = [](ConstVectorRef p) { return p[0] * p[0]; };
  const Estimate is = importance_expectation(ens, obs);
  const NeuralMcmcChain c = neural_mcmc_resample(ens, rng);
  const Estimate mc = batch_means(c.states.row(0).array().square().matrix().transpose(), 50);
  EXPECT_LE(std::abs(is.value - mc.value), 3 * std::hypot(is.std_error, mc.std_error));
  EXPECT_LE(std::abs(is.value - 1.0), 3 * is.std_error);
}

TEST(NeuralMcmc, ZeroWeightStartIsLeftImmediately) {
  Matrix pts(1, 3);
  pts << 5.0, 1.0, 2.0;
  Vector lw(3);
  lw << -kInf, 0.0, 0.0;
  RngStream rng(10);
  const NeuralMcmcChain c = neural_mcmc_resample(WeightedEnsemble(pts, lw), rng);
  EXPECT_EQ(c.source[1], 1);
}

TEST(BatchMeans, IidSeriesStdError) {
  RngStream rng(11);
  const Vector s = snf::testing::random_vector(100000, rng);
  const Estimate e = batch_means(s, 50);
  EXPECT_NEAR(e.std_error, 1.0 / std::sqrt(100000.0), 0.3 / std::sqrt(100000.0));
  EXPECT_THROW(batch_means(Vector::Zero(1)), std::invalid_argument);
}

// ---------------------------------------------------------------- free-energy profile

// Exact profile of a standard normal restricted to [lo, hi], before shifting.
Vector normal_bin_free_energy(const FreeEnergyProfile& p) {
  const Eigen::Index nb = p.bins();
  const double total = normal_cdf(p.edges[nb]) - normal_cdf(p.edges[0]);
  Vector f(nb);
  for (Eigen::Index b = 0; b < nb; ++b) {
    f[b] = -std::log((normal_cdf(p.edges[b + 1]) - normal_cdf(p.edges[b])) / total);
  }
  return f;
}

// Each bin agrees with the exact profile up to one common offset.
void expect_profile_matches_normal(const FreeEnergyProfile& p, double k_sigma) {
  const Vector exact = normal_bin_free_energy(p);
  double num = 0.0, den = 0.0;
  for (Eigen::Index b = 0; b < p.bins(); ++b) {
    ASSERT_TRUE(p.populated[static_cast<std::size_t>(b)]) << b;
    const double iv = 1.0 / (p.std_error[b] * p.std_error[b]);
    num += iv * (p.free_energy[b] - exact[b]);
    den += iv;
  }
  const double offset = num / den;
  for (Eigen::Index b = 0; b < p.bins(); ++b) {
    EXPECT_LE(std::abs(p.free_energy[b] - exact[b] - offset), k_sigma * p.std_error[b]) << "bin " << b;
  }
}

TEST(Profile, UniformWeightStandardNormal) {
  RngStream rng(12);
  const Eigen::Index n = 100000;
  const WeightedEnsemble ens(normal_points(2, n, rng), Vector::Zero(n));
  const FreeEnergyProfile p = free_energy_profile(ens, 0, RngStream(13), {20, -2.0, 2.0, 200, 1});
  EXPECT_EQ(p.free_energy.minCoeff(), 0.0);
  EXPECT_NEAR(p.edges[0], -2.0, 1e-15);
  EXPECT_NEAR(p.edges[20], 2.0, 1e-15);
  EXPECT_NEAR(p.centers[0], -1.9, 1e-15);
  expect_profile_matches_normal(p, 3.0);
}

TEST(Profile, ReweightedBiasedEnsembleRecoversTarget) {
  // proposal N(0.5, 1.2^2), target N(0, 1)
  RngStream rng(14);
  const Eigen::Index n = 200000;
  const Matrix pts = normal_points(1, n, rng, 0.5, 1.2);
  Vector lw(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double x = pts(0, k), t = (x - 0.5) / 1.2;
    lw[k] = -0.5 * x * x + 0.5 * t * t;
  }
  const FreeEnergyProfile p =
      free_energy_profile(WeightedEnsemble(pts, lw), 0, RngStream(15), {20, -2.0, 2.0, 200, 2});
  expect_profile_matches_normal(p, 3.0);
}

TEST(Profile, SingleWeightedSampleGivesOneBin) {
  RngStream rng(16);
  Matrix pts = normal_points(1, 50, rng, 0.0, 0.5);
  Vector lw = Vector::Constant(50, -kInf);
  pts(0, 17) = 0.33;
  lw[17] = 0.0;
  const FreeEnergyProfile p = free_energy_profile(WeightedEnsemble(pts, lw), 0, RngStream(17), {10, -1, 1, 50, 1});
  int finite = 0;
  for (Eigen::Index b = 0; b < p.bins(); ++b) {
    if (std::isnan(p.free_energy[b])) {
      EXPECT_FALSE(p.populated[static_cast<std::size_t>(b)]);
      continue;
    }
    ++finite;
    EXPECT_EQ(b, 6);
    EXPECT_EQ(p.free_energy[b], 0.0);
  }
  EXPECT_EQ(finite, 1);
}

TEST(Profile, ResultIndependentOfWorkers) {
  RngStream rng(18);
  const WeightedEnsemble ens(normal_points(2, 5000, rng), snf::testing::random_vector(5000, rng, 0.3));
  const FreeEnergyProfile a = free_energy_profile(ens, 1, RngStream(19), {30, -2, 2, 100, 1});
  const FreeEnergyProfile b = free_energy_profile(ens, 1, RngStream(19), {30, -2, 2, 100, 3});
  for (Eigen::Index i = 0; i < 30; ++i) {
    EXPECT_TRUE(a.free_energy[i] == b.free_energy[i] || (std::isnan(a.free_energy[i]) && std::isnan(b.free_energy[i])));
    EXPECT_TRUE(a.std_error[i] == b.std_error[i] || (std::isnan(a.std_error[i]) && std::isnan(b.std_error[i])));
  }
}

TEST(Profile, Errors) {
  const WeightedEnsemble ens(Matrix::Zero(2, 4), Vector::Zero(4));
  EXPECT_THROW(free_energy_profile(ens, 2, RngStream(1)), std::invalid_argument);
  EXPECT_THROW(free_energy_profile(ens, 0, RngStream(1), {10, 1.0, 1.0, 10, 1}), std::invalid_argument);
  EXPECT_THROW(free_energy_profile(ens, 0, RngStream(1), {0, -1.0, 1.0, 10, 1}), std::invalid_argument);
}

// ---------------------------------------------------------------- histogram KL

class Flat2D final : public Energy {
 public:
  std::string_view kind() const override { return "flat2d"; }
  int dim() const override { return 2; }

 protected:
  double do_value(ConstVectorRef) const override { return 0.0; }
  Vector do_gradient(ConstVectorRef) const override { return Vector::Zero(2); }
  Vector do_hessian_vector(ConstVectorRef, ConstVectorRef) const override { return Vector::Zero(2); }
};

TEST(HistogramKl, AllSamplesInOneCellByHand) {
  // 10 samples in one of 4 cells, 0.5 pseudo-counts: p = (10.5, .5, .5, .5) / 12, q = 1/4
  Matrix s = Matrix::Constant(2, 10, -2.0);
  const HistogramKL h = histogram_kl(s, Flat2D{}, {2, -2.5, 2.5});
  const double expect = 0.875 * std::log(3.5) + 0.125 * std::log(1.0 / 6.0);
  EXPECT_NEAR(h.kl, expect, 1e-14);
  EXPECT_EQ(h.n_samples, 10);
  EXPECT_EQ(h.bins, 2);
}

TEST(HistogramKl, ProportionalCountsGiveZero) {
  const Flat2D flat;
  const HistogramGrid g{4, -1, 1};
  EXPECT_NEAR(histogram_kl_from_counts(Vector::Constant(16, 7.0), grid_cell_probabilities(flat, g)), 0.0, 1e-15);
  const Vector q = grid_cell_probabilities(DoubleWell{}, {8, -2.5, 2.5});
  EXPECT_NEAR(q.sum(), 1.0, 1e-12);
  EXPECT_NEAR(histogram_kl_from_counts(1000 * q, q, 0.0), 0.0, 1e-12);
}

TEST(HistogramKl, CellIndexConvention) {
  Matrix s(2, 1);
  s << 1.9, -1.9;  // axis 0 high, axis 1 low
  const Vector c = grid_counts(s, {2, -2, 2});
  EXPECT_EQ(c[2], 1.0);
  EXPECT_EQ(c.sum(), 1.0);
  Vector y(2);
  y << 1.0, -1.0;
  const Vector q = grid_cell_probabilities(IsotropicGaussian(y, 0.3), {2, -2, 2});
  EXPECT_EQ(q.maxCoeff(), q[2]);
}

TEST(HistogramKl, NonNegative) {
  RngStream rng(20);
  const Flat2D flat;
  for (int t = 0; t < 50; ++t) {
    const Matrix s = normal_points(2, 200, rng);
    EXPECT_GE(histogram_kl(s, flat, {10, -2, 2}).kl, -1e-12);
  }
}

TEST(HistogramKl, ExactSamplesGiveSmallKl) {
  std::vector<double> px = {255, 40, 120, 0, 200, 90, 30, 160, 255};
  const auto img = load_image_energy(GrayImage{3, 3, px});
  RngStream rng(21);
  const Matrix s = img->sample(1000000, rng);
  const HistogramKL h = histogram_kl(s, *img, {});
  EXPECT_EQ(h.n_samples, 1000000);
  EXPECT_LE(h.kl, 0.02);
}

TEST(HistogramKl, Errors) {
  const Flat2D flat;
  EXPECT_THROW(histogram_kl(Matrix::Constant(2, 5, 10.0), flat, {}), std::invalid_argument);
  EXPECT_THROW(histogram_kl(Matrix::Zero(3, 5), flat, {}), std::invalid_argument);
  EXPECT_THROW(histogram_kl(Matrix::Zero(2, 5), flat, {1, -1, 1}), std::invalid_argument);
}

}  // namespace
