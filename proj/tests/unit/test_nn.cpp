#include "snf/nn.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace snf;

namespace {

DenseNet random_net(const std::vector<int>& dims, RngStream& rng, double scale = 0.5) {
  DenseNet net(dims);
  for (Eigen::Index i = 0; i < net.parameter_count(); ++i) net.parameters()[i] = scale * rng.normal();
  return net;
}

// Straightforward per-sample evaluation written independently of DenseNet.
Vector reference_forward(const DenseNet& net, const Vector& x) {
  const auto& d = net.layer_dims();
  const Vector& p = net.parameters();
  Vector a = x;
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < d.size(); ++l) {
    Vector z(d[l + 1]);
    for (int o = 0; o < d[l + 1]; ++o) {
      double s = 0.0;
      for (int i = 0; i < d[l]; ++i) s += p[off + static_cast<std::size_t>(i) * d[l + 1] + o] * a[i];
      z[o] = s;
    }
    off += static_cast<std::size_t>(d[l]) * d[l + 1];
    for (int o = 0; o < d[l + 1]; ++o) z[o] += p[off + o];
    off += d[l + 1];
    a = (l + 2 < d.size()) ? Vector(z.cwiseMax(0.0)) : z;
  }
  return a;
}

TEST(DenseNet, ParameterCount) {
  DenseNet net({3, 5, 2});
  EXPECT_EQ(net.parameter_count(), 3 * 5 + 5 + 5 * 2 + 2);
  EXPECT_THROW(DenseNet({3}), std::invalid_argument);
  EXPECT_THROW(DenseNet({3, 0, 2}), std::invalid_argument);
}

TEST(DenseNet, ZeroNetGivesZero) {
  DenseNet net({2, 8, 3});
  Matrix x = Matrix::Random(2, 5);
  EXPECT_TRUE(net.forward(x).isZero(0.0));
}

TEST(DenseNet, SingleLinearLayer) {
  DenseNet net({1, 1});
  net.weight(0)(0, 0) = 2.0;
  net.bias(0)[0] = 1.0;
  Matrix x(1, 1);
  x << 3.0;
  EXPECT_EQ(net.forward(x)(0, 0), 7.0);
}

TEST(DenseNet, MatchesReferenceEvaluation) {
  RngStream rng(1);
  const DenseNet net = random_net({2, 16, 2}, rng);
  Matrix x(2, 10);
  for (Eigen::Index k = 0; k < 10; ++k) x.col(k) = snf::testing::random_vector(2, rng);
  const Matrix y = net.forward(x);
  for (Eigen::Index k = 0; k < 10; ++k) {
    EXPECT_LE((y.col(k) - reference_forward(net, x.col(k))).norm(), 1e-12);
  }
}

TEST(DenseNet, ForwardRejectsWrongInput) {
  DenseNet net({2, 3});
  EXPECT_THROW(net.forward(Matrix::Zero(3, 1)), std::invalid_argument);
}

TEST(DenseNet, LinearBackwardIsTranspose) {
  RngStream rng(2);
  const DenseNet net = random_net({3, 2}, rng);
  DenseNet::Tape tape;
  net.forward(Matrix::Random(3, 1), &tape);
  Matrix cot(2, 1);
  cot << 0.7, -1.1;
  GradientBuffer g(net.parameter_count());
  const Matrix in = net.backward(tape, cot, g);
  EXPECT_TRUE(in.isApprox(net.weight(0).transpose() * cot, 1e-15));
  EXPECT_TRUE(net.backward_input(tape, cot).isApprox(in, 1e-15));
}

TEST(DenseNet, ParameterGradientsMatchFiniteDifferences) {
  RngStream rng(3);
  DenseNet net = random_net({2, 8, 8, 2}, rng);
  Matrix x(2, 4);
  for (Eigen::Index k = 0; k < 4; ++k) x.col(k) = snf::testing::random_vector(2, rng);
  Matrix cot(2, 4);
  for (Eigen::Index k = 0; k < 4; ++k) cot.col(k) = snf::testing::random_vector(2, rng);
  DenseNet::Tape tape;
  net.forward(x, &tape);
  GradientBuffer g(net.parameter_count());
  const Matrix in_cot = net.backward(tape, cot, g);

  const Vector p0 = net.parameters();
  auto loss = [&](const Vector& p) {
    net.parameters() = p;
    return (net.forward(x).array() * cot.array()).sum();
  };
  const Vector fd = snf::testing::fd_gradient(loss, p0);
  net.parameters() = p0;
  for (Eigen::Index i = 0; i < fd.size(); ++i) {
    EXPECT_LE(std::abs(g.values[i] - fd[i]) / (std::abs(g.values[i]) + 1e-8), 1e-5)
        << "parameter " << i;
  }
  for (Eigen::Index k = 0; k < 4; ++k) {
    const Vector fdx = snf::testing::fd_gradient(
        [&](const Vector& xi) { return net.forward(xi).col(0).dot(cot.col(k)); }, x.col(k));
    EXPECT_LE(snf::testing::max_rel_err(in_cot.col(k), fdx), 1e-5);
  }
}

TEST(DenseNet, GradientCheckAcrossShapes) {
  RngStream rng(4);
  const std::vector<std::vector<int>> shapes = {{1, 1}, {3, 32, 2}, {2, 16, 16, 16, 3}, {4, 5, 32, 1}};
  for (const auto& dims : shapes) {
    DenseNet net = random_net(dims, rng, 0.3);
    Matrix x(dims.front(), 3);
    for (Eigen::Index k = 0; k < 3; ++k) x.col(k) = snf::testing::random_vector(dims.front(), rng);
    Matrix cot(dims.back(), 3);
    for (Eigen::Index k = 0; k < 3; ++k) cot.col(k) = snf::testing::random_vector(dims.back(), rng);
    DenseNet::Tape tape;
    net.forward(x, &tape);
    GradientBuffer g(net.parameter_count());
    net.backward(tape, cot, g);
    const Vector p0 = net.parameters();
    const Vector fd = snf::testing::fd_gradient(
        [&](const Vector& p) {
          net.parameters() = p;
          return (net.forward(x).array() * cot.array()).sum();
        },
        p0);
    net.parameters() = p0;
    for (Eigen::Index i = 0; i < fd.size(); ++i) {
      EXPECT_LE(std::abs(g.values[i] - fd[i]) / (std::abs(g.values[i]) + 1e-8), 1e-4);
    }
  }
}

TEST(DenseNet, ReluBlocksNegativePreactivation) {
  DenseNet net({1, 1, 1});
  net.weight(0)(0, 0) = 1.0;
  net.bias(0)[0] = -5.0;  // pre-activation x - 5 < 0 for x = 1
  net.weight(1)(0, 0) = 3.0;
  DenseNet::Tape tape;
  Matrix x(1, 1);
  x << 1.0;
  net.forward(x, &tape);
  GradientBuffer g(net.parameter_count());
  const Matrix in = net.backward(tape, Matrix::Ones(1, 1), g);
  EXPECT_EQ(in(0, 0), 0.0);
  EXPECT_EQ(g.values[0], 0.0);
  EXPECT_EQ(g.values[1], 0.0);
}

TEST(DenseNet, StaleTapeRejected) {
  RngStream rng(5);
  const DenseNet net = random_net({2, 4, 2}, rng);
  DenseNet::Tape tape;
  net.forward(Matrix::Zero(2, 3), &tape);
  GradientBuffer g(net.parameter_count());
  EXPECT_THROW(net.backward(tape, Matrix::Zero(2, 4), g), std::invalid_argument);
  DenseNet::Tape empty;
  EXPECT_THROW(net.backward(empty, Matrix::Zero(2, 3), g), std::invalid_argument);
  const DenseNet other = random_net({3, 4, 2}, rng);
  GradientBuffer g2(other.parameter_count());
  EXPECT_THROW(other.backward(tape, Matrix::Zero(2, 3), g2), std::invalid_argument);
}

TEST(Conditioner, InitIsZeroOutputAndBounded) {
  RngStream rng(6);
  const DenseNet net = init_coupling_conditioner({3, 64, 64, 2}, rng);
  Matrix x(3, 20);
  for (Eigen::Index k = 0; k < 20; ++k) x.col(k) = snf::testing::random_vector(3, rng, 5.0);
  EXPECT_TRUE(net.forward(x).isZero(0.0));
  EXPECT_LE(net.weight(0).cwiseAbs().maxCoeff(), std::sqrt(6.0 / 3.0));
  EXPECT_LE(net.weight(1).cwiseAbs().maxCoeff(), std::sqrt(6.0 / 64.0));
  EXPECT_GT(net.weight(1).cwiseAbs().maxCoeff(), 0.5 * std::sqrt(6.0 / 64.0));
  EXPECT_TRUE(net.weight(2).isZero(0.0));
  EXPECT_TRUE(net.bias(2).isZero(0.0));
}

TEST(Conditioner, SameSeedSameNet) {
  RngStream a(7), b(7);
  EXPECT_TRUE(init_coupling_conditioner({2, 16, 2}, a) == init_coupling_conditioner({2, 16, 2}, b));
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Vector p = Vector::LinSpaced(5, -1, 1);
  const Vector p0 = p;
  AdamState s(5, {});
  for (int i = 0; i < 10; ++i) adam_step(s, p, Vector::Zero(5));
  EXPECT_EQ(p, p0);
  EXPECT_EQ(s.step, 10);
}

TEST(Adam, FirstStepHandComputed) {
  const AdamConfig cfg;
  for (double g : {3.0, -0.02, 1e-6}) {
    Vector p(1);
    p << 0.5;
    AdamState s(1, cfg);
    Vector grad(1);
    grad << g;
    adam_step(s, p, grad);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    const double expected = 0.5 - cfg.learning_rate * g / (std::abs(g) + cfg.epsilon);
    EXPECT_NEAR(p[0], expected, 1e-16);
    const double delta = std::abs(p[0] - 0.5);
    EXPECT_LE(delta, cfg.learning_rate);
    EXPECT_GE(delta, cfg.learning_rate * (1 - cfg.epsilon / std::abs(g)) - 1e-16);
  }
}

TEST(Adam, ZeroLearningRateIsNoOp) {
  Vector p = Vector::Ones(3);
  AdamState s(3, {0.0, 0.9, 0.999, 1e-8});
  adam_step(s, p, Vector::Constant(3, 2.0));
  EXPECT_EQ(p, Vector::Ones(3));
}

TEST(Adam, DeterministicTrajectories) {
  RngStream rng(8);
  Vector a = Vector::Zero(4), b = Vector::Zero(4);
  AdamState sa(4, {}), sb(4, {});
  for (int i = 0; i < 50; ++i) {
    const Vector g = snf::testing::random_vector(4, rng);
    adam_step(sa, a, g);
    adam_step(sb, b, g);
  }
  EXPECT_EQ(a, b);
  EXPECT_THROW(adam_step(sa, a, Vector::Zero(3)), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsExact) {
  RngStream rng(9);
  const DenseNet net = random_net({2, 7, 3}, rng);
  const auto dir = std::filesystem::temp_directory_path() / "snf_nn_ckpt";
  std::filesystem::create_directories(dir);
  save_dense_net(net, (dir / "net.bin").string(), (dir / "net.json").string());
  EXPECT_EQ(std::filesystem::file_size(dir / "net.bin"),
            static_cast<std::uintmax_t>(net.parameter_count() * 8));
  const DenseNet back = load_dense_net((dir / "net.bin").string(), (dir / "net.json").string());
  EXPECT_TRUE(back == net);
}

TEST(Checkpoint, LittleEndianLayout) {
  std::ostringstream out;
  const double v[] = {1.0};
  write_f64_le(out, v);
  const std::string bytes = out.str();
  ASSERT_EQ(bytes.size(), 8u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 0xF0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 0x00);
}

}  // namespace
