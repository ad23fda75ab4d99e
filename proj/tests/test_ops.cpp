#include <gtest/gtest.h>

#include <cmath>

#include "rin/ops.hpp"
#include "rin/rng.hpp"
#include "support/op_suite.hpp"

using namespace rin;
using rin::testing::check_gradients;
using rin::testing::away_from;
using rin::testing::probe_loss;
using rin::testing::random_tensor;

namespace {

constexpr double kOpTolerance = 1e-6;

}  // namespace

TEST(Conv2d, OutputShapeForStrideTwo) {
  Tensor<double> x(Shape{1, 3, 32, 32}, 0.5);
  Tensor<double> w(Shape{16, 3, 3, 3}, 0.1), b(Shape{16}, 0.0);
  EXPECT_EQ(conv2d(x, w, b, 2, 1).shape(), (Shape{1, 16, 16, 16}));
}

TEST(Conv2d, FiveStrideTwoStagesReachOneByOne) {
  Tensor<float> x(Shape{1, 3, 32, 32}, 0.5f);
  std::size_t in = 3;
  for (std::size_t out : {16, 32, 64, 128, 256}) {
    x = conv2d(x, Tensor<float>(Shape{out, in, 3, 3}, 0.01f), Tensor<float>(Shape{out}, 0.0f), 2, 1);
    in = out;
  }
  EXPECT_EQ(x.shape(), (Shape{1, 256, 1, 1}));
}

TEST(Conv2d, ZeroWeightsGiveZeroOutputAndBiasGradEqualsArea) {
  auto x = random_tensor({2, 3, 8, 8}, 1);
  Tensor<double> w(Shape{4, 3, 3, 3}, 0.0), b(Shape{4}, 0.0);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  auto y = conv2d(x, w, b, 2, 1);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  sum(y).backward();
  // 2 batch items x 4x4 outputs each
  for (double g : b.grad()) EXPECT_DOUBLE_EQ(g, 2.0 * 16.0);
}

TEST(Conv2d, RejectsChannelMismatch) {
  Tensor<double> x(Shape{1, 3, 8, 8}), w(Shape{4, 2, 3, 3}), b(Shape{4});
  EXPECT_THROW(conv2d(x, w, b, 1, 1), ShapeError);
}

TEST(Conv2d, RejectsNonThreeByThreeKernel) {
  Tensor<double> x(Shape{1, 3, 8, 8}), w(Shape{4, 3, 5, 5}), b(Shape{4});
  EXPECT_THROW(conv2d(x, w, b, 1, 1), ShapeError);
}

TEST(Conv2d, LinearInInputWithZeroBias) {
  auto x = random_tensor({2, 3, 8, 8}, 2, -1, 1, false);
  auto w = random_tensor({5, 3, 3, 3}, 3, -1, 1, false);
  Tensor<double> b(Shape{5}, 0.0);
  auto y1 = conv2d(scale(x, 2.5), w, b, 1, 1);
  auto y2 = scale(conv2d(x, w, b, 1, 1), 2.5);
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_NEAR(y1[i], y2[i], 1e-12);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  for (std::size_t stride : {1, 2}) {
    auto x = random_tensor({2, 3, 6, 6}, 4);
    auto w = random_tensor({4, 3, 3, 3}, 5);
    auto b = random_tensor({4}, 6);
    auto r = check_gradients([&] { return probe_loss(conv2d(x, w, b, stride, 1), 7); }, {x, w, b});
    EXPECT_LT(r.max_rel_error, kOpTolerance) << "stride " << stride;
  }
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Tensor<double> x(Shape{2, 2, 3, 3}, 0.7);
  Tensor<double> g(Shape{2}, std::vector<double>{2.0, 3.0}), b(Shape{2}, std::vector<double>{0.25, -0.5});
  auto stats = BatchNormStats<double>::init(2);
  auto y = batchnorm(x, g, b, stats, NormMode::Train);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], (i / 9) % 2 == 0 ? 0.25 : -0.5, 1e-12);
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
  // Each channel holds +-1 in equal numbers: mean 0, biased variance 1.
  std::vector<double> v(2 * 1 * 4 * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % 2) ? 1.0 : -1.0;
  Tensor<double> x(Shape{2, 1, 4, 4}, v);
  Tensor<double> g(Shape{1}, 1.0), b(Shape{1}, 0.0);
  auto stats = BatchNormStats<double>::init(1);
  auto y = batchnorm(x, g, b, stats, NormMode::Train);
  const double shrink = 1.0 / std::sqrt(1.0 + kBatchNormEps);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], v[i] * shrink, 1e-12);
}

TEST(BatchNorm, OutputIsStandardizedPerChannel) {
  auto x = random_tensor({2, 4, 8, 8}, 8, -3, 5, false);
  Tensor<double> g(Shape{4}, 1.0), b(Shape{4}, 0.0);
  auto stats = BatchNormStats<double>::init(4);
  auto y = batchnorm(x, g, b, stats, NormMode::Train);
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 64; ++i) {
        const double v = y[(n * 4 + c) * 64 + i];
        s += v;
        s2 += v * v;
      }
    const double mean = s / 128, var = s2 / 128 - mean * mean;
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
}

TEST(BatchNorm, RunningStatsFollowMovingAverage) {
  Tensor<double> x(Shape{2, 1, 1, 2}, std::vector<double>{1, 3, 5, 7});
  Tensor<double> g(Shape{1}, 1.0), b(Shape{1}, 0.0);
  auto stats = BatchNormStats<double>::init(1);
  batchnorm(x, g, b, stats, NormMode::Train);
  // batch mean 4, unbiased variance 20/3
  EXPECT_NEAR(stats.mean[0], 0.1 * 4.0, 1e-12);
  EXPECT_NEAR(stats.var[0], 0.9 + 0.1 * 20.0 / 3.0, 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  Tensor<double> x(Shape{1, 1, 1, 2}, std::vector<double>{1.0, 3.0});
  Tensor<double> g(Shape{1}, 2.0), b(Shape{1}, 0.5);
  BatchNormStats<double> stats{Tensor<double>(Shape{1}, 1.0), Tensor<double>(Shape{1}, 4.0)};
  auto y = batchnorm(x, g, b, stats, NormMode::Eval);
  const double d = std::sqrt(4.0 + kBatchNormEps);
  EXPECT_NEAR(y[0], 0.5, 1e-12);
  EXPECT_NEAR(y[1], 2.0 * 2.0 / d + 0.5, 1e-12);
  EXPECT_EQ(stats.mean[0], 1.0);
}

TEST(BatchNorm, RejectsSingleValuePerChannelInTrainMode) {
  Tensor<double> x(Shape{1, 2, 1, 1}), g(Shape{2}, 1.0), b(Shape{2}, 0.0);
  auto stats = BatchNormStats<double>::init(2);
  EXPECT_THROW(batchnorm(x, g, b, stats, NormMode::Train), ShapeError);
}

TEST(BatchNorm, RejectsChannelMismatch) {
  Tensor<double> x(Shape{2, 3, 2, 2}), g(Shape{2}, 1.0), b(Shape{2}, 0.0);
  auto stats = BatchNormStats<double>::init(2);
  EXPECT_THROW(batchnorm(x, g, b, stats, NormMode::Train), ShapeError);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  auto x = random_tensor({3, 2, 4, 4}, 9, -2, 2);
  auto g = random_tensor({2}, 10, 0.5, 1.5);
  auto b = random_tensor({2}, 11);
  for (auto mode : {NormMode::Train, NormMode::Eval}) {
    auto r = check_gradients(
        [&] {
          BatchNormStats<double> stats{Tensor<double>(Shape{2}, 0.1), Tensor<double>(Shape{2}, 1.3)};
          return probe_loss(batchnorm(x, g, b, stats, mode), 12);
        },
        {x, g, b});
    EXPECT_LT(r.max_rel_error, kOpTolerance);
  }
}

TEST(Relu, ValuesAndGradients) {
  Tensor<double> x(Shape{2}, std::vector<double>{-0.3, 0.3});
  x.set_requires_grad(true);
  auto y = relu(x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.3);
  sum(y).backward();
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
}

TEST(Relu, GradientsMatchFiniteDifferences) {
  auto x = away_from({2, 3, 4, 4}, 13, -1, 1, {0.0});
  auto r = check_gradients([&] { return probe_loss(relu(x), 14); }, {x});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Upsample, BlockReplicates) {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto y = upsample2x(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  const std::vector<double> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[i], expect[i]);
}

TEST(Upsample, GradientsMatchFiniteDifferences) {
  auto x = random_tensor({2, 3, 3, 3}, 15);
  auto r = check_gradients([&] { return probe_loss(upsample2x(x), 16); }, {x});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Linear, VectorAndBatchForms) {
  Tensor<double> w(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor<double> b(Shape{2}, std::vector<double>{0.5, -1});
  auto y = linear(Tensor<double>(Shape{3}, std::vector<double>{1, 0, -1}), w, b);
  ASSERT_EQ(y.shape(), (Shape{2}));
  EXPECT_EQ(y[0], -1.5);
  EXPECT_EQ(y[1], -3.0);
  auto yb = linear(Tensor<double>(Shape{2, 3}, std::vector<double>{1, 0, -1, 0, 1, 0}), w, b);
  ASSERT_EQ(yb.shape(), (Shape{2, 2}));
  EXPECT_EQ(yb[2], 2.5);
  EXPECT_EQ(yb[3], 4.0);
}

TEST(Linear, RejectsFeatureMismatch) {
  EXPECT_THROW(linear(Tensor<double>(Shape{4}), Tensor<double>(Shape{2, 3}), Tensor<double>(Shape{2})),
               ShapeError);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  auto x = random_tensor({3, 5}, 17);
  auto w = random_tensor({4, 5}, 18);
  auto b = random_tensor({4}, 19);
  auto r = check_gradients([&] { return probe_loss(linear(x, w, b), 20); }, {x, w, b});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Concat, StacksChannelsAndSplitsGradients) {
  auto a = random_tensor({2, 2, 3, 3}, 21);
  auto b = random_tensor({2, 3, 3, 3}, 22);
  auto c = concat_channels(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 5, 3, 3}));
  EXPECT_EQ(c[0], a[0]);
  EXPECT_EQ(c[18], b[0]);
  EXPECT_EQ(c[45], a[18]);
  auto r = check_gradients([&] { return probe_loss(concat_channels(a, b), 23); }, {a, b});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Concat, RejectsSpatialMismatch) {
  EXPECT_THROW(concat_channels(Tensor<double>(Shape{1, 2, 4, 4}), Tensor<double>(Shape{1, 2, 2, 2})),
               ShapeError);
}

TEST(Multiply, IdentityShading) {
  Tensor<double> r(Shape{1, 3, 1, 1}, std::vector<double>{0.5, 0.2, 0.8});
  Tensor<double> s(Shape{1, 1, 1, 1}, 1.0);
  auto y = multiply(r, s);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 1, 1}));
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], 0.2);
  EXPECT_EQ(y[2], 0.8);
}

TEST(Multiply, RejectsOtherBroadcasts) {
  EXPECT_THROW(multiply(Tensor<double>(Shape{1, 3, 2, 2}), Tensor<double>(Shape{1, 2, 2, 2})), ShapeError);
  EXPECT_THROW(multiply(Tensor<double>(Shape{2, 3, 2, 2}), Tensor<double>(Shape{1, 3, 2, 2})), ShapeError);
}

TEST(Multiply, GradientsMatchFiniteDifferences) {
  auto a = random_tensor({2, 3, 3, 3}, 24);
  auto b = random_tensor({2, 3, 3, 3}, 25);
  auto s = random_tensor({2, 1, 3, 3}, 26);
  auto r = check_gradients([&] { return probe_loss(add(multiply(a, b), multiply(s, a)), 27); }, {a, b, s});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Clamp01, ValuesAndGradients) {
  Tensor<double> x(Shape{3}, std::vector<double>{-0.5, 0.4, 1.5});
  x.set_requires_grad(true);
  auto y = clamp01(x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.4);
  EXPECT_EQ(y[2], 1.0);
  sum(y).backward();
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Clamp01, GradientsMatchFiniteDifferences) {
  auto x = away_from({2, 3, 4, 4}, 28, -0.5, 1.5, {0.0, 1.0});
  auto r = check_gradients([&] { return probe_loss(clamp01(x), 29); }, {x});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Mse, ValuesAndGradient) {
  Tensor<double> p(Shape{2}, std::vector<double>{1, 0}), t(Shape{2}, 0.0);
  p.set_requires_grad(true);
  EXPECT_EQ(mse(t, t).item(), 0.0);
  auto l = mse(p, t);
  EXPECT_EQ(l.item(), 0.5);
  l.backward();
  EXPECT_EQ(p.grad()[0], 1.0);
  EXPECT_EQ(p.grad()[1], 0.0);
}

TEST(Mse, RejectsShapeMismatch) {
  EXPECT_THROW(mse(Tensor<double>(Shape{2}), Tensor<double>(Shape{3})), ShapeError);
}

TEST(Mse, GradientsMatchFiniteDifferences) {
  auto p = random_tensor({2, 3, 4}, 30);
  auto t = random_tensor({2, 3, 4}, 31);
  auto r = check_gradients([&] { return mse(p, t); }, {p, t});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(ElementwiseOps, GradientsMatchFiniteDifferences) {
  auto a = random_tensor({2, 3, 2, 2}, 32);
  auto b = random_tensor({2, 3, 2, 2}, 33);
  auto r = check_gradients(
      [&] { return probe_loss(reshape(add(scale(a, 1.7), b), Shape{2, 12}), 34); }, {a, b});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(NormalizeChannels, UnitLengthAndGradients) {
  auto x = random_tensor({2, 3, 3, 3}, 35, 0.2, 1.0);
  auto y = normalize_channels(x);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += y[(n * 3 + c) * 9 + i] * y[(n * 3 + c) * 9 + i];
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
    }
  auto r = check_gradients([&] { return probe_loss(normalize_channels(x), 36); }, {x});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(GlobalAvgPool, MeansAndGradients) {
  auto x = random_tensor({2, 3, 4, 4}, 37);
  auto y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  double s = 0;
  for (std::size_t i = 0; i < 16; ++i) s += x[i];
  EXPECT_NEAR(y[0], s / 16, 1e-12);
  auto r = check_gradients([&] { return probe_loss(global_avg_pool(x), 38); }, {x});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Backward, SumGivesOnesAndAccumulates) {
  auto x = random_tensor({2, 3}, 39);
  auto l = sum(x);
  l.backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  l.backward();
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  auto x = random_tensor({2, 3}, 40);
  EXPECT_THROW(scale(x, 2.0).backward(), ShapeError);
}

TEST(Backward, ComposedMseGraphMatchesFiniteDifferences) {
  auto w = random_tensor({4, 3}, 41);
  auto x = random_tensor({5, 3}, 42);
  auto bias = random_tensor({4}, 43);
  auto t = random_tensor({5, 4}, 44, -1, 1, false);
  auto r = check_gradients([&] { return mse(linear(x, w, bias), t); }, {w, x, bias});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Backward, EveryRequiresGradTensorOnTapeGetsGrad) {
  auto a = random_tensor({2, 3}, 45);
  auto b = random_tensor({2, 3}, 46);
  auto mid = multiply(a, b);
  auto loss = sum(relu(mid));
  loss.backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  for (auto* node : topological_order(loss)) EXPECT_FALSE(node->grad.empty());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto a = random_tensor({2, 3}, 47);
  NoGradGuard guard;
  auto y = scale(a, 2.0);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, TopologicalOrderPutsInputsFirst) {
  auto a = random_tensor({3}, 48);
  auto b = scale(a, 2.0);
  auto c = add(b, a);
  auto d = sum(multiply(c, b));
  auto order = topological_order(d);
  ASSERT_EQ(order.size(), 4u);
  EXPECT_EQ(order.front(), &b.node());
  EXPECT_EQ(order.back(), &d.node());
}

TEST(Determinism, RepeatedForwardAndBackwardAreBitIdentical) {
  auto run = [] {
    auto x = random_tensor({2, 3, 8, 8}, 49);
    auto w = random_tensor({4, 3, 3, 3}, 50);
    auto b = random_tensor({4}, 51);
    auto g = random_tensor({4}, 52, 0.5, 1.5);
    auto beta = random_tensor({4}, 53);
    auto stats = BatchNormStats<double>::init(4);
    auto y = relu(batchnorm(conv2d(x, w, b, 2, 1), g, beta, stats, NormMode::Train));
    sum(y).backward();
    std::vector<double> out(y.data().begin(), y.data().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(TensorContract, RejectsMismatchedElementCount) {
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<double>(Shape{0, 2}), ShapeError);
}

TEST(TensorContract, ReshapeKeepsValuesAndChecksCount) {
  auto a = random_tensor({2, 6}, 54);
  auto b = reshape(a, Shape{3, 4});
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_THROW(reshape(a, Shape{5}), ShapeError);
}

TEST(OpSuite, CoversEveryOpWithinTolerance) {
  const auto suite = rin::testing::op_gradient_suite();
  EXPECT_GE(suite.size(), 14u);
  for (const auto& r : suite) {
    EXPECT_GT(r.check.checked, 0u) << r.op;
    EXPECT_LT(r.check.max_rel_error, kOpTolerance) << r.op;
  }
}
