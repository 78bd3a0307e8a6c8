#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace parefine;
using testutil::random_tensor;

namespace {

// Quadruple loop written from the definition of cross-correlation.
Tensor<double> conv_reference(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                              std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y({N, O, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < K; ++ki)
              for (std::size_t kj = 0; kj < K; ++kj) {
                const long yy = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                s += x.at(n, c, yy, xx) * w.at(o, c, ki, kj);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  Tensor<float> x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<float> w({1, 1, 1, 1}, {1});
  Tensor<float> b({1}, {0});
  const Tensor<float> y = ops::conv2d(x, w, b);
  EXPECT_TRUE(bitwise_equal(y, x));
}

TEST(Conv2d, ZeroWeights) {
  Rng rng(1);
  const auto x = random_tensor<float>({2, 6, 5}, rng);
  const Tensor<float> y = ops::conv2d(x, Tensor<float>({4, 2, 3, 3}), Tensor<float>({4}), 1, 1);
  EXPECT_EQ(y.shape(), (Shape{4, 6, 5}));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], 0.0f);
}

TEST(Conv2d, MatchesLoopReference) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(3), o = 1 + rng.below(4), k = 1 + 2 * rng.below(2);
    const std::size_t h = 3 + rng.below(8), w = 3 + rng.below(8), stride = 1 + rng.below(2), pad = rng.below(2);
    const auto x = random_tensor({n, c, h, w}, rng);
    const auto wt = random_tensor({o, c, k, k}, rng);
    const auto b = random_tensor({o}, rng);
    const auto y = ops::conv2d(x, wt, b, stride, pad);
    EXPECT_LT(max_abs_diff(y, conv_reference(x, wt, b, stride, pad)), 1e-6);
  }
}

TEST(Conv2d, SpecExampleTwoByFiveByFive) {
  Rng rng(3);
  const auto x = random_tensor({1, 2, 5, 5}, rng);
  const auto wt = random_tensor({3, 2, 3, 3}, rng);
  const auto b = random_tensor({3}, rng);
  EXPECT_LT(max_abs_diff(ops::conv2d(x, wt, b), conv_reference(x, wt, b, 1, 0)), 1e-6);
}

TEST(Conv2d, LargeFloatCaseMatchesDoubleReference) {
  // Exercises the blocked matrix kernel (full column tiles, row remainders).
  Rng rng(4);
  const auto x = random_tensor({2, 7, 19, 23}, rng);
  const auto wt = random_tensor({13, 7, 3, 3}, rng);
  const auto b = random_tensor({13}, rng);
  const auto ref = conv_reference(x, wt, b, 1, 1);
  const auto y = ops::conv2d(x.cast<float>(), wt.cast<float>(), b.cast<float>(), 1, 1);
  EXPECT_LT(max_abs_diff(y.cast<double>(), ref), 1e-4);
}

TEST(Conv2d, ChannelMismatchNamesAxis) {
  try {
    ops::conv2d(Tensor<float>({1, 2, 4, 4}), Tensor<float>({1, 3, 3, 3}), Tensor<float>({1}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ops::conv2d(Tensor<float>({1, 1, 2, 2}), Tensor<float>({1, 1, 3, 3}), Tensor<float>({1})), DimensionError);
  EXPECT_THROW(ops::conv2d(Tensor<float>({1, 1, 4, 4}), Tensor<float>({2, 1, 3, 3}), Tensor<float>({1})), DimensionError);
}

TEST(Conv2d, Deterministic) {
  Rng rng(5);
  const auto x = random_tensor<float>({2, 4, 16, 16}, rng);
  const auto wt = random_tensor<float>({8, 4, 3, 3}, rng);
  const auto b = random_tensor<float>({8}, rng);
  EXPECT_TRUE(bitwise_equal(ops::conv2d(x, wt, b, 1, 1), ops::conv2d(x, wt, b, 1, 1)));
}

TEST(BatchNorm, InferIdentity) {
  Rng rng(6);
  const auto x = random_tensor<float>({2, 3, 4, 4}, rng);
  Tensor<float> g({3}, 1.0f), b({3}), m({3}), v({3}, 1.0f);
  const auto y = ops::batchnorm(x, g, b, m, v, Mode::kInfer, false);
  EXPECT_LT(max_abs_diff(y, x), 1e-5f);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Tensor<double> x({2, 1, 3, 3}, 0.7);
  Tensor<double> g({1}, 2.0), b({1}, -0.3), m({1}), v({1}, 1.0);
  const auto y = ops::batchnorm(x, g, b, m, v, Mode::kTrain, true);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], -0.3, 1e-9);
}

TEST(BatchNorm, TrainModeNormalizes) {
  Rng rng(7);
  const auto x = random_tensor({4, 8, 6, 6}, rng, -3, 5);
  Tensor<double> g({8}, 1.0), b({8}), m({8}), v({8}, 1.0);
  const auto y = ops::batchnorm(x, g, b, m, v, Mode::kTrain, false);
  for (std::size_t c = 0; c < 8; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 36; ++i) s += y[(n * 8 + c) * 36 + i];
    const double mean = s / 144;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 36; ++i) s2 += std::pow(y[(n * 8 + c) * 36 + i] - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-4);
    EXPECT_NEAR(s2 / 144, 1.0, 1e-4);
  }
}

TEST(BatchNorm, RunningStatsMomentum) {
  // One channel holding {1, 3}: batch mean 2, unbiased variance 2.
  Tensor<double> x({2, 1, 1, 1}, {1.0, 3.0});
  Tensor<double> g({1}, 1.0), b({1}), m({1}), v({1}, 1.0);
  ops::batchnorm(x, g, b, m, v, Mode::kTrain, true);
  EXPECT_NEAR(m[0], 0.9 * 0 + 0.1 * 2, 1e-12);
  EXPECT_NEAR(v[0], 0.9 * 1 + 0.1 * 2, 1e-12);
  ops::batchnorm(x, g, b, m, v, Mode::kTrain, false);
  EXPECT_NEAR(m[0], 0.2, 1e-12);
}

TEST(BatchNorm, MatchesDirectFormula) {
  Rng rng(8);
  const auto x = random_tensor({3, 2, 4, 5}, rng);
  const auto g = random_tensor({2}, rng), b = random_tensor({2}, rng);
  Tensor<double> m({2}), v({2}, 1.0);
  const auto y = ops::batchnorm(x, g, b, m, v, Mode::kTrain, false);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 20; ++i) s += x[(n * 2 + c) * 20 + i];
    const double mu = s / 60;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 20; ++i) s2 += std::pow(x[(n * 2 + c) * 20 + i] - mu, 2);
    const double sd = std::sqrt(s2 / 60 + 1e-5);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 20; ++i) {
        const std::size_t k = (n * 2 + c) * 20 + i;
        EXPECT_NEAR(y[k], g[c] * (x[k] - mu) / sd + b[c], 1e-6);
      }
  }
}

TEST(BatchNorm, ParameterLengthMismatch) {
  Tensor<float> x({1, 3, 2, 2}), g({2}), b({3}), m({3}), v({3});
  EXPECT_THROW(ops::batchnorm(x, g, b, m, v, Mode::kTrain, false), DimensionError);
}

TEST(Elementwise, ReluSigmoid) {
  const Tensor<float> r = ops::relu(Tensor<float>({3}, {-1, 0, 2}));
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 0.0f);
  EXPECT_EQ(r[2], 2.0f);
  EXPECT_EQ(ops::sigmoid(0.0), 0.5);
  EXPECT_NEAR(ops::sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_EQ(ops::sigmoid(800.0), 1.0);
}

TEST(Elementwise, AddMulShapes) {
  Tensor<float> a({2}, {1, 2}), b({2}, {3, 4});
  EXPECT_EQ(ops::add(a, b)[1], 6.0f);
  EXPECT_EQ(ops::mul(a, b)[1], 8.0f);
  EXPECT_THROW(ops::add(a, Tensor<float>({3})), DimensionError);
}

TEST(MaxPool, TwoByTwoAndBackward) {
  Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
  std::vector<std::size_t> arg;
  const auto y = ops::maxpool2(x, &arg);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_EQ(y[0], 4.0f);
  const auto g = ops::maxpool2_backward(Tensor<float>({1, 1, 1, 1}, {5}), arg, x.shape());
  EXPECT_EQ(g[0], 0.0f);
  EXPECT_EQ(g[1], 0.0f);
  EXPECT_EQ(g[2], 0.0f);
  EXPECT_EQ(g[3], 5.0f);
}

TEST(MaxPool, TiesGoToFirstOccurrence) {
  Tensor<float> x({1, 1, 2, 2}, {7, 7, 7, 7});
  std::vector<std::size_t> arg;
  ops::maxpool2(x, &arg);
  const auto g = ops::maxpool2_backward(Tensor<float>({1, 1, 1, 1}, {1}), arg, x.shape());
  EXPECT_EQ(g[0], 1.0f);
  EXPECT_EQ(g[1] + g[2] + g[3], 0.0f);
}

TEST(MaxPool, EveryWindowEnumerated) {
  Rng rng(9);
  const auto x = random_tensor({2, 3, 6, 8}, rng);
  const auto y = ops::maxpool2(x);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          const double m = std::max({x.at(n, c, 2 * i, 2 * j), x.at(n, c, 2 * i, 2 * j + 1), x.at(n, c, 2 * i + 1, 2 * j),
                                     x.at(n, c, 2 * i + 1, 2 * j + 1)});
          EXPECT_EQ(y.at(n, c, i, j), m);
        }
}

TEST(Upsample, NearestDuplicates) {
  Tensor<float> x({1, 1, 1, 2}, {1, 2});
  const auto y = ops::upsample_nearest2(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const float want[] = {1, 1, 2, 2, 1, 1, 2, 2};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(y[i], want[i]);
  const auto g = ops::upsample_nearest2_backward(Tensor<float>({1, 1, 2, 4}, 1.0f));
  EXPECT_EQ(g[0], 4.0f);
}

TEST(Concat, ChannelOrderAndMismatch) {
  Tensor<float> a({1, 1, 1, 2}, {1, 2}), b({1, 2, 1, 2}, {3, 4, 5, 6});
  const auto y = ops::concat_channels(a, b);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 1, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], static_cast<float>(i + 1));
  EXPECT_THROW(ops::concat_channels(a, Tensor<float>({1, 1, 2, 2})), DimensionError);
  const auto split = ops::concat_channels_backward(y, 1);
  EXPECT_TRUE(bitwise_equal(split.a, a));
  EXPECT_TRUE(bitwise_equal(split.b, b));
}

TEST(PadCrop, SymmetricPadThenCropIsIdentity) {
  Rng rng(10);
  const auto x = random_tensor({1, 2, 5, 7}, rng);
  const ops::Padding p{1, 2, 0, 3};
  const auto padded = ops::pad_symmetric(x, p);
  EXPECT_EQ(padded.shape(), (Shape{1, 2, 8, 10}));
  EXPECT_TRUE(bitwise_equal(ops::crop(padded, p), x));
  // Mirror: the row above the top edge repeats the first row.
  EXPECT_EQ(padded.at(0, 0, 0, 0), x.at(0, 0, 0, 0));
  EXPECT_EQ(padded.at(0, 0, 7, 2), x.at(0, 0, 3, 2));
}
