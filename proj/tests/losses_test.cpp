#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace parefine;
using testutil::random_tensor;

namespace {

Tensor<double> binary(const Shape& s, Rng& rng, double p = 0.3) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.bernoulli(p) ? 1.0 : 0.0;
  return t;
}

double loop_norm(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST(Dice, PerfectOverlap) {
  Rng rng(1);
  const auto g = binary({1, 8, 8}, rng);
  EXPECT_LT(dice_loss(g, g), 1e-4);
}

TEST(Dice, Disjoint) {
  Rng rng(2);
  const auto g = binary({1, 8, 8}, rng);
  Tensor<double> y(g.shape());
  for (std::size_t i = 0; i < g.numel(); ++i) y[i] = 1.0 - g[i];
  EXPECT_GT(dice_loss(y, g), 0.999);
}

TEST(Dice, HalfOnQuarterForeground) {
  const Tensor<double> y({1, 4, 4}, 0.5);
  Tensor<double> g({1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) g[i] = 1.0;
  // 1 - (2 * 4 * 0.5 + eps) / (16 * 0.25 + 4 + eps)
  EXPECT_NEAR(dice_loss(y, g), 1.0 - (4.0 + kDiceEps) / (8.0 + kDiceEps), 1e-15);
  EXPECT_NEAR(dice_loss(y, g), 0.5, 1e-6);
}

TEST(Dice, StaysInUnitInterval) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto y = random_tensor({2, 1, 5, 5}, rng, 0, 1);
    const double l = dice_loss(y, binary(y.shape(), rng, rng.uniform()));
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0);
  }
}

TEST(Dice, BatchIsMeanOfElements) {
  Rng rng(4);
  const auto y = random_tensor({3, 1, 4, 4}, rng, 0, 1);
  const auto g = binary(y.shape(), rng);
  double mean = 0;
  for (std::size_t n = 0; n < 3; ++n) mean += dice_loss(ops::slice_batch(y, n), ops::slice_batch(g, n)) / 3.0;
  EXPECT_NEAR(dice_loss(y, g), mean, 1e-14);
}

TEST(Dice, ShapeMismatchThrows) {
  EXPECT_THROW(dice_loss(Tensor<double>({1, 4, 4}), Tensor<double>({1, 4, 5})), DimensionError);
}

TEST(Dice, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  const auto y = random_tensor({2, 1, 4, 4}, rng, 0.05, 0.95);
  const auto g = binary(y.shape(), rng);
  const auto rep = grad_check([&](const std::vector<Tensor<double>>& in) { return dice_loss(in[0], g); }, {y},
                              {dice_loss_backward(y, g)});
  EXPECT_TRUE(rep.pass()) << rep.max_error();
}

TEST(Reg, ZeroForEqualMaps) {
  Rng rng(6);
  const auto a = random_tensor({1, 6, 6}, rng, 0, 1);
  EXPECT_EQ(reg_loss(a, a), 0.0);
  const auto g = reg_loss_backward(a, a);
  for (std::size_t i = 0; i < g.first.numel(); ++i) ASSERT_EQ(g.first[i], 0.0);
}

TEST(Reg, SinglePixelDifference) {
  Rng rng(7);
  const auto a = random_tensor({1, 6, 6}, rng, 0, 1);
  auto b = a;
  b[17] -= 0.375;
  EXPECT_NEAR(reg_loss(a, b), 0.375, 1e-15);
}

TEST(Reg, MatchesLoopOracle) {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const auto a = random_tensor({1, 9, 7}, rng, 0, 1), b = random_tensor({1, 9, 7}, rng, 0, 1);
    EXPECT_NEAR(reg_loss(a, b), loop_norm(a, b), 1e-6);
  }
}

TEST(Reg, SymmetricAndTriangle) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    const auto a = random_tensor({1, 5, 5}, rng, 0, 1), b = random_tensor({1, 5, 5}, rng, 0, 1),
               c = random_tensor({1, 5, 5}, rng, 0, 1);
    EXPECT_EQ(reg_loss(a, b), reg_loss(b, a));
    EXPECT_LE(reg_loss(a, c), reg_loss(a, b) + reg_loss(b, c) + 1e-12);
  }
}

TEST(Reg, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  const auto a = random_tensor({2, 1, 3, 3}, rng, 0, 1), b = random_tensor({2, 1, 3, 3}, rng, 0, 1);
  const auto g = reg_loss_backward(a, b);
  const auto rep = grad_check([](const std::vector<Tensor<double>>& in) { return reg_loss(in[0], in[1]); }, {a, b},
                              {g.first, g.second});
  EXPECT_TRUE(rep.pass()) << rep.max_error();
}

TEST(Total, LambdaZeroIsDice) {
  Rng rng(11);
  const auto y1 = random_tensor({1, 1, 4, 4}, rng, 0, 1), y2 = random_tensor({1, 1, 4, 4}, rng, 0, 1);
  const auto g = binary(y1.shape(), rng);
  const auto t = total_loss(y1, y2, g, 0.0);
  EXPECT_EQ(t.value.total, dice_loss(y1, g));
  for (std::size_t i = 0; i < y2.numel(); ++i) ASSERT_EQ(t.grad_aux[i], 0.0);
}

TEST(Total, EqualBranchesIgnoreLambda) {
  Rng rng(12);
  const auto y = random_tensor({1, 1, 4, 4}, rng, 0, 1);
  const auto g = binary(y.shape(), rng);
  for (double lambda : {0.0, 0.1, 5.0}) EXPECT_EQ(total_loss(y, y, g, lambda).value.total, dice_loss(y, g));
}

TEST(Total, ExactDecomposition) {
  const Tensor<double> y1({1, 4, 4}, 0.5);
  Tensor<double> g({1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) g[i] = 1.0;
  auto y2 = y1;
  y2[3] = 0.125;
  const auto t = total_loss(y1, y2, g, 0.1);
  EXPECT_NEAR(t.value.l_s, 0.5, 1e-6);
  EXPECT_EQ(t.value.l_r, 0.375);
  EXPECT_EQ(t.value.total, t.value.l_s + 0.1 * t.value.l_r);
  EXPECT_EQ(t.value.lambda, 0.1);
}

TEST(Total, GradientReachesBothBranches) {
  Rng rng(13);
  const auto y1 = random_tensor({2, 1, 4, 4}, rng, 0.05, 0.95), y2 = random_tensor({2, 1, 4, 4}, rng, 0.05, 0.95);
  const auto g = binary(y1.shape(), rng);
  const auto t = total_loss(y1, y2, g, 0.3);
  const auto rep = grad_check(
      [&](const std::vector<Tensor<double>>& in) { return total_loss(in[0], in[1], g, 0.3).value.total; }, {y1, y2},
      {t.grad_main, t.grad_aux});
  EXPECT_TRUE(rep.pass()) << rep.max_error();
}
