#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace parefine;
using testutil::random_tensor;

namespace {

// Brute force over (pixel, displacement), reading through at().
Tensor<double> volume_oracle(const Tensor<double>& m, std::size_t d) {
  const long H = static_cast<long>(m.dim(2)), W = static_cast<long>(m.dim(3)), r = static_cast<long>(d / 2);
  Tensor<double> v({m.dim(0), d * d, m.dim(2), m.dim(3)});
  for (std::size_t n = 0; n < m.dim(0); ++n)
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x)
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            const long sy = y + dy, sx = x + dx;
            const double nb = (sy < 0 || sx < 0 || sy >= H || sx >= W) ? 0.0 : m.at(n, 0, sy, sx);
            v.at(n, (dy + r) * static_cast<long>(d) + dx + r, y, x) = nb * m.at(n, 0, y, x);
          }
  return v;
}

// conv1x1 -> batchnorm with the given statistics -> relu, one output at a time.
Tensor<double> bottleneck_oracle(const ParamStore<double>& s, const ConvBnRelu& b, const Tensor<double>& in,
                                 const std::vector<double>& mean, const std::vector<double>& var) {
  const auto& w = s.value(b.weight_name());
  const auto& bias = s.value(b.bias_name());
  const auto& g = s.value(b.gamma_name());
  const auto& be = s.value(b.beta_name());
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3), O = w.dim(0);
  Tensor<double> out({N, O, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          double z = bias[o];
          for (std::size_t c = 0; c < C; ++c) z += w.at(o, c, 0, 0) * in.at(n, c, y, x);
          const double bn = (z - mean[o]) / std::sqrt(var[o] + ops::kBatchNormEps) * g[o] + be[o];
          out.at(n, o, y, x) = std::max(bn, 0.0);
        }
  return out;
}

// Per-channel pre-normalization batch statistics of conv1x1(in).
std::pair<std::vector<double>, std::vector<double>> conv_stats(const ParamStore<double>& s, const ConvBnRelu& b,
                                                               const Tensor<double>& in) {
  const auto& w = s.value(b.weight_name());
  const auto& bias = s.value(b.bias_name());
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3), O = w.dim(0);
  std::vector<double> mean(O), var(O);
  for (std::size_t o = 0; o < O; ++o) {
    std::vector<double> z;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          double v = bias[o];
          for (std::size_t c = 0; c < C; ++c) v += w.at(o, c, 0, 0) * in.at(n, c, y, x);
          z.push_back(v);
        }
    for (double v : z) mean[o] += v;
    mean[o] /= static_cast<double>(z.size());
    for (double v : z) var[o] += (v - mean[o]) * (v - mean[o]);
    var[o] /= static_cast<double>(z.size());
  }
  return {mean, var};
}

// Mrsg params with every batchnorm quantity randomized so no stage is trivial.
ParamStore<double> random_mrsg(const Mrsg& m, Rng& rng) {
  ParamStore<double> s;
  m.register_params(s);
  m.init(s, rng);
  for (std::size_t i = 0; i < m.stage_count(); ++i) {
    const auto& b = m.stage(i);
    for (auto name : {b.bias_name(), b.beta_name(), b.mean_name()})
      for (std::size_t j = 0; j < s.value(name).numel(); ++j) s.value(name)[j] = rng.uniform(-0.2, 0.2);
    for (auto name : {b.gamma_name(), b.var_name()})
      for (std::size_t j = 0; j < s.value(name).numel(); ++j) s.value(name)[j] = rng.uniform(0.5, 1.5);
  }
  return s;
}

std::vector<double> as_vec(const Tensor<double>& t) { return {t.data(), t.data() + t.numel()}; }

}  // namespace

TEST(SimilarityVolume, ZerosGiveZeros) {
  const auto v = similarity_volume(Tensor<double>({1, 1, 5, 5}), 5);
  for (std::size_t i = 0; i < v.numel(); ++i) ASSERT_EQ(v[i], 0.0);
}

TEST(SimilarityVolume, CenterChannelIsSquare) {
  Rng rng(1);
  for (std::size_t d : {3, 5, 7, 9}) {
    const auto m = random_tensor({2, 1, 6, 7}, rng, 0, 1);
    const auto v = similarity_volume(m, d);
    const std::size_t c = (d * d - 1) / 2;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 7; ++x) ASSERT_EQ(v.at(n, c, y, x), m.at(n, 0, y, x) * m.at(n, 0, y, x));
  }
}

TEST(SimilarityVolume, OnesBorderCounts) {
  const Tensor<double> m({1, 1, 4, 4}, 1.0);
  const auto v = similarity_volume(m, 3);
  auto count = [&](std::size_t y, std::size_t x) {
    int ones = 0;
    for (std::size_t j = 0; j < 9; ++j) ones += v.at(0, j, y, x) == 1.0;
    return ones;
  };
  EXPECT_EQ(count(1, 1), 9);
  EXPECT_EQ(count(2, 2), 9);
  EXPECT_EQ(count(0, 0), 4);
  EXPECT_EQ(count(0, 1), 6);
}

TEST(SimilarityVolume, MatchesBruteForceExactly) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t H = 1 + rng.below(9), W = 1 + rng.below(9);
    const auto m = random_tensor({1 + rng.below(2), 1, H, W}, rng, 0, 1);
    for (std::size_t d : {3, 5, 7, 9}) EXPECT_EQ(as_vec(similarity_volume(m, d)), as_vec(volume_oracle(m, d)));
  }
}

TEST(SimilarityVolume, RejectsBadWindowAndShape) {
  const Tensor<double> m({1, 1, 4, 4});
  EXPECT_THROW(similarity_volume(m, 4), ParameterError);
  EXPECT_THROW(similarity_volume(m, 1), ParameterError);
  EXPECT_THROW(similarity_volume(Tensor<double>({1, 2, 4, 4}), 3), DimensionError);
}

TEST(Bottleneck, ShapeAndNonnegative) {
  Rng rng(3);
  const Mrsg m(5);
  auto s = random_mrsg(m, rng);
  const auto v = similarity_volume(random_tensor({2, 1, 6, 6}, rng, 0, 1), 3);
  for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
    const auto f = m.bottleneck(s, 0, v, {mode, false});
    EXPECT_EQ(f.shape(), (Shape{2, 25, 6, 6}));
    for (std::size_t i = 0; i < f.numel(); ++i) ASSERT_GE(f[i], 0.0);
  }
}

TEST(Bottleneck, MatchesComposedReference) {
  Rng rng(4);
  const Mrsg m(9);
  auto s = random_mrsg(m, rng);
  for (std::size_t i = 0; i < m.stage_count(); ++i) {
    const std::size_t d = 3 + 2 * i;
    const auto v = random_tensor({2, d * d, 5, 4}, rng, 0, 1);
    const auto& b = m.stage(i);
    const auto want_infer =
        bottleneck_oracle(s, b, v, as_vec(s.value(b.mean_name())), as_vec(s.value(b.var_name())));
    const auto got_infer = m.bottleneck(s, i, v, {Mode::kInfer, false});
    for (std::size_t j = 0; j < got_infer.numel(); ++j) ASSERT_NEAR(got_infer[j], want_infer[j], 1e-6);

    const auto [mean, var] = conv_stats(s, b, v);
    const auto want_train = bottleneck_oracle(s, b, v, mean, var);
    const auto got_train = m.bottleneck(s, i, v, {Mode::kTrain, false});
    for (std::size_t j = 0; j < got_train.numel(); ++j) ASSERT_NEAR(got_train[j], want_train[j], 1e-6);
  }
}

TEST(Bottleneck, WrongStageInputThrows) {
  const Mrsg m(7);
  ParamStore<double> s;
  m.register_params(s);
  EXPECT_THROW(m.bottleneck(s, 1, Tensor<double>({1, 9, 4, 4}), {}), DimensionError);
}

TEST(Mrsg, StageCountAndSizes) {
  for (std::size_t D : {3, 5, 7, 9}) {
    const Mrsg m(D);
    EXPECT_EQ(m.stage_count(), (D - 3) / 2);
    for (std::size_t i = 0; i < m.stage_count(); ++i) {
      EXPECT_EQ(m.stage(i).in_channels(), (3 + 2 * i) * (3 + 2 * i));
      EXPECT_EQ(m.stage(i).out_channels(), (5 + 2 * i) * (5 + 2 * i));
    }
  }
  for (std::size_t D : {0, 1, 2, 4, 11}) EXPECT_THROW(Mrsg{D}, ParameterError);
}

TEST(Mrsg, D3IsRawVolume) {
  Rng rng(5);
  const Mrsg m(3);
  ParamStore<double> s;
  const auto c = random_tensor({1, 1, 7, 7}, rng, 0, 1);
  EXPECT_EQ(as_vec(m.forward(s, c, {Mode::kTrain, false})), as_vec(similarity_volume(c, 3)));
  EXPECT_EQ(as_vec(m.forward(s, c, {Mode::kInfer, false})), as_vec(similarity_volume(c, 3)));
}

TEST(Mrsg, StepByStepOracle) {
  Rng rng(6);
  for (std::size_t D : {5, 7, 9}) {
    const Mrsg m(D);
    auto s = random_mrsg(m, rng);
    const auto c = random_tensor({2, 1, 6, 6}, rng, 0, 1);
    // Written out for D = 7: S7 + f2(S5 + f1(S3)).
    Tensor<double> hat_train = volume_oracle(c, 3), hat_infer = hat_train;
    for (std::size_t i = 0; i < m.stage_count(); ++i) {
      const auto& b = m.stage(i);
      const auto [mean, var] = conv_stats(s, b, hat_train);
      const auto f_train = bottleneck_oracle(s, b, hat_train, mean, var);
      const auto f_infer =
          bottleneck_oracle(s, b, hat_infer, as_vec(s.value(b.mean_name())), as_vec(s.value(b.var_name())));
      const auto sv = volume_oracle(c, 5 + 2 * i);
      hat_train = sv;
      hat_infer = sv;
      for (std::size_t j = 0; j < sv.numel(); ++j) {
        hat_train[j] += f_train[j];
        hat_infer[j] += f_infer[j];
      }
    }
    const auto train = m.forward(s, c, {Mode::kTrain, false});
    const auto fused = m.forward(s, c, {Mode::kInfer, false});
    MrsgCache<double> cache;
    const auto layered = m.forward(s, c, {Mode::kInfer, false}, &cache);
    ASSERT_EQ(train.shape(), (Shape{2, D * D, 6, 6}));
    for (std::size_t j = 0; j < train.numel(); ++j) {
      ASSERT_NEAR(train[j], hat_train[j], 1e-6) << "D=" << D;
      ASSERT_NEAR(fused[j], hat_infer[j], 1e-6) << "D=" << D;
      ASSERT_NEAR(layered[j], hat_infer[j], 1e-6) << "D=" << D;
      ASSERT_GE(train[j], 0.0);
    }
  }
}

TEST(Mrsg, ParamFootprintSmall) {
  const Mrsg m(5);
  EXPECT_EQ(m.param_count(), 25 * 9 + 25 * 3);
  EXPECT_LT(m.param_count() * 4.0 / 1048576.0, 0.05);
}

TEST(ApplyPaFilters, CenterDeltaIsIdentity) {
  Rng rng(7);
  for (std::size_t D : {3, 5}) {
    const auto c = random_tensor({1, 1, 6, 6}, rng, 0, 1);
    Tensor<double> bank({1, D * D, 6, 6});
    for (std::size_t p = 0; p < 36; ++p) bank[(D * D / 2) * 36 + p] = 1.0;
    const auto y = apply_pa_filters(c, bank);
    for (std::size_t p = 0; p < 36; ++p)
      if (c[p] > 1e-3) {
        ASSERT_NEAR(y[p], c[p], 1e-6);
      }
  }
}

TEST(ApplyPaFilters, OnesGiveZeroPaddedBoxMean) {
  Rng rng(8);
  const std::size_t D = 5, H = 7, W = 6;
  const auto c = random_tensor({1, 1, H, W}, rng, 0, 1);
  const Tensor<double> bank({1, D * D, H, W}, 1.0);
  const auto y = apply_pa_filters(c, bank);
  for (long py = 0; py < static_cast<long>(H); ++py)
    for (long px = 0; px < static_cast<long>(W); ++px) {
      double sum = 0;
      for (long dy = -2; dy <= 2; ++dy)
        for (long dx = -2; dx <= 2; ++dx) {
          const long sy = py + dy, sx = px + dx;
          if (sy >= 0 && sx >= 0 && sy < static_cast<long>(H) && sx < static_cast<long>(W)) sum += c.at(0, 0, sy, sx);
        }
      ASSERT_NEAR(y.at(0, 0, py, px), sum / 25.0, 1e-9);
    }
}

TEST(ApplyPaFilters, ZeroFiltersGiveZero) {
  Rng rng(9);
  const auto y = apply_pa_filters(random_tensor({2, 1, 4, 4}, rng, 0, 1), Tensor<double>({2, 9, 4, 4}));
  for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_EQ(y[i], 0.0);
}

TEST(ApplyPaFilters, SpatialMismatchThrows) {
  const Tensor<double> c({1, 1, 4, 4});
  EXPECT_THROW(apply_pa_filters(c, Tensor<double>({1, 9, 4, 5})), DimensionError);
  EXPECT_THROW(apply_pa_filters(c, Tensor<double>({1, 9, 3, 4})), DimensionError);
  EXPECT_THROW(apply_pa_filters(c, Tensor<double>({1, 8, 4, 4})), DimensionError);
}

TEST(ApplyPaFilters, ClampModeIsClampedWeightedSum) {
  Rng rng(10);
  const auto c = random_tensor({1, 1, 5, 5}, rng, 0, 1);
  const auto bank = random_tensor({1, 9, 5, 5}, rng, 0, 0.5);
  const auto y = apply_pa_filters(c, bank, FilterNormalization::kClamp);
  for (long py = 0; py < 5; ++py)
    for (long px = 0; px < 5; ++px) {
      double num = 0;
      for (long j = 0; j < 9; ++j) {
        const long sy = py + j / 3 - 1, sx = px + j % 3 - 1;
        if (sy >= 0 && sx >= 0 && sy < 5 && sx < 5) num += bank.at(0, j, py, px) * c.at(0, 0, sy, sx);
      }
      ASSERT_NEAR(y.at(0, 0, py, px), std::clamp(num, 0.0, 1.0), 1e-12);
    }
}

TEST(Refinement, PreservesUnitRange) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t D = 3 + 2 * rng.below(4);
    const Mrsg m(D);
    auto s = random_mrsg(m, rng);
    const auto c = random_tensor({1, 1, 3 + rng.below(8), 3 + rng.below(8)}, rng, 0, 1);
    const auto y = apply_pa_filters(c, m.forward(s, c, {trial % 2 ? Mode::kTrain : Mode::kInfer, false}));
    for (std::size_t i = 0; i < y.numel(); ++i) {
      ASSERT_GE(y[i], 0.0);
      ASSERT_LE(y[i], 1.0);
    }
  }
}

TEST(ExportFilters, GridGeometry) {
  const Tensor<float> bank({1, 25, 64, 64}, 0.5f);
  const auto img = export_filters(bank, Region{10, 10, 41, 41}, 8);
  EXPECT_EQ(tile_count(41, 8), 6u);
  EXPECT_EQ(img.width, 6u * 5 + 5);
  EXPECT_EQ(img.height, 6u * 5 + 5);
  // Separators in column 5, tiles flat mid-gray.
  for (std::size_t y = 0; y < img.height; ++y) EXPECT_EQ(img.at(5, y), kSeparatorGray);
  EXPECT_EQ(img.at(0, 0), kFlatFilterGray);
  EXPECT_EQ(img.at(34, 34), kFlatFilterGray);
  EXPECT_THROW(export_filters(bank, Region{30, 30, 41, 41}, 8), DimensionError);
  EXPECT_THROW(export_filters(bank, Region{0, 0, 41, 41}, 0), ParameterError);
}

TEST(ExportFilters, OneHotIsSingleWhitePixel) {
  Tensor<double> bank({1, 9, 4, 4});
  bank.at(0, 7, 0, 0) = 0.3;  // (dy, dx) = (1, 0)
  const auto img = export_filters(bank, Region{0, 0, 1, 1}, 1);
  ASSERT_EQ(img.width, 3u);
  for (std::size_t j = 0; j < 9; ++j) EXPECT_EQ(img.at(j % 3, j / 3), j == 7 ? 255 : 0);
}

TEST(ExportFilters, RampIsMonotone) {
  Tensor<double> bank({1, 25, 2, 2});
  for (std::size_t j = 0; j < 25; ++j) bank.at(0, j, 1, 1) = 0.1 + 0.02 * static_cast<double>(j);
  const auto img = export_filters(bank, Region{1, 1, 1, 1}, 1);
  EXPECT_EQ(img.at(0, 0), 0);
  EXPECT_EQ(img.at(4, 4), 255);
  for (std::size_t j = 1; j < 25; ++j) {
    EXPECT_GT(img.at(j % 5, j / 5), img.at((j - 1) % 5, (j - 1) / 5));
    EXPECT_NEAR(img.at(j % 5, j / 5), 255.0 * static_cast<double>(j) / 24.0, 0.5 + 1e-9);
  }
}
