#include <gtest/gtest.h>

#include "parefine/gradcheck_suite.hpp"
#include "test_util.hpp"

using namespace parefine;
using testutil::random_tensor;

TEST(GradCheck, LinearOp) {
  Rng rng(1);
  const auto x = random_tensor({5}, rng);
  Tensor<double> g({5}, 2.0);
  const auto rep = grad_check(
      [](const std::vector<Tensor<double>>& in) {
        double s = 0;
        for (std::size_t i = 0; i < in[0].numel(); ++i) s += 2 * in[0][i];
        return s;
      },
      {x}, {g}, {.step = 1e-4, .tolerance = 1e-10});
  EXPECT_TRUE(rep.pass()) << rep.max_error();
}

TEST(GradCheck, DetectsWrongGradient) {
  Tensor<double> x({3}, {1, 2, 3});
  Tensor<double> wrong({3}, {2, 4, 7});  // true gradient of sum(x^2) is 2x = {2, 4, 6}
  const auto rep = grad_check(
      [](const std::vector<Tensor<double>>& in) {
        double s = 0;
        for (std::size_t i = 0; i < 3; ++i) s += in[0][i] * in[0][i];
        return s;
      },
      {x}, {wrong}, {}, {"x"});
  EXPECT_FALSE(rep.pass());
  EXPECT_EQ(rep.inputs[0].name, "x");
  EXPECT_NEAR(rep.inputs[0].max_rel_error, 1.0 / 7.0, 1e-6);
}

TEST(GradCheck, ShapeMismatchIsAnError) {
  EXPECT_THROW(grad_check([](const auto&) { return 0.0; }, {Tensor<double>({2})}, {Tensor<double>({3})}),
               DimensionError);
}

TEST(GradCheck, Conv2dRandomInstance) {
  Rng rng(2);
  const auto x = random_tensor({1, 2, 6, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  const auto r = random_tensor({1, 3, 6, 6}, rng);
  auto loss = [&](const std::vector<Tensor<double>>& in) {
    const auto y = ops::conv2d(in[0], in[1], in[2], 1, 1);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * r[i];
    return s;
  };
  const auto g = ops::conv2d_backward(x, w, r, 1, 1);
  const auto rep = grad_check(loss, {x, w, b}, {g.input, g.weight, g.bias});
  EXPECT_LT(rep.max_error(), 1e-5);
}

TEST(GradCheck, SuiteCoversEveryOp) {
  std::set<std::string> names;
  for (const auto& c : gradcheck_cases()) names.insert(c.name);
  for (const char* want : {"conv2d", "batchnorm_train", "relu", "sigmoid", "mul", "maxpool2", "upsample_nearest2",
                           "concat_channels", "pad_symmetric", "crop", "similarity_volume_d3", "apply_pa_filters_d5_sum",
                           "dice_loss", "reg_loss", "total_loss", "conv_bn_relu", "mrsg_bottleneck_d3", "mrsg_apply_d3",
                           "mrsg_apply_d5", "unet_3x16x16", "full_composite"})
    EXPECT_TRUE(names.count(want)) << want;
}

class SuiteCase : public ::testing::TestWithParam<std::string> {};

TEST_P(SuiteCase, PassesOnThreeInstances) {
  const auto results = run_gradcheck_suite(3, 0, GetParam());
  ASSERT_GE(results.size(), 3u);
  for (const auto& r : results) {
    if (r.name != GetParam()) continue;
    EXPECT_TRUE(r.report.pass()) << r.name << " instance " << r.instance << " error " << r.report.max_error();
    EXPECT_LE(r.report.tolerance, 1e-3);
  }
}

INSTANTIATE_TEST_SUITE_P(All, SuiteCase, ::testing::ValuesIn([] {
                           std::vector<std::string> v;
                           for (const auto& c : gradcheck_cases()) v.push_back(c.name);
                           return v;
                         }()),
                         [](const auto& info) { return info.param; });

TEST(GradCheck, MrsgHeadCompositeTight) {
  // The MRSG + filter application composite at 1e-4 on a 1 x 8 x 8 map.
  for (std::size_t d : {3, 5}) {
    const Mrsg mrsg(d);
    Rng rng(40 + d);
    ParamStore<double> store;
    mrsg.register_params(store);
    mrsg.init(store, rng);
    const auto coarse = random_tensor({1, 1, 8, 8}, rng, 0.05, 1.0);
    const auto r = random_tensor({1, 1, 8, 8}, rng);
    const PassOptions opts{Mode::kTrain, false};
    auto loss = [&](const std::vector<Tensor<double>>& in) {
      ParamStore<double> s = store;
      const auto y = apply_pa_filters(in[0], mrsg.forward(s, in[0], opts));
      double v = 0;
      for (std::size_t i = 0; i < y.numel(); ++i) v += y[i] * r[i];
      return v;
    };
    ParamStore<double> s = store;
    MrsgCache<double> cache;
    const auto bank = mrsg.forward(s, coarse, opts, &cache);
    auto pa = apply_pa_filters_backward(coarse, bank, r);
    ops::accumulate(pa.coarse, mrsg.backward(s, cache, pa.bank));
    const auto rep = grad_check(loss, {coarse}, {pa.coarse}, {.step = 1e-6, .tolerance = 1e-4});
    EXPECT_TRUE(rep.pass()) << "D=" << d << " error " << rep.max_error();
  }
}
