#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "parefine/gradcheck.hpp"
#include "parefine/losses.hpp"
#include "parefine/model.hpp"
#include "parefine/ops.hpp"
#include "parefine/rce.hpp"

namespace parefine {

/// Finite-difference checks of every hand-written backward pass, in double.
/// Each case draws its shapes and values from the Rng it is given, so one
/// case can be run on as many random instances as wanted.
struct GradCase {
  std::string name;
  double tolerance;
  std::function<GradCheckReport(Rng&, const GradCheckOptions&)> run;
  // Cases through ReLU networks use a smaller step so the central difference
  // does not straddle a kink.
  double step = 1e-4;
};

struct GradSuiteEntry {
  std::string name;
  std::size_t instance = 0;
  GradCheckReport report;
};

namespace gcs_detail {

using Tensors = std::vector<Tensor<double>>;

inline Tensor<double> normal(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline Tensor<double> uniform(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Magnitudes in [0.1, 1] with random sign: keeps ReLU inputs off the kink.
inline Tensor<double> off_zero(const Shape& s, Rng& rng) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 1.0);
  return t;
}

// Distinct values spaced 0.01 apart in random order: no maxpool ties.
inline Tensor<double> distinct(const Shape& s, Rng& rng) {
  Tensor<double> t(s);
  const std::size_t n = t.numel();
  for (std::size_t i = 0; i < n; ++i) t[i] = 0.01 * static_cast<double>(i);
  for (std::size_t i = n; i > 1; --i) std::swap(t[i - 1], t[rng.below(i)]);
  return t;
}

inline Tensor<double> binary(const Shape& s, Rng& rng, double p = 0.3) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.bernoulli(p) ? 1.0 : 0.0;
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) throw DimensionError("grad check: projection shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// Scalarises an op as <f(inputs), R> for a random R; the backward receives R
// as the upstream gradient.
template <typename Fwd, typename Bwd>
GradCheckReport check_op(Tensors inputs, const std::vector<std::string>& names, Fwd fwd, Bwd bwd, Rng& rng,
                         const GradCheckOptions& opt) {
  const Tensor<double> probe = fwd(inputs);
  const Tensor<double> r = normal(probe.shape(), rng);
  const Tensors analytic = bwd(inputs, r);
  return grad_check([&](const Tensors& in) { return dot(fwd(in), r); }, std::move(inputs), analytic, opt, names);
}

// Inputs are `extra` followed by the named store entries. `loss(store, extra)`
// returns the scalar; `grads(store, extra)` runs forward + backward, leaving
// parameter gradients in the store and returning gradients for `extra`.
template <typename Loss, typename Grads>
GradCheckReport check_params(const ParamStore<double>& base, const std::vector<std::string>& params, Tensors extra,
                             std::vector<std::string> names, Loss loss, Grads grads, const GradCheckOptions& opt) {
  const std::size_t n_extra = extra.size();
  ParamStore<double> store = base;
  store.zero_grad();
  Tensors analytic = grads(store, extra);
  Tensors inputs = extra;
  for (const auto& p : params) {
    inputs.push_back(store.value(p));
    analytic.push_back(store.grad(p));
    names.push_back(p);
  }
  auto f = [&](const Tensors& in) {
    ParamStore<double> s = base;
    for (std::size_t i = 0; i < params.size(); ++i) s.value(params[i]) = in[n_extra + i];
    return loss(s, Tensors(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(n_extra)));
  };
  return grad_check(f, std::move(inputs), analytic, opt, names);
}

// Trainable entries of a block, BN running statistics excluded.
inline std::vector<std::string> block_params(const ConvBnRelu& b) {
  return {b.weight_name(), b.bias_name(), b.gamma_name(), b.beta_name()};
}

inline std::vector<std::string> trainable_names(const ParamStore<double>& s) {
  std::vector<std::string> out;
  for (const auto& e : s.entries())
    if (e.trainable) out.push_back(e.name);
  return out;
}

// Batchnorm in train mode with frozen running stats keeps the loss a pure
// function of the inputs across finite-difference evaluations.
inline const PassOptions kFrozenTrain{Mode::kTrain, false};

inline GradCheckOptions sampled(GradCheckOptions o, std::size_t coords) {
  o.max_coords = coords;
  return o;
}

}  // namespace gcs_detail

inline std::vector<GradCase> gradcheck_cases() {
  using namespace gcs_detail;
  constexpr double kOpTol = 1e-4, kNetTol = 1e-3, kNetStep = 1e-6;
  std::vector<GradCase> cases;

  cases.push_back({"conv2d", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t n = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3), k = 1 + 2 * rng.below(2);
    const std::size_t h = pick(rng, 4, 7), w = pick(rng, 4, 7), stride = pick(rng, 1, 2), pad = rng.below(k / 2 + 2);
    return check_op({normal({n, ci, h, w}, rng), normal({co, ci, k, k}, rng), normal({co}, rng)},
                    {"input", "weight", "bias"},
                    [=](const Tensors& in) { return ops::conv2d(in[0], in[1], in[2], stride, pad); },
                    [=](const Tensors& in, const Tensor<double>& g) {
                      auto r = ops::conv2d_backward(in[0], in[1], g, stride, pad);
                      return Tensors{r.input, r.weight, r.bias};
                    },
                    rng, o);
  }});

  cases.push_back({"batchnorm_train", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 3), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    auto fwd = [c](const Tensors& in, ops::BatchNormCache<double>* cache) {
      Tensor<double> rm({c}), rv({c}, 1.0);
      return ops::batchnorm(in[0], in[1], in[2], rm, rv, Mode::kTrain, false, cache);
    };
    return check_op({normal({n, c, h, w}, rng, 2.0), uniform({c}, rng, 0.5, 1.5), normal({c}, rng)},
                    {"input", "gamma", "beta"}, [&](const Tensors& in) { return fwd(in, nullptr); },
                    [&](const Tensors& in, const Tensor<double>& g) {
                      ops::BatchNormCache<double> cache;
                      fwd(in, &cache);
                      auto r = ops::batchnorm_backward(g, in[1], cache);
                      return Tensors{r.input, r.gamma, r.beta};
                    },
                    rng, o);
  }});

  cases.push_back({"relu", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    return check_op({off_zero({pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 6), pick(rng, 2, 6)}, rng)}, {"input"},
                    [](const Tensors& in) { return ops::relu(in[0]); },
                    [](const Tensors& in, const Tensor<double>& g) {
                      return Tensors{ops::relu_backward(ops::relu(in[0]), g)};
                    },
                    rng, o);
  }});

  cases.push_back({"sigmoid", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    return check_op({normal({pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 6), pick(rng, 2, 6)}, rng, 3.0)},
                    {"input"}, [](const Tensors& in) { return ops::sigmoid(in[0]); },
                    [](const Tensors& in, const Tensor<double>& g) {
                      return Tensors{ops::sigmoid_backward(ops::sigmoid(in[0]), g)};
                    },
                    rng, o);
  }});

  cases.push_back({"mul", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const Shape s{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
    return check_op({normal(s, rng), normal(s, rng)}, {"a", "b"},
                    [](const Tensors& in) { return ops::mul(in[0], in[1]); },
                    [](const Tensors& in, const Tensor<double>& g) {
                      auto r = ops::mul_backward(in[0], in[1], g);
                      return Tensors{r.a, r.b};
                    },
                    rng, o);
  }});

  cases.push_back({"maxpool2", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const Shape s{pick(rng, 1, 2), pick(rng, 1, 3), 2 * pick(rng, 1, 4), 2 * pick(rng, 1, 4)};
    return check_op({distinct(s, rng)}, {"input"}, [](const Tensors& in) { return ops::maxpool2(in[0]); },
                    [](const Tensors& in, const Tensor<double>& g) {
                      std::vector<std::size_t> arg;
                      ops::maxpool2(in[0], &arg);
                      return Tensors{ops::maxpool2_backward(g, arg, in[0].shape())};
                    },
                    rng, o);
  }});

  cases.push_back({"upsample_nearest2", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    return check_op({normal({pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng)}, {"input"},
                    [](const Tensors& in) { return ops::upsample_nearest2(in[0]); },
                    [](const Tensors&, const Tensor<double>& g) { return Tensors{ops::upsample_nearest2_backward(g)}; },
                    rng, o);
  }});

  cases.push_back({"concat_channels", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 5), w = pick(rng, 2, 5), ca = pick(rng, 1, 3);
    return check_op({normal({n, ca, h, w}, rng), normal({n, pick(rng, 1, 3), h, w}, rng)}, {"a", "b"},
                    [](const Tensors& in) { return ops::concat_channels(in[0], in[1]); },
                    [ca](const Tensors&, const Tensor<double>& g) {
                      auto r = ops::concat_channels_backward(g, ca);
                      return Tensors{r.a, r.b};
                    },
                    rng, o);
  }});

  cases.push_back({"pad_symmetric", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t h = pick(rng, 3, 6), w = pick(rng, 3, 6);
    const ops::Padding p{rng.below(3), rng.below(3), rng.below(3), rng.below(3)};
    return check_op({normal({pick(rng, 1, 2), pick(rng, 1, 2), h, w}, rng)}, {"input"},
                    [p](const Tensors& in) { return ops::pad_symmetric(in[0], p); },
                    [p](const Tensors&, const Tensor<double>& g) { return Tensors{ops::pad_symmetric_backward(g, p)}; },
                    rng, o);
  }});

  cases.push_back({"crop", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const ops::Padding p{rng.below(3), rng.below(3), rng.below(3), rng.below(3)};
    const Shape s{pick(rng, 1, 2), pick(rng, 1, 2), p.top + p.bottom + pick(rng, 1, 4), p.left + p.right + pick(rng, 1, 4)};
    return check_op({normal(s, rng)}, {"input"}, [p](const Tensors& in) { return ops::crop(in[0], p); },
                    [p](const Tensors&, const Tensor<double>& g) { return Tensors{ops::crop_backward(g, p)}; }, rng,
                    o);
  }});

  for (std::size_t d : {3, 5, 7}) {
    cases.push_back({"similarity_volume_d" + std::to_string(d), kOpTol, [d](Rng& rng, const GradCheckOptions& o) {
      return check_op({uniform({pick(rng, 1, 2), 1, pick(rng, 3, 7), pick(rng, 3, 7)}, rng, 0.0, 1.0)}, {"coarse"},
                      [d](const Tensors& in) { return similarity_volume(in[0], d); },
                      [d](const Tensors& in, const Tensor<double>& g) {
                        return Tensors{similarity_volume_backward(in[0], d, g)};
                      },
                      rng, o);
    }});
  }

  for (std::size_t d : {3, 5}) {
    for (auto norm : {FilterNormalization::kSum, FilterNormalization::kClamp}) {
      const std::string tag = norm == FilterNormalization::kSum ? "sum" : "clamp";
      cases.push_back({"apply_pa_filters_d" + std::to_string(d) + "_" + tag, kOpTol,
                       [d, norm](Rng& rng, const GradCheckOptions& o) {
        const std::size_t n = pick(rng, 1, 2), h = pick(rng, 3, 6), w = pick(rng, 3, 6);
        // Clamp mode is linear between the clamps; a small bank keeps sums inside (0, 1).
        const double hi = norm == FilterNormalization::kSum ? 1.0 : 0.6 / static_cast<double>(d * d);
        return check_op({uniform({n, 1, h, w}, rng, 0.05, 1.0), uniform({n, d * d, h, w}, rng, 0.1 * hi, hi)},
                        {"coarse", "bank"},
                        [norm](const Tensors& in) { return apply_pa_filters(in[0], in[1], norm); },
                        [norm](const Tensors& in, const Tensor<double>& g) {
                          auto r = apply_pa_filters_backward(in[0], in[1], g, norm);
                          return Tensors{r.coarse, r.bank};
                        },
                        rng, o);
      }});
    }
  }

  cases.push_back({"dice_loss", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const Shape s{pick(rng, 1, 3), 1, pick(rng, 2, 6), pick(rng, 2, 6)};
    const Tensor<double> g = binary(s, rng), y = uniform(s, rng, 0.01, 0.99);
    return grad_check([&](const Tensors& in) { return dice_loss(in[0], g); }, {y}, {dice_loss_backward(y, g)}, o,
                      {"y"});
  }});

  cases.push_back({"reg_loss", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const Shape s{pick(rng, 1, 3), 1, pick(rng, 2, 6), pick(rng, 2, 6)};
    const Tensor<double> y1 = uniform(s, rng, 0, 1), y2 = uniform(s, rng, 0, 1);
    const auto r = reg_loss_backward(y1, y2);
    return grad_check([](const Tensors& in) { return reg_loss(in[0], in[1]); }, {y1, y2}, {r.first, r.second}, o,
                      {"y1", "y2"});
  }});

  cases.push_back({"total_loss", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const Shape s{pick(rng, 1, 3), 1, pick(rng, 2, 6), pick(rng, 2, 6)};
    const Tensor<double> y1 = uniform(s, rng, 0.01, 0.99), y2 = uniform(s, rng, 0.01, 0.99), g = binary(s, rng);
    const double lambda = rng.uniform(0.05, 1.0);
    const auto t = total_loss(y1, y2, g, lambda);
    return grad_check([&](const Tensors& in) { return total_loss(in[0], in[1], g, lambda).value.total; }, {y1, y2},
                      {t.grad_main, t.grad_aux}, o, {"y1", "y2"});
  }});

  cases.push_back({"conv_bn_relu", kOpTol, [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), k = 1 + 2 * rng.below(2);
    const ConvBnRelu block("block", ci, co, k);
    ParamStore<double> store;
    block.register_params(store);
    block.init(store, rng);
    store.value(block.gamma_name()) = uniform({co}, rng, 0.5, 1.5);
    store.value(block.beta_name()) = normal({co}, rng, 0.3);
    const Tensor<double> x = normal({pick(rng, 1, 2), ci, pick(rng, 3, 6), pick(rng, 3, 6)}, rng);
    Tensor<double> r;
    auto loss = [&](ParamStore<double>& s, const Tensors& in) {
      return dot(block.forward<double>(s, in[0], kFrozenTrain, nullptr), r);
    };
    {
      ParamStore<double> s = store;
      r = normal(block.forward<double>(s, x, kFrozenTrain, nullptr).shape(), rng);
    }
    return check_params(store, block_params(block), {x}, {"input"}, loss,
                        [&](ParamStore<double>& s, const Tensors& in) {
                          ConvBnReluCache<double> cache;
                          block.forward(s, in[0], kFrozenTrain, &cache);
                          return Tensors{block.backward(s, cache, r)};
                        },
                        o);
  }, kNetStep});

  // One MRSG bottleneck f: similarity volume of size d in, (d + 2)^2 channels out.
  for (std::size_t d : {3, 5, 7}) {
    cases.push_back({"mrsg_bottleneck_d" + std::to_string(d), kOpTol, [d](Rng& rng, const GradCheckOptions& o) {
      const Mrsg mrsg(d + 2);
      const std::size_t stage = (d - 3) / 2;
      ParamStore<double> store;
      mrsg.register_params(store);
      mrsg.init(store, rng);
      const Tensor<double> vol =
          similarity_volume(uniform({pick(rng, 1, 2), 1, pick(rng, 3, 5), pick(rng, 3, 5)}, rng, 0, 1), d);
      Tensor<double> r;
      {
        ParamStore<double> s = store;
        r = normal(mrsg.bottleneck(s, stage, vol, kFrozenTrain).shape(), rng);
      }
      return check_params(store, block_params(mrsg.stage(stage)), {vol}, {"volume"},
                          [&](ParamStore<double>& s, const Tensors& in) {
                            return dot(mrsg.bottleneck(s, stage, in[0], kFrozenTrain), r);
                          },
                          [&](ParamStore<double>& s, const Tensors& in) {
                            ConvBnReluCache<double> cache;
                            mrsg.bottleneck(s, stage, in[0], kFrozenTrain, &cache);
                            return Tensors{mrsg.stage(stage).backward(s, cache, r)};
                          },
                          sampled(o, 60));
    }, kNetStep});
  }

  // Whole MRSG followed by filter application.
  for (std::size_t d : {3, 5}) {
    cases.push_back({"mrsg_apply_d" + std::to_string(d), kOpTol, [d](Rng& rng, const GradCheckOptions& o) {
      const Mrsg mrsg(d);
      ParamStore<double> store;
      mrsg.register_params(store);
      mrsg.init(store, rng);
      const Tensor<double> coarse = uniform({pick(rng, 1, 2), 1, pick(rng, 4, 6), pick(rng, 4, 6)}, rng, 0.05, 1.0);
      const Tensor<double> r = normal(coarse.shape(), rng);
      auto refine = [&](ParamStore<double>& s, const Tensor<double>& c, MrsgCache<double>* cache) {
        return apply_pa_filters(c, mrsg.forward(s, c, kFrozenTrain, cache));
      };
      return check_params(store, trainable_names(store), {coarse}, {"coarse"},
                          [&](ParamStore<double>& s, const Tensors& in) { return dot(refine(s, in[0], nullptr), r); },
                          [&](ParamStore<double>& s, const Tensors& in) {
                            MrsgCache<double> cache;
                            const Tensor<double> bank = mrsg.forward(s, in[0], kFrozenTrain, &cache);
                            auto pa = apply_pa_filters_backward(in[0], bank, r);
                            ops::accumulate(pa.coarse, mrsg.backward(s, cache, pa.bank));
                            return Tensors{pa.coarse};
                          },
                          sampled(o, 60));
    }, kNetStep});
  }

  cases.push_back({"unet_3x16x16", kNetTol, [](Rng& rng, const GradCheckOptions& o) {
    UNetConfig cfg;
    cfg.depth = 3;
    cfg.base_width = 2;
    const UNet unet(cfg);
    ParamStore<double> store;
    unet.register_params(store);
    unet.init(store, rng);
    // 16 is a multiple of the size step; odd sizes exercise the pad/crop path.
    const std::size_t h = rng.bernoulli(0.5) ? 16 : 15;
    const Tensor<double> x = uniform({1, 3, h, 16}, rng, 0, 1);
    const Tensor<double> r = normal({1, 1, h, 16}, rng);
    // The backbone skips the image gradient, so only parameters are checked.
    return check_params(store, trainable_names(store), {}, {},
                        [&](ParamStore<double>& s, const Tensors&) { return dot(unet.forward(s, x, kFrozenTrain), r); },
                        [&](ParamStore<double>& s, const Tensors&) {
                          UNetCache<double> cache;
                          unet.forward(s, x, kFrozenTrain, &cache);
                          unet.backward(s, cache, r);
                          return Tensors{};
                        },
                        sampled(o, 12));
  }, kNetStep});

  // Backbone -> MRSG -> filter application -> dice + lambda * reg, through
  // both branches with a fixed erasure set.
  cases.push_back({"full_composite", kNetTol, [](Rng& rng, const GradCheckOptions& o) {
    ModelConfig mc;
    mc.unet.depth = 3;
    mc.unet.base_width = 2;
    mc.filter_size = rng.bernoulli(0.5) ? 3 : 5;
    const Model model(mc);
    ParamStore<double> store = model.make_params<double>(rng.next_u64());
    const std::size_t n = pick(rng, 1, 2);
    const Tensor<double> x = uniform({n, 3, 16, 16}, rng, 0, 1);
    const Tensor<double> g = binary({n, 1, 16, 16}, rng);
    const double lambda = rng.uniform(0.05, 0.5);
    std::vector<Tensor<double>> erased;
    {
      ParamStore<double> s = store;
      const auto coarse = model.forward(s, x, kFrozenTrain).coarse;
      for (std::size_t i = 0; i < n; ++i)
        erased.push_back(erase(ops::slice_batch(x, i), select_topk_confident(ops::slice_batch(coarse, i), 3)));
    }
    const Tensor<double> x_aux = ops::stack_batch(erased);
    auto loss = [&](ParamStore<double>& s, const Tensors&) {
      const auto y1 = model.forward(s, x, kFrozenTrain).refined;
      const auto y2 = model.forward(s, x_aux, kFrozenTrain).refined;
      return total_loss(y1, y2, g, lambda).value.total;
    };
    return check_params(store, trainable_names(store), {}, {}, loss,
                        [&](ParamStore<double>& s, const Tensors&) {
                          ModelCache<double> c1, c2;
                          const auto y1 = model.forward(s, x, kFrozenTrain, &c1).refined;
                          const auto y2 = model.forward(s, x_aux, kFrozenTrain, &c2).refined;
                          const auto t = total_loss(y1, y2, g, lambda);
                          model.backward(s, c2, t.grad_aux);
                          model.backward(s, c1, t.grad_main);
                          return Tensors{};
                        },
                        sampled(o, 8));
  }, kNetStep});

  return cases;
}

/// Runs every case whose name contains `filter` on `instances` random draws.
inline std::vector<GradSuiteEntry> run_gradcheck_suite(std::size_t instances = 3, std::uint64_t seed = 0,
                                                       const std::string& filter = "") {
  std::vector<GradSuiteEntry> out;
  const Rng root = Rng(seed);
  std::uint64_t id = 0;
  for (const auto& c : gradcheck_cases()) {
    ++id;
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng = root.split(id).split(i);
      GradCheckOptions o;
      o.step = c.step;
      o.tolerance = c.tolerance;
      o.seed = rng.next_u64();
      out.push_back({c.name, i, c.run(rng, o)});
    }
  }
  return out;
}

}  // namespace parefine
