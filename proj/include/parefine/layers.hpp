#pragma once

#include <cstddef>
#include <string>

#include "parefine/ops.hpp"
#include "parefine/param_store.hpp"
#include "parefine/rng.hpp"

namespace parefine {

struct PassOptions {
  Mode mode = Mode::kTrain;
  // Only the main branch moves batchnorm running statistics.
  bool update_running_stats = true;
  double bn_momentum = ops::kBatchNormMomentum;
};

template <typename T>
struct ConvBnReluCache {
  Tensor<T> input;
  ops::BatchNormCache<T> bn;
  Tensor<T> output;
};

/// conv(k x k, same padding) -> batchnorm -> ReLU, parameters stored under `prefix`.
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(std::string prefix, std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
      : prefix_(std::move(prefix)), cin_(in_channels), cout_(out_channels), k_(kernel) {}

  static std::size_t param_count(std::size_t cin, std::size_t cout, std::size_t k) {
    return cout * cin * k * k + cout + 2 * cout;
  }
  std::size_t param_count() const { return param_count(cin_, cout_, k_); }

  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }
  const std::string& prefix() const { return prefix_; }

  std::string weight_name() const { return prefix_ + "/conv/weight"; }
  std::string bias_name() const { return prefix_ + "/conv/bias"; }
  std::string gamma_name() const { return prefix_ + "/bn/gamma"; }
  std::string beta_name() const { return prefix_ + "/bn/beta"; }
  std::string mean_name() const { return prefix_ + "/bn/running_mean"; }
  std::string var_name() const { return prefix_ + "/bn/running_var"; }

  template <typename T>
  void register_params(ParamStore<T>& store) const {
    store.add(weight_name(), {cout_, cin_, k_, k_});
    store.add(bias_name(), {cout_});
    store.add(gamma_name(), {cout_});
    store.add(beta_name(), {cout_});
    store.add(mean_name(), {cout_}, false);
    store.add(var_name(), {cout_}, false);
  }

  template <typename T>
  void init(ParamStore<T>& store, Rng& rng) const {
    kaiming_uniform(store.value(weight_name()), cin_ * k_ * k_, rng);
    store.value(bias_name()).fill(T(0));
    store.value(gamma_name()).fill(T(1));
    store.value(beta_name()).fill(T(0));
    store.value(mean_name()).fill(T(0));
    store.value(var_name()).fill(T(1));
  }

  template <typename T>
  Tensor<T> forward(ParamStore<T>& store, const Tensor<T>& x, const PassOptions& opts,
                    ConvBnReluCache<T>* cache) const {
    if (x.rank() != 4 || x.dim(1) != cin_) {
      throw DimensionError(prefix_ + ": expected " + std::to_string(cin_) + " input channels, got shape " +
                           shape_str(x.shape()));
    }
    Tensor<T> z = ops::conv2d(x, store.value(weight_name()), store.value(bias_name()), 1, k_ / 2);
    Tensor<T> b = ops::batchnorm(z, store.value(gamma_name()), store.value(beta_name()), store.value(mean_name()),
                                 store.value(var_name()), opts.mode,
                                 opts.mode == Mode::kTrain && opts.update_running_stats, cache ? &cache->bn : nullptr,
                                 opts.bn_momentum);
    Tensor<T> y = ops::relu(b);
    if (cache) {
      cache->input = x;
      cache->output = y;
    }
    return y;
  }

  /// Accumulates parameter gradients into `store`; returns the input gradient
  /// (empty when not requested).
  template <typename T>
  Tensor<T> backward(ParamStore<T>& store, const ConvBnReluCache<T>& cache, const Tensor<T>& grad_out,
                     bool need_input_grad = true) const {
    const Tensor<T> g_bn = ops::relu_backward(cache.output, grad_out);
    auto bn = ops::batchnorm_backward(g_bn, store.value(gamma_name()), cache.bn);
    ops::accumulate(store.grad(gamma_name()), bn.gamma);
    ops::accumulate(store.grad(beta_name()), bn.beta);
    auto conv = ops::conv2d_backward(cache.input, store.value(weight_name()), bn.input, 1, k_ / 2, need_input_grad);
    ops::accumulate(store.grad(weight_name()), conv.weight);
    ops::accumulate(store.grad(bias_name()), conv.bias);
    return std::move(conv.input);
  }

 private:
  std::string prefix_;
  std::size_t cin_ = 0, cout_ = 0, k_ = 1;
};

}  // namespace parefine
