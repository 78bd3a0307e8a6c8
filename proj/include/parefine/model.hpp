#pragma once

#include <cstddef>

#include "parefine/backbone.hpp"
#include "parefine/mrsg.hpp"

namespace parefine {

struct ModelConfig {
  UNetConfig unet;
  std::size_t filter_size = 5;
  // Off: the coarse map is the output (backbone-only ablation).
  bool use_pa_filters = true;
  FilterNormalization normalization = FilterNormalization::kSum;
};

/// Coarse and refined maps, N x 1 x H x W each.
template <typename T>
struct SegPair {
  Tensor<T> coarse, refined;
};

template <typename T>
struct ModelCache {
  UNetCache<T> unet;
  MrsgCache<T> mrsg;
  Tensor<T> coarse, bank;
};

/// Backbone -> MRSG -> PA-Filter application.
class Model {
 public:
  explicit Model(ModelConfig cfg = {}) : cfg_(cfg), unet_(cfg.unet), mrsg_(cfg.filter_size) {}

  const ModelConfig& config() const { return cfg_; }
  const UNet& unet() const { return unet_; }
  const Mrsg& mrsg() const { return mrsg_; }

  std::size_t param_count() const {
    return parefine::param_count(cfg_.unet).count + (cfg_.use_pa_filters ? mrsg_.param_count() : 0);
  }

  template <typename T>
  ParamStore<T> make_params(std::uint64_t seed) const {
    ParamStore<T> store;
    unet_.register_params(store);
    if (cfg_.use_pa_filters) mrsg_.register_params(store);
    Rng rng = Rng(seed).split(Stream::kWeights);
    unet_.init(store, rng);
    if (cfg_.use_pa_filters) mrsg_.init(store, rng);
    return store;
  }

  template <typename T>
  SegPair<T> forward(ParamStore<T>& store, const Tensor<T>& x, const PassOptions& opts,
                     ModelCache<T>* cache = nullptr) const {
    SegPair<T> out;
    out.coarse = unet_.forward(store, x, opts, cache ? &cache->unet : nullptr);
    if (!cfg_.use_pa_filters) {
      out.refined = out.coarse;
      return out;
    }
    Tensor<T> bank = mrsg_.forward(store, out.coarse, opts, cache ? &cache->mrsg : nullptr);
    out.refined = apply_pa_filters(out.coarse, bank, cfg_.normalization);
    if (cache) {
      cache->coarse = out.coarse;
      cache->bank = std::move(bank);
    }
    return out;
  }

  /// Filter bank for the given input (inference mode).
  template <typename T>
  Tensor<T> filters(ParamStore<T>& store, const Tensor<T>& x) const {
    const PassOptions opts{Mode::kInfer, false};
    const Tensor<T> coarse = unet_.forward(store, x, opts);
    return mrsg_.forward(store, coarse, opts);
  }

  /// Accumulates parameter gradients given d(loss)/d(refined).
  template <typename T>
  void backward(ParamStore<T>& store, const ModelCache<T>& cache, const Tensor<T>& grad_refined) const {
    if (!cfg_.use_pa_filters) {
      unet_.backward(store, cache.unet, grad_refined);
      return;
    }
    auto pa = apply_pa_filters_backward(cache.coarse, cache.bank, grad_refined, cfg_.normalization);
    ops::accumulate(pa.coarse, mrsg_.backward(store, cache.mrsg, pa.bank));
    unet_.backward(store, cache.unet, pa.coarse);
  }

 private:
  ModelConfig cfg_;
  UNet unet_;
  Mrsg mrsg_;
};

}  // namespace parefine
