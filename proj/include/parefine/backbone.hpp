#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "parefine/layers.hpp"
#include "parefine/ops.hpp"
#include "parefine/param_store.hpp"
#include "parefine/rng.hpp"

namespace parefine {

struct UNetConfig {
  std::size_t depth = 5;
  std::size_t base_width = 8;
  std::size_t in_channels = 3;
  std::size_t out_channels = 1;

  void validate() const {
    if (depth < 2) throw ParameterError("unet: depth must be >= 2");
    if (base_width < 1) throw ParameterError("unet: base_width must be >= 1");
    if (in_channels != 3) throw ParameterError("unet: in_channels must be 3");
    if (out_channels != 1) throw ParameterError("unet: out_channels must be 1");
  }
  std::size_t width(std::size_t level) const { return base_width << level; }
  // Spatial extents must be multiples of this; other sizes are padded.
  std::size_t size_multiple() const { return std::size_t{1} << (depth - 1); }
};

struct ParamCount {
  std::size_t count = 0;
  double megabytes = 0;
};

/// Closed-form trainable parameter count of the backbone.
inline ParamCount param_count(const UNetConfig& cfg) {
  cfg.validate();
  auto block = [](std::size_t cin, std::size_t cout) { return ConvBnRelu::param_count(cin, cout, 3); };
  std::size_t n = 0;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    n += block(l == 0 ? cfg.in_channels : cfg.width(l - 1), cfg.width(l));
    n += block(cfg.width(l), cfg.width(l));
  }
  for (std::size_t l = 0; l + 1 < cfg.depth; ++l) {
    n += block(cfg.width(l + 1), cfg.width(l));  // up-conv
    n += block(2 * cfg.width(l), cfg.width(l));
    n += block(cfg.width(l), cfg.width(l));
  }
  n += cfg.width(0) * cfg.out_channels + cfg.out_channels;  // 1x1 head
  return {n, param_megabytes(n)};
}

template <typename T>
struct UNetCache {
  ops::Padding pad;
  std::vector<ConvBnReluCache<T>> enc, up, dec;
  std::vector<std::vector<std::size_t>> pool_argmax;
  std::vector<Shape> pool_input_shape;
  Tensor<T> head_input;
  Tensor<T> probs;
};

/// Encoder-decoder producing a 1-channel probability map of the input's size.
/// Per level: two conv3x3-BN-ReLU blocks; maxpool down; nearest x2 up followed
/// by conv3x3-BN-ReLU; skip connections by channel concatenation; 1x1 head
/// and sigmoid.
class UNet {
 public:
  explicit UNet(UNetConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      const std::string p = "unet/enc" + std::to_string(l);
      enc_.emplace_back(p + "/block0", l == 0 ? cfg_.in_channels : cfg_.width(l - 1), cfg_.width(l), 3);
      enc_.emplace_back(p + "/block1", cfg_.width(l), cfg_.width(l), 3);
    }
    for (std::size_t l = 0; l + 1 < cfg_.depth; ++l) {
      const std::string p = "unet/dec" + std::to_string(l);
      up_.emplace_back(p + "/up", cfg_.width(l + 1), cfg_.width(l), 3);
      dec_.emplace_back(p + "/block0", 2 * cfg_.width(l), cfg_.width(l), 3);
      dec_.emplace_back(p + "/block1", cfg_.width(l), cfg_.width(l), 3);
    }
  }

  const UNetConfig& config() const { return cfg_; }

  static std::string head_weight_name() { return "unet/head/weight"; }
  static std::string head_bias_name() { return "unet/head/bias"; }

  template <typename T>
  void register_params(ParamStore<T>& store) const {
    for (const auto& b : enc_) b.register_params(store);
    for (std::size_t l = 0; l < up_.size(); ++l) {
      up_[l].register_params(store);
      dec_[2 * l].register_params(store);
      dec_[2 * l + 1].register_params(store);
    }
    store.add(head_weight_name(), {cfg_.out_channels, cfg_.width(0), 1, 1});
    store.add(head_bias_name(), {cfg_.out_channels});
  }

  template <typename T>
  void init(ParamStore<T>& store, Rng& rng) const {
    for (const auto& b : enc_) b.init(store, rng);
    for (std::size_t l = 0; l < up_.size(); ++l) {
      up_[l].init(store, rng);
      dec_[2 * l].init(store, rng);
      dec_[2 * l + 1].init(store, rng);
    }
    kaiming_uniform(store.value(head_weight_name()), cfg_.width(0), rng);
    store.value(head_bias_name()).fill(T(0));
  }

  /// X: N x 3 x H x W in [0, 1]. Returns N x 1 x H x W probabilities.
  template <typename T>
  Tensor<T> forward(ParamStore<T>& store, const Tensor<T>& x, const PassOptions& opts,
                    UNetCache<T>* cache = nullptr) const {
    if (x.rank() != 4) throw DimensionError("unet: expected N x 3 x H x W input, got " + shape_str(x.shape()));
    if (x.dim(1) != cfg_.in_channels) {
      throw DimensionError("unet: channel axis must be 3, got " + std::to_string(x.dim(1)));
    }
    const ops::Padding pad = padding_for(x.dim(2), x.dim(3));
    UNetCache<T> local;
    UNetCache<T>& c = cache ? *cache : local;
    const bool keep = cache != nullptr;
    c.pad = pad;
    c.enc.assign(enc_.size(), {});
    c.up.assign(up_.size(), {});
    c.dec.assign(dec_.size(), {});
    c.pool_argmax.assign(cfg_.depth, {});
    c.pool_input_shape.assign(cfg_.depth, {});

    Tensor<T> h = pad.none() ? x : ops::pad_symmetric(x, pad);
    std::vector<Tensor<T>> skips(cfg_.depth);
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      if (l > 0) {
        c.pool_input_shape[l] = h.shape();
        h = ops::maxpool2(h, keep ? &c.pool_argmax[l] : nullptr);
      }
      h = enc_[2 * l].forward(store, h, opts, keep ? &c.enc[2 * l] : nullptr);
      h = enc_[2 * l + 1].forward(store, h, opts, keep ? &c.enc[2 * l + 1] : nullptr);
      if (l + 1 < cfg_.depth) skips[l] = h;
    }
    for (std::size_t l = cfg_.depth - 1; l-- > 0;) {
      Tensor<T> u = up_[l].forward(store, ops::upsample_nearest2(h), opts, keep ? &c.up[l] : nullptr);
      h = ops::concat_channels(skips[l], u);
      skips[l] = Tensor<T>();
      h = dec_[2 * l].forward(store, h, opts, keep ? &c.dec[2 * l] : nullptr);
      h = dec_[2 * l + 1].forward(store, h, opts, keep ? &c.dec[2 * l + 1] : nullptr);
    }
    Tensor<T> logits = ops::conv2d(h, store.value(head_weight_name()), store.value(head_bias_name()));
    if (keep) c.head_input = std::move(h);
    if (!pad.none()) logits = ops::crop(logits, pad);
    Tensor<T> probs = ops::sigmoid(logits);
    if (keep) c.probs = probs;
    return probs;
  }

  /// Accumulates parameter gradients for d(loss)/d(probs) = grad_probs.
  template <typename T>
  void backward(ParamStore<T>& store, const UNetCache<T>& c, const Tensor<T>& grad_probs) const {
    Tensor<T> g = ops::sigmoid_backward(c.probs, grad_probs);
    if (!c.pad.none()) g = ops::crop_backward(g, c.pad);
    {
      auto head = ops::conv2d_backward(c.head_input, store.value(head_weight_name()), g);
      ops::accumulate(store.grad(head_weight_name()), head.weight);
      ops::accumulate(store.grad(head_bias_name()), head.bias);
      g = std::move(head.input);
    }
    std::vector<Tensor<T>> g_skip(cfg_.depth);
    for (std::size_t l = 0; l + 1 < cfg_.depth; ++l) {
      g = dec_[2 * l + 1].backward(store, c.dec[2 * l + 1], g);
      g = dec_[2 * l].backward(store, c.dec[2 * l], g);
      auto split = ops::concat_channels_backward(g, cfg_.width(l));
      g_skip[l] = std::move(split.a);
      g = up_[l].backward(store, c.up[l], split.b);
      g = ops::upsample_nearest2_backward(g);
    }
    for (std::size_t l = cfg_.depth; l-- > 0;) {
      if (l + 1 < cfg_.depth) ops::accumulate(g, g_skip[l]);
      g = enc_[2 * l + 1].backward(store, c.enc[2 * l + 1], g);
      g = enc_[2 * l].backward(store, c.enc[2 * l], g, l > 0);
      if (l > 0) g = ops::maxpool2_backward(g, c.pool_argmax[l], c.pool_input_shape[l]);
    }
  }

  ops::Padding padding_for(std::size_t h, std::size_t w) const {
    const std::size_t m = cfg_.size_multiple();
    const std::size_t hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
    return {(hp - h) / 2, (hp - h) - (hp - h) / 2, (wp - w) / 2, (wp - w) - (wp - w) / 2};
  }

 private:
  UNetConfig cfg_;
  std::vector<ConvBnRelu> enc_, up_, dec_;
};

}  // namespace parefine
