#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "parefine/layers.hpp"
#include "parefine/ops.hpp"
#include "parefine/param_store.hpp"

namespace parefine {

inline constexpr double kFilterEps = 1e-8;
inline constexpr std::size_t kMaxFilterSize = 9;

/// How the refined value is kept inside [0, 1].
enum class FilterNormalization {
  kSum,    // divide by the filter's element sum + eps
  kClamp,  // raw weighted sum clamped to [0, 1]
};

namespace mrsg_detail {

inline void require_window(std::size_t d, const char* op) {
  if (d < 3 || d % 2 == 0) {
    throw ParameterError(std::string(op) + ": window size must be odd and >= 3, got " + std::to_string(d));
  }
}

inline void require_map(const Shape& s, const char* op) {
  if (s.size() != 4 || s[1] != 1) throw DimensionError(std::string(op) + ": expected N x 1 x H x W map, got " + shape_str(s));
}

// Window size of a D^2-channel bank.
inline std::size_t window_of(std::size_t channels, const char* op) {
  const auto d = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(channels))));
  if (d * d != channels) throw DimensionError(std::string(op) + ": channel axis " + std::to_string(channels) + " is not a square");
  require_window(d, op);
  return d;
}

}  // namespace mrsg_detail

/// S^d: channel j = (dy + r) * d + (dx + r), r = (d - 1) / 2, holds
/// coarse(p + (dy, dx)) * coarse(p), zero outside the image.
/// coarse: N x 1 x H x W. Returns N x d^2 x H x W.
template <typename T>
Tensor<T> similarity_volume(const Tensor<T>& coarse, std::size_t d) {
  mrsg_detail::require_window(d, "similarity_volume");
  mrsg_detail::require_map(coarse.shape(), "similarity_volume");
  const std::size_t N = coarse.dim(0), H = coarse.dim(2), W = coarse.dim(3), HW = H * W;
  const long r = static_cast<long>(d / 2);
  Tensor<T> vol({N, d * d, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    const T* c = coarse.data() + n * HW;
    for (long dy = -r; dy <= r; ++dy) {
      for (long dx = -r; dx <= r; ++dx) {
        const std::size_t j = static_cast<std::size_t>((dy + r) * static_cast<long>(d) + (dx + r));
        T* out = vol.data() + (n * d * d + j) * HW;
        for (long y = 0; y < static_cast<long>(H); ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (long x = 0; x < static_cast<long>(W); ++x) {
            const long sx = x + dx;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            out[y * W + x] = c[sy * W + sx] * c[y * W + x];
          }
        }
      }
    }
  }
  return vol;
}

/// Product-rule backward: both the neighbour and the centre factor receive gradient.
template <typename T>
Tensor<T> similarity_volume_backward(const Tensor<T>& coarse, std::size_t d, const Tensor<T>& grad_vol) {
  mrsg_detail::require_window(d, "similarity_volume_backward");
  mrsg_detail::require_map(coarse.shape(), "similarity_volume_backward");
  const std::size_t N = coarse.dim(0), H = coarse.dim(2), W = coarse.dim(3), HW = H * W;
  if (grad_vol.shape() != Shape{N, d * d, H, W}) {
    throw DimensionError("similarity_volume_backward: gradient shape " + shape_str(grad_vol.shape()));
  }
  const long r = static_cast<long>(d / 2);
  Tensor<T> g(coarse.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* c = coarse.data() + n * HW;
    T* gc = g.data() + n * HW;
    for (long dy = -r; dy <= r; ++dy) {
      for (long dx = -r; dx <= r; ++dx) {
        const std::size_t j = static_cast<std::size_t>((dy + r) * static_cast<long>(d) + (dx + r));
        const T* gv = grad_vol.data() + (n * d * d + j) * HW;
        for (long y = 0; y < static_cast<long>(H); ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (long x = 0; x < static_cast<long>(W); ++x) {
            const long sx = x + dx;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            const T gp = gv[y * W + x];
            gc[y * W + x] += gp * c[sy * W + sx];
            gc[sy * W + sx] += gp * c[y * W + x];
          }
        }
      }
    }
  }
  return g;
}

template <typename T>
struct MrsgCache {
  Tensor<T> coarse;
  std::vector<ConvBnReluCache<T>> stages;
};

/// Multi-scale residual similarity gathering: S^3, then
/// hat(d + 2) = S^(d+2) + f(hat(d)) with f = conv1x1 -> BN -> ReLU lifting
/// d^2 channels to (d + 2)^2. The result hat(D) is the filter bank.
class Mrsg {
 public:
  explicit Mrsg(std::size_t filter_size = 5) : size_(filter_size) {
    if (filter_size != 3 && filter_size != 5 && filter_size != 7 && filter_size != 9) {
      throw ParameterError("mrsg: filter size must be one of 3, 5, 7, 9, got " + std::to_string(filter_size));
    }
    for (std::size_t d = 3; d < size_; d += 2) {
      stages_.emplace_back("mrsg/stage" + std::to_string(d) + "to" + std::to_string(d + 2), d * d, (d + 2) * (d + 2), 1);
    }
  }

  std::size_t filter_size() const { return size_; }
  std::size_t stage_count() const { return stages_.size(); }
  const ConvBnRelu& stage(std::size_t i) const { return stages_.at(i); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& s : stages_) n += s.param_count();
    return n;
  }

  template <typename T>
  void register_params(ParamStore<T>& store) const {
    for (const auto& s : stages_) s.register_params(store);
  }

  template <typename T>
  void init(ParamStore<T>& store, Rng& rng) const {
    for (const auto& s : stages_) s.init(store, rng);
  }

  /// Bottleneck f for stage i (d = 3 + 2i).
  template <typename T>
  Tensor<T> bottleneck(ParamStore<T>& store, std::size_t i, const Tensor<T>& volume, const PassOptions& opts,
                       ConvBnReluCache<T>* cache = nullptr) const {
    return stages_.at(i).forward(store, volume, opts, cache);
  }

  /// coarse: N x 1 x H x W. Returns the N x D^2 x H x W filter bank.
  /// Inference runs a fused per-pixel path whose transient storage is the
  /// output bank plus O(D^2) scratch.
  template <typename T>
  Tensor<T> forward(ParamStore<T>& store, const Tensor<T>& coarse, const PassOptions& opts,
                    MrsgCache<T>* cache = nullptr) const {
    mrsg_detail::require_map(coarse.shape(), "mrsg");
    if (opts.mode == Mode::kInfer && cache == nullptr) return forward_fused(store, coarse);
    if (cache) {
      cache->coarse = coarse;
      cache->stages.assign(stages_.size(), {});
    }
    Tensor<T> hat = similarity_volume(coarse, 3);
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const std::size_t d = 5 + 2 * i;
      Tensor<T> f = stages_[i].forward(store, hat, opts, cache ? &cache->stages[i] : nullptr);
      hat = similarity_volume(coarse, d);
      ops::accumulate(hat, f);
    }
#ifndef NDEBUG
    if (std::any_of(hat.data(), hat.data() + hat.numel(), [](T v) { return v < T(0); }))
      throw NumericError("mrsg: negative filter entry");
#endif
    return hat;
  }

  /// Returns d(loss)/d(coarse) through every similarity volume and stage.
  template <typename T>
  Tensor<T> backward(ParamStore<T>& store, const MrsgCache<T>& cache, const Tensor<T>& grad_bank) const {
    Tensor<T> g_coarse(cache.coarse.shape());
    Tensor<T> g = grad_bank;
    for (std::size_t i = stages_.size(); i-- > 0;) {
      const std::size_t d = 5 + 2 * i;
      ops::accumulate(g_coarse, similarity_volume_backward(cache.coarse, d, g));
      g = stages_[i].backward(store, cache.stages[i], g);
    }
    ops::accumulate(g_coarse, similarity_volume_backward(cache.coarse, 3, g));
    return g_coarse;
  }

 private:
  template <typename T>
  Tensor<T> forward_fused(ParamStore<T>& store, const Tensor<T>& coarse) const {
    struct StageConsts {
      const T* weight;
      const T* bias;
      std::vector<T> mu, inv_std, gamma, beta;
    };
    std::vector<StageConsts> consts;
    for (const auto& s : stages_) {
      StageConsts k{store.value(s.weight_name()).data(), store.value(s.bias_name()).data(), {}, {}, {}, {}};
      const std::size_t c = s.out_channels();
      for (std::size_t o = 0; o < c; ++o) {
        k.mu.push_back(static_cast<T>(static_cast<double>(store.value(s.mean_name())[o])));
        k.inv_std.push_back(static_cast<T>(
            1.0 / std::sqrt(static_cast<double>(store.value(s.var_name())[o]) + ops::kBatchNormEps)));
        k.gamma.push_back(store.value(s.gamma_name())[o]);
        k.beta.push_back(store.value(s.beta_name())[o]);
      }
      consts.push_back(std::move(k));
    }

    const std::size_t N = coarse.dim(0), H = coarse.dim(2), W = coarse.dim(3), HW = H * W;
    const std::size_t D = size_, DD = D * D;
    Tensor<T> bank({N, DD, H, W});
    parallel_for(N * H, [&](std::size_t row) {
      const std::size_t n = row / H;
      const long y = static_cast<long>(row % H);
      const T* c = coarse.data() + n * HW;
      std::array<T, kMaxFilterSize * kMaxFilterSize> hat{}, next{};
      auto sim = [&](long x, std::size_t d, std::size_t j) -> T {
        const long r = static_cast<long>(d / 2);
        const long sy = y + static_cast<long>(j / d) - r, sx = x + static_cast<long>(j % d) - r;
        if (sy < 0 || sy >= static_cast<long>(H) || sx < 0 || sx >= static_cast<long>(W)) return T(0);
        return c[sy * static_cast<long>(W) + sx] * c[y * static_cast<long>(W) + x];
      };
      for (long x = 0; x < static_cast<long>(W); ++x) {
        for (std::size_t j = 0; j < 9; ++j) hat[j] = sim(x, 3, j);
        for (std::size_t i = 0; i < stages_.size(); ++i) {
          const std::size_t cin = stages_[i].in_channels(), cout = stages_[i].out_channels(), d = 5 + 2 * i;
          const StageConsts& k = consts[i];
          for (std::size_t o = 0; o < cout; ++o) {
            T acc = 0;
            const T* w = k.weight + o * cin;
            for (std::size_t q = 0; q < cin; ++q) acc += w[q] * hat[q];
            acc += k.bias[o];
            T v = (acc - k.mu[o]) * k.inv_std[o];
            v = v * k.gamma[o] + k.beta[o];
            v = v > T(0) ? v : T(0);
            next[o] = sim(x, d, o) + v;
          }
          std::copy_n(next.begin(), cout, hat.begin());
        }
        for (std::size_t j = 0; j < DD; ++j) bank[(n * DD + j) * HW + static_cast<std::size_t>(y) * W + x] = hat[j];
      }
    });
    return bank;
  }

  std::size_t size_;
  std::vector<ConvBnRelu> stages_;
};

/// Refines the coarse map with one filter per pixel:
/// Y(p) = sum_j K_p[j] * coarse(p + offset_j) / (sum_j K_p[j] + eps) in kSum mode.
template <typename T>
Tensor<T> apply_pa_filters(const Tensor<T>& coarse, const Tensor<T>& bank,
                           FilterNormalization norm = FilterNormalization::kSum) {
  mrsg_detail::require_map(coarse.shape(), "apply_pa_filters");
  if (bank.rank() != 4 || bank.dim(0) != coarse.dim(0)) {
    throw DimensionError("apply_pa_filters: filter bank batch axis mismatch, bank " + shape_str(bank.shape()));
  }
  if (bank.dim(2) != coarse.dim(2)) throw DimensionError("apply_pa_filters: height axis mismatch");
  if (bank.dim(3) != coarse.dim(3)) throw DimensionError("apply_pa_filters: width axis mismatch");
  const std::size_t D = mrsg_detail::window_of(bank.dim(1), "apply_pa_filters");
  const std::size_t N = coarse.dim(0), H = coarse.dim(2), W = coarse.dim(3), HW = H * W, DD = D * D;
  const long r = static_cast<long>(D / 2);
  Tensor<T> out(coarse.shape());
  parallel_for(N * H, [&](std::size_t row) {
    const std::size_t n = row / H;
    const long y = static_cast<long>(row % H);
    const T* c = coarse.data() + n * HW;
    const T* k = bank.data() + n * DD * HW;
    for (long x = 0; x < static_cast<long>(W); ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
      T num = 0, den = 0;
      for (std::size_t j = 0; j < DD; ++j) {
        const T kj = k[j * HW + p];
        den += kj;
        const long sy = y + static_cast<long>(j / D) - r, sx = x + static_cast<long>(j % D) - r;
        if (sy >= 0 && sy < static_cast<long>(H) && sx >= 0 && sx < static_cast<long>(W))
          num += kj * c[sy * static_cast<long>(W) + sx];
      }
      T v;
      if (norm == FilterNormalization::kSum) {
        v = num / (den + static_cast<T>(kFilterEps));
      } else {
        v = std::clamp(num, T(0), T(1));
      }
      out[n * HW + p] = v;
    }
  });
  debug_check_finite(out, "apply_pa_filters");
  return out;
}

template <typename T>
struct PaFilterGrads {
  Tensor<T> coarse, bank;
};

template <typename T>
PaFilterGrads<T> apply_pa_filters_backward(const Tensor<T>& coarse, const Tensor<T>& bank, const Tensor<T>& grad_out,
                                           FilterNormalization norm = FilterNormalization::kSum) {
  mrsg_detail::require_map(coarse.shape(), "apply_pa_filters_backward");
  if (grad_out.shape() != coarse.shape()) throw DimensionError("apply_pa_filters_backward: gradient shape mismatch");
  const std::size_t D = mrsg_detail::window_of(bank.dim(1), "apply_pa_filters_backward");
  const std::size_t N = coarse.dim(0), H = coarse.dim(2), W = coarse.dim(3), HW = H * W, DD = D * D;
  const long r = static_cast<long>(D / 2);
  PaFilterGrads<T> g{Tensor<T>(coarse.shape()), Tensor<T>(bank.shape())};
  // Filter gradients are per pixel; the coarse-map scatter runs serially in a
  // fixed order.
  for (std::size_t n = 0; n < N; ++n) {
    const T* c = coarse.data() + n * HW;
    const T* k = bank.data() + n * DD * HW;
    T* gk = g.bank.data() + n * DD * HW;
    T* gc = g.coarse.data() + n * HW;
    for (long y = 0; y < static_cast<long>(H); ++y) {
      for (long x = 0; x < static_cast<long>(W); ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
        const T gy = grad_out[n * HW + p];
        T num = 0, den = 0;
        for (std::size_t j = 0; j < DD; ++j) {
          const T kj = k[j * HW + p];
          den += kj;
          const long sy = y + static_cast<long>(j / D) - r, sx = x + static_cast<long>(j % D) - r;
          if (sy >= 0 && sy < static_cast<long>(H) && sx >= 0 && sx < static_cast<long>(W))
            num += kj * c[sy * static_cast<long>(W) + sx];
        }
        T scale, offset;
        if (norm == FilterNormalization::kSum) {
          const T denom = den + static_cast<T>(kFilterEps);
          scale = T(1) / denom;
          offset = num / denom;  // dY/dK_j = (c_j - Y) / denom
        } else {
          scale = (num > T(0) && num < T(1)) ? T(1) : T(0);
          offset = 0;
        }
        for (std::size_t j = 0; j < DD; ++j) {
          const long sy = y + static_cast<long>(j / D) - r, sx = x + static_cast<long>(j % D) - r;
          const bool inside = sy >= 0 && sy < static_cast<long>(H) && sx >= 0 && sx < static_cast<long>(W);
          const T cj = inside ? c[sy * static_cast<long>(W) + sx] : T(0);
          gk[j * HW + p] = gy * (cj - offset) * scale;
          if (inside) gc[sy * static_cast<long>(W) + sx] += gy * k[j * HW + p] * scale;
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Filter visualisation.

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

struct Region {
  std::size_t x = 0, y = 0, width = 41, height = 41;
};

inline constexpr std::uint8_t kSeparatorGray = 64;
inline constexpr std::uint8_t kFlatFilterGray = 128;

/// Number of sampled positions along an axis of length `extent`.
inline std::size_t tile_count(std::size_t extent, std::size_t stride) { return extent == 0 ? 0 : (extent - 1) / stride + 1; }

/// Tiles the D x D filters of the positions sampled every `stride` pixels
/// inside `region` (batch element 0) into a grid with 1-pixel separators.
/// Each filter is min-max scaled to [0, 255] on its own.
template <typename T>
GrayImage export_filters(const Tensor<T>& bank, const Region& region, std::size_t stride) {
  if (bank.rank() != 4) throw DimensionError("export_filters: expected N x D^2 x H x W bank");
  if (stride == 0) throw ParameterError("export_filters: stride must be positive");
  const std::size_t D = mrsg_detail::window_of(bank.dim(1), "export_filters");
  const std::size_t H = bank.dim(2), W = bank.dim(3), HW = H * W;
  if (region.width == 0 || region.height == 0 || region.x + region.width > W || region.y + region.height > H) {
    throw DimensionError("export_filters: region outside the " + std::to_string(H) + "x" + std::to_string(W) + " map");
  }
  const std::size_t tx = tile_count(region.width, stride), ty = tile_count(region.height, stride);
  GrayImage img;
  img.width = tx * D + (tx - 1);
  img.height = ty * D + (ty - 1);
  img.pixels.assign(img.width * img.height, kSeparatorGray);
  for (std::size_t iy = 0; iy < ty; ++iy) {
    for (std::size_t ix = 0; ix < tx; ++ix) {
      const std::size_t p = (region.y + iy * stride) * W + region.x + ix * stride;
      T lo = bank[p], hi = bank[p];
      for (std::size_t j = 0; j < D * D; ++j) {
        lo = std::min(lo, bank[j * HW + p]);
        hi = std::max(hi, bank[j * HW + p]);
      }
      for (std::size_t j = 0; j < D * D; ++j) {
        std::uint8_t v = kFlatFilterGray;
        if (hi > lo) {
          const double t = (static_cast<double>(bank[j * HW + p]) - lo) / (static_cast<double>(hi) - lo);
          v = static_cast<std::uint8_t>(std::lround(t * 255.0));
        }
        const std::size_t px = ix * (D + 1) + j % D, py = iy * (D + 1) + j / D;
        img.pixels[py * img.width + px] = v;
      }
    }
  }
  return img;
}

}  // namespace parefine
