#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <string>
#include <vector>

#include "parefine/errors.hpp"
#include "parefine/parallel.hpp"
#include "parefine/tensor.hpp"

namespace parefine {

enum class Mode { kTrain, kInfer };

namespace ops {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace detail {

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw DimensionError(std::string(op) + ": expected N x C x H x W, got " + shape_str(s));
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kB = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kB) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kB) {
      const std::size_t r1 = std::min(rows, r0 + kB), c1 = std::min(cols, c0 + kB);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

// Promote C x H x W to 1 x C x H x W.
template <typename T>
Tensor<T> as_batch(const Tensor<T>& x) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  throw DimensionError("expected rank 3 or 4 tensor, got " + shape_str(x.shape()));
}

}  // namespace detail

namespace detail {

// 16 lanes of T; the compiler maps it onto whatever SIMD width is available.
template <typename T>
struct Lanes {
  static constexpr std::size_t kWidth = 16;
  typedef T type __attribute__((vector_size(kWidth * sizeof(T))));
};

template <typename T, std::size_t MR>
void gemm_tile(std::size_t K, std::size_t N, const T* a, const T* b, T* c) {
  using V = typename Lanes<T>::type;
  constexpr std::size_t NR = Lanes<T>::kWidth;
  V acc[MR] = {};
  for (std::size_t k = 0; k < K; ++k) {
    V bv;
    std::memcpy(&bv, b + k * N, sizeof bv);
    for (std::size_t i = 0; i < MR; ++i) acc[i] += a[i * K + k] * bv;
  }
  for (std::size_t i = 0; i < MR; ++i) std::memcpy(c + i * N, &acc[i], NR * sizeof(T));
}

}  // namespace detail

/// C = A * B for row-major A (M x K), B (K x N). Every output element is
/// accumulated from zero over k = 0..K-1 in order.
template <typename T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  constexpr std::size_t MR = 6;
  constexpr std::size_t NR = detail::Lanes<T>::kWidth;
  const std::size_t col_blocks = (N + NR - 1) / NR;
  parallel_for(col_blocks, [&](std::size_t jb) {
    const std::size_t j0 = jb * NR;
    const std::size_t nr = std::min(NR, N - j0);
    std::size_t i0 = 0;
    if (nr == NR) {
      for (; i0 + MR <= M; i0 += MR) detail::gemm_tile<T, MR>(K, N, A + i0 * K, B + j0, C + i0 * N + j0);
      for (; i0 < M; ++i0) detail::gemm_tile<T, 1>(K, N, A + i0 * K, B + j0, C + i0 * N + j0);
      return;
    }
    for (; i0 < M; ++i0) {
      T acc[NR] = {};
      const T* a = A + i0 * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = a[k];
        const T* b = B + k * N + j0;
        for (std::size_t j = 0; j < nr; ++j) acc[j] += av * b[j];
      }
      for (std::size_t j = 0; j < nr; ++j) C[i0 * N + j0 + j] = acc[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), square kernels.

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;

  std::size_t kdim() const { return cin * k * k; }
  std::size_t pixels() const { return ho * wo; }
};

template <typename T>
ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  detail::require_rank4(x, "conv2d input");
  if (w.size() != 4) throw DimensionError("conv2d: weight must be C_out x C_in x k x k, got " + shape_str(w));
  if (w[1] != x[1]) {
    throw DimensionError("conv2d: input channel axis " + std::to_string(x[1]) + " does not match weight C_in " +
                         std::to_string(w[1]));
  }
  if (w[2] != w[3]) throw DimensionError("conv2d: kernel must be square, got " + shape_str(w));
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  const std::size_t k = w[2];
  if (x[2] + 2 * pad < k) throw DimensionError("conv2d: height axis too small for kernel");
  if (x[3] + 2 * pad < k) throw DimensionError("conv2d: width axis too small for kernel");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], k, stride, pad, 0, 0};
  g.ho = (x[2] + 2 * pad - k) / stride + 1;
  g.wo = (x[3] + 2 * pad - k) / stride + 1;
  return g;
}

namespace detail {

// Output columns ox whose source column ox * stride + kx - pad lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t w, std::size_t wo, std::size_t k_off,
                                                       std::size_t stride, std::size_t pad) {
  const long off = static_cast<long>(k_off) - static_cast<long>(pad);
  const long s = static_cast<long>(stride);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(w) - 1 - off);
  hi = hi < 0 ? -1 : hi / s;
  lo = std::min<long>(lo, static_cast<long>(wo));
  hi = std::min<long>(hi, static_cast<long>(wo) - 1);
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
}

}  // namespace detail

/// Lowered input: rows (ci, ky, kx) row-major, columns (n, oy, ox).
template <typename T>
Buffer<T> im2col(const Tensor<T>& x, const ConvGeometry& g) {
  const std::size_t P = g.pixels(), NP = g.n * P;
  Buffer<T> col(g.kdim() * NP);
  parallel_for(g.cin, [&](std::size_t ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [y0, y1] = detail::valid_range(g.h, g.ho, ky, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [x0, x1] = detail::valid_range(g.w, g.wo, kx, g.stride, g.pad);
        T* row = col.data() + ((ci * g.k + ky) * g.k + kx) * NP;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* src = x.data() + (n * g.cin + ci) * g.h * g.w;
          T* plane = row + n * P;
          std::fill(plane, plane + y0 * g.wo, T(0));
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const std::size_t iy = oy * g.stride + ky - g.pad;
            T* dst = plane + oy * g.wo;
            std::fill(dst, dst + x0, T(0));
            const T* s = src + iy * g.w + (x0 * g.stride + kx - g.pad);
            if (g.stride == 1) {
              std::copy(s, s + (x1 - x0), dst + x0);
            } else {
              for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] = s[(ox - x0) * g.stride];
            }
            std::fill(dst + x1, dst + g.wo, T(0));
          }
          std::fill(plane + y1 * g.wo, plane + P, T(0));
        }
      }
    }
  });
  return col;
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, Tensor<T>& gx) {
  const std::size_t P = g.pixels(), NP = g.n * P;
  parallel_for(g.cin, [&](std::size_t ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [y0, y1] = detail::valid_range(g.h, g.ho, ky, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [x0, x1] = detail::valid_range(g.w, g.wo, kx, g.stride, g.pad);
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * NP;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* dst = gx.data() + (n * g.cin + ci) * g.h * g.w;
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const std::size_t iy = oy * g.stride + ky - g.pad;
            const T* src = row + n * P + oy * g.wo;
            T* d = dst + iy * g.w + (x0 * g.stride + kx - g.pad);
            for (std::size_t ox = x0; ox < x1; ++ox) d[(ox - x0) * g.stride] += src[ox];
          }
        }
      }
    }
  });
}

/// Cross-correlation with zero padding. Accepts C x H x W or N x C x H x W and
/// returns the same rank. Sums run input-channel-major, then kernel row-major;
/// bias is added last.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t pad = 0) {
  const bool batched = input.rank() == 4;
  const Tensor<T> x = batched ? Tensor<T>() : detail::as_batch(input);
  const Tensor<T>& xb = batched ? input : x;
  const ConvGeometry g = conv_geometry<T>(xb.shape(), weight.shape(), stride, pad);
  if (bias.numel() != g.cout) {
    throw DimensionError("conv2d: bias length " + std::to_string(bias.numel()) + " does not match C_out " +
                         std::to_string(g.cout));
  }
  const std::size_t P = g.pixels(), NP = g.n * P;
  Tensor<T> out({g.n, g.cout, g.ho, g.wo});
  const bool direct = g.n == 1 && g.k == 1 && g.stride == 1 && g.pad == 0;
  if (direct) {
    gemm(g.cout, NP, g.kdim(), weight.data(), xb.data(), out.data());
  } else {
    const Buffer<T> col = im2col(xb, g);
    Buffer<T> mat(g.cout * NP);
    gemm(g.cout, NP, g.kdim(), weight.data(), col.data(), mat.data());
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t co = 0; co < g.cout; ++co)
        std::copy_n(mat.data() + co * NP + n * P, P, out.data() + (n * g.cout + co) * P);
  }
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t co = 0; co < g.cout; ++co) {
      T* o = out.data() + (n * g.cout + co) * P;
      const T b = bias[co];
      for (std::size_t p = 0; p < P; ++p) o[p] += b;
    }
  debug_check_finite(out, "conv2d");
  if (!batched) out.reshape({g.cout, g.ho, g.wo});
  return out;
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> input, weight, bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_out,
                               std::size_t stride = 1, std::size_t pad = 0, bool need_input_grad = true) {
  const bool batched = input.rank() == 4;
  const Tensor<T> xb = detail::as_batch(input);
  const Tensor<T> gy = detail::as_batch(grad_out);
  const ConvGeometry g = conv_geometry<T>(xb.shape(), weight.shape(), stride, pad);
  detail::require_same(gy.shape(), Shape{g.n, g.cout, g.ho, g.wo}, "conv2d_backward grad");
  const std::size_t P = g.pixels(), NP = g.n * P, K = g.kdim();

  Conv2dGrads<T> grads{Tensor<T>(), Tensor<T>(weight.shape()), Tensor<T>({g.cout})};

  // grad_out as C_out x (n, p).
  Buffer<T> gmat(g.cout * NP);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t co = 0; co < g.cout; ++co)
      std::copy_n(gy.data() + (n * g.cout + co) * P, P, gmat.data() + co * NP + n * P);

  for (std::size_t co = 0; co < g.cout; ++co) {
    T s = 0;
    const T* row = gmat.data() + co * NP;
    for (std::size_t q = 0; q < NP; ++q) s += row[q];
    grads.bias[co] = s;
  }

  {
    const Buffer<T> col = im2col(xb, g);
    Buffer<T> colT(NP * K);
    detail::transpose(K, NP, col.data(), colT.data());
    gemm(g.cout, K, NP, gmat.data(), colT.data(), grads.weight.data());
  }

  if (need_input_grad) {
    Buffer<T> wT(K * g.cout);
    detail::transpose(g.cout, K, weight.data(), wT.data());
    Buffer<T> gcol(K * NP);
    gemm(K, NP, g.cout, wT.data(), gmat.data(), gcol.data());
    grads.input = Tensor<T>(xb.shape());
    col2im_add(gcol.data(), g, grads.input);
    if (!batched) grads.input.reshape(input.shape());
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  Mode mode = Mode::kTrain;
};

/// Train mode normalizes by batch statistics and, if update_running is set,
/// moves the running stats with `momentum` (unbiased variance). Infer mode
/// uses the running stats.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, Mode mode, bool update_running, BatchNormCache<T>* cache = nullptr,
                    double momentum = kBatchNormMomentum) {
  detail::require_rank4(x.shape(), "batchnorm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean),
                             static_cast<const Tensor<T>*>(&running_var)}) {
    if (p->numel() != C) {
      throw DimensionError("batchnorm: parameter length " + std::to_string(p->numel()) + " does not match channel axis " +
                           std::to_string(C));
    }
  }
  Tensor<T> y(x.shape());
  std::vector<T> inv_std(C);
  Tensor<T> xhat;
  if (cache) xhat = Tensor<T>(x.shape());
  const double m = static_cast<double>(N * HW);

  parallel_for(C, [&](std::size_t c) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* px = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += px[i];
      }
      mean = s / m;
      double sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* px = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = px[i] - mean;
          sq += d * d;
        }
      }
      var = sq / m;
      if (update_running) {
        const double unbiased = m > 1 ? sq / (m - 1) : var;
        running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * mean);
        running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
      }
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T mu = static_cast<T>(mean);
    const T is = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
    inv_std[c] = is;
    const T gm = gamma[c], bt = beta[c];
    for (std::size_t n = 0; n < N; ++n) {
      const T* px = x.data() + (n * C + c) * HW;
      T* py = y.data() + (n * C + c) * HW;
      T* ph = cache ? xhat.data() + (n * C + c) * HW : nullptr;
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = (px[i] - mu) * is;
        if (ph) ph[i] = h;
        py[i] = h * gm + bt;
      }
    }
  });
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  debug_check_finite(y, "batchnorm");
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input, gamma, beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const Tensor<T>& gamma, const BatchNormCache<T>& cache) {
  detail::require_same(grad_out.shape(), cache.xhat.shape(), "batchnorm_backward");
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1), HW = grad_out.dim(2) * grad_out.dim(3);
  BatchNormGrads<T> g{Tensor<T>(grad_out.shape()), Tensor<T>({C}), Tensor<T>({C})};
  const double m = static_cast<double>(N * HW);
  parallel_for(C, [&](std::size_t c) {
    double sg = 0, sgx = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* gy = grad_out.data() + (n * C + c) * HW;
      const T* xh = cache.xhat.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        sg += gy[i];
        sgx += static_cast<double>(gy[i]) * xh[i];
      }
    }
    g.beta[c] = static_cast<T>(sg);
    g.gamma[c] = static_cast<T>(sgx);
    const T scale = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const T* gy = grad_out.data() + (n * C + c) * HW;
      const T* xh = cache.xhat.data() + (n * C + c) * HW;
      T* gx = g.input.data() + (n * C + c) * HW;
      if (cache.mode == Mode::kInfer) {
        for (std::size_t i = 0; i < HW; ++i) gx[i] = gy[i] * scale;
      } else {
        const T mg = static_cast<T>(sg / m), mgx = static_cast<T>(sgx / m);
        for (std::size_t i = 0; i < HW; ++i) gx[i] = scale * (gy[i] - mg - xh[i] * mgx);
      }
    }
  });
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise.

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

/// `out` is the forward output; positive entries mark where the gradient passes.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, const Tensor<T>& grad_out) {
  detail::require_same(out.shape(), grad_out.shape(), "relu_backward");
  Tensor<T> g(out.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) g[i] = out[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T>
T sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& out, const Tensor<T>& grad_out) {
  detail::require_same(out.shape(), grad_out.shape(), "sigmoid_backward");
  Tensor<T> g(out.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) g[i] = grad_out[i] * out[i] * (T(1) - out[i]);
  return g;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y[i] = a[i] * b[i];
  return y;
}

template <typename T>
struct BinaryGrads {
  Tensor<T> a, b;
};

template <typename T>
BinaryGrads<T> mul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out) {
  return {mul(grad_out, b), mul(grad_out, a)};
}

/// In-place a += b.
template <typename T>
void accumulate(Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "accumulate");
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

// ---------------------------------------------------------------------------
// Resampling and layout.

/// 2x2 max pooling, stride 2. Ties resolve to the first element in row-major
/// window order; `argmax` receives the flat input index of each winner.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::size_t>* argmax = nullptr) {
  detail::require_rank4(x.shape(), "maxpool2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2) throw DimensionError("maxpool2: height axis " + std::to_string(H) + " is odd");
  if (W % 2) throw DimensionError("maxpool2: width axis " + std::to_string(W) + " is odd");
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor<T> y({N, C, Ho, Wo});
  if (argmax) argmax->assign(y.numel(), 0);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* src = x.data() + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (2 * oy) * W + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t c : cand)
          if (src[c] > src[best]) best = c;
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        y[o] = src[best];
        if (argmax) (*argmax)[o] = nc * H * W + best;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax, const Shape& input_shape) {
  if (argmax.size() != grad_out.numel()) throw DimensionError("maxpool2_backward: argmax size mismatch");
  Tensor<T> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
  detail::require_rank4(x.shape(), "upsample_nearest2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C, 2 * H, 2 * W});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t yy = 0; yy < 2 * H; ++yy)
      for (std::size_t xx = 0; xx < 2 * W; ++xx) y[(nc * 2 * H + yy) * 2 * W + xx] = x[(nc * H + yy / 2) * W + xx / 2];
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2_backward(const Tensor<T>& grad_out) {
  detail::require_rank4(grad_out.shape(), "upsample_nearest2_backward");
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1), H = grad_out.dim(2) / 2, W = grad_out.dim(3) / 2;
  Tensor<T> g({N, C, H, W});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t yy = 0; yy < 2 * H; ++yy)
      for (std::size_t xx = 0; xx < 2 * W; ++xx) g[(nc * H + yy / 2) * W + xx / 2] += grad_out[(nc * 2 * H + yy) * 2 * W + xx];
  return g;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank4(a.shape(), "concat_channels");
  detail::require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0)) throw DimensionError("concat_channels: batch axis mismatch");
  if (a.dim(2) != b.dim(2)) throw DimensionError("concat_channels: height axis mismatch");
  if (a.dim(3) != b.dim(3)) throw DimensionError("concat_channels: width axis mismatch");
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor<T> y({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data() + n * Ca * HW, Ca * HW, y.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.data() + n * Cb * HW, Cb * HW, y.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return y;
}

/// Splits a channel-concatenated gradient back into its two operands.
template <typename T>
BinaryGrads<T> concat_channels_backward(const Tensor<T>& grad_out, std::size_t channels_a) {
  detail::require_rank4(grad_out.shape(), "concat_channels_backward");
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1), H = grad_out.dim(2), W = grad_out.dim(3);
  const std::size_t Cb = C - channels_a, HW = H * W;
  BinaryGrads<T> g{Tensor<T>({N, channels_a, H, W}), Tensor<T>({N, Cb, H, W})};
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(grad_out.data() + n * C * HW, channels_a * HW, g.a.data() + n * channels_a * HW);
    std::copy_n(grad_out.data() + (n * C + channels_a) * HW, Cb * HW, g.b.data() + n * Cb * HW);
  }
  return g;
}

/// Mirror index with the edge sample repeated (..., 1, 0 | 0, 1, ... ).
inline std::size_t symmetric_index(long i, std::size_t n) {
  const long period = 2 * static_cast<long>(n);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - 1 - m);
}

struct Padding {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;

  bool none() const { return top == 0 && bottom == 0 && left == 0 && right == 0; }
};

template <typename T>
Tensor<T> pad_symmetric(const Tensor<T>& x, const Padding& p) {
  detail::require_rank4(x.shape(), "pad_symmetric");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Hp = H + p.top + p.bottom, Wp = W + p.left + p.right;
  Tensor<T> y({N, C, Hp, Wp});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t yy = 0; yy < Hp; ++yy) {
      const std::size_t sy = symmetric_index(static_cast<long>(yy) - static_cast<long>(p.top), H);
      for (std::size_t xx = 0; xx < Wp; ++xx) {
        const std::size_t sx = symmetric_index(static_cast<long>(xx) - static_cast<long>(p.left), W);
        y[(nc * Hp + yy) * Wp + xx] = x[(nc * H + sy) * W + sx];
      }
    }
  return y;
}

template <typename T>
Tensor<T> pad_symmetric_backward(const Tensor<T>& grad_out, const Padding& p) {
  detail::require_rank4(grad_out.shape(), "pad_symmetric_backward");
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1), Hp = grad_out.dim(2), Wp = grad_out.dim(3);
  const std::size_t H = Hp - p.top - p.bottom, W = Wp - p.left - p.right;
  Tensor<T> g({N, C, H, W});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t yy = 0; yy < Hp; ++yy) {
      const std::size_t sy = symmetric_index(static_cast<long>(yy) - static_cast<long>(p.top), H);
      for (std::size_t xx = 0; xx < Wp; ++xx) {
        const std::size_t sx = symmetric_index(static_cast<long>(xx) - static_cast<long>(p.left), W);
        g[(nc * H + sy) * W + sx] += grad_out[(nc * Hp + yy) * Wp + xx];
      }
    }
  return g;
}

/// Removes `p` from the borders (inverse of pad_symmetric's geometry).
template <typename T>
Tensor<T> crop(const Tensor<T>& x, const Padding& p) {
  detail::require_rank4(x.shape(), "crop");
  const std::size_t N = x.dim(0), C = x.dim(1), Hp = x.dim(2), Wp = x.dim(3);
  if (p.top + p.bottom >= Hp || p.left + p.right >= Wp) throw DimensionError("crop: padding exceeds extent");
  const std::size_t H = Hp - p.top - p.bottom, W = Wp - p.left - p.right;
  Tensor<T> y({N, C, H, W});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t yy = 0; yy < H; ++yy)
      std::copy_n(x.data() + (nc * Hp + yy + p.top) * Wp + p.left, W, y.data() + (nc * H + yy) * W);
  return y;
}

template <typename T>
Tensor<T> crop_backward(const Tensor<T>& grad_out, const Padding& p) {
  detail::require_rank4(grad_out.shape(), "crop_backward");
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1), H = grad_out.dim(2), W = grad_out.dim(3);
  const std::size_t Hp = H + p.top + p.bottom, Wp = W + p.left + p.right;
  Tensor<T> g({N, C, Hp, Wp});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t yy = 0; yy < H; ++yy)
      std::copy_n(grad_out.data() + (nc * H + yy) * W, W, g.data() + (nc * Hp + yy + p.top) * Wp + p.left);
  return g;
}

/// Batch element n as a 1 x C x H x W tensor.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t n) {
  detail::require_rank4(x.shape(), "slice_batch");
  const std::size_t per = x.dim(1) * x.dim(2) * x.dim(3);
  Tensor<T> y({1, x.dim(1), x.dim(2), x.dim(3)});
  std::copy_n(x.data() + n * per, per, y.data());
  return y;
}

/// Stacks equally shaped C x H x W (or 1 x C x H x W) tensors along a new batch axis.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw DimensionError("stack_batch: no items");
  Shape inner = items.front().shape();
  if (inner.size() == 4) inner.erase(inner.begin());
  const std::size_t per = shape_numel(inner);
  Tensor<T> y({items.size(), inner[0], inner[1], inner[2]});
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].numel() != per) throw DimensionError("stack_batch: item " + std::to_string(i) + " shape mismatch");
    std::copy_n(items[i].data(), per, y.data() + i * per);
  }
  return y;
}

}  // namespace ops
}  // namespace parefine
