#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "parefine/errors.hpp"
#include "parefine/tensor.hpp"

namespace parefine {

inline constexpr double kDiceEps = 1e-5;

namespace loss_detail {

// Per-sample extent: batch element count and pixels per element.
inline std::pair<std::size_t, std::size_t> samples(const Shape& s) {
  if (s.size() == 4) return {s[0], s[1] * s[2] * s[3]};
  return {1, shape_numel(s)};
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace loss_detail

/// 1 - (2 sum(YG) + eps) / (sum(Y^2) + sum(G^2) + eps). A rank-4 input is a
/// batch; the result is the mean over its elements.
template <typename T>
double dice_loss(const Tensor<T>& y, const Tensor<T>& g) {
  loss_detail::require_same(y.shape(), g.shape(), "dice_loss");
  const auto [N, P] = loss_detail::samples(y.shape());
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double yg = 0, yy = 0, gg = 0;
    for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
      yg += static_cast<double>(y[i]) * g[i];
      yy += static_cast<double>(y[i]) * y[i];
      gg += static_cast<double>(g[i]) * g[i];
    }
    total += 1.0 - (2.0 * yg + kDiceEps) / (yy + gg + kDiceEps);
  }
  return total / static_cast<double>(N);
}

template <typename T>
Tensor<T> dice_loss_backward(const Tensor<T>& y, const Tensor<T>& g, double scale = 1.0) {
  loss_detail::require_same(y.shape(), g.shape(), "dice_loss_backward");
  const auto [N, P] = loss_detail::samples(y.shape());
  Tensor<T> grad(y.shape());
  for (std::size_t n = 0; n < N; ++n) {
    double yg = 0, yy = 0, gg = 0;
    for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
      yg += static_cast<double>(y[i]) * g[i];
      yy += static_cast<double>(y[i]) * y[i];
      gg += static_cast<double>(g[i]) * g[i];
    }
    const double num = 2.0 * yg + kDiceEps, den = yy + gg + kDiceEps;
    // d/dy_i of -(num/den) = -(2 g_i den - num 2 y_i) / den^2
    const double s = scale / static_cast<double>(N);
    for (std::size_t i = n * P; i < (n + 1) * P; ++i)
      grad[i] = static_cast<T>(-s * (2.0 * g[i] * den - num * 2.0 * y[i]) / (den * den));
  }
  return grad;
}

/// ||Y1 - Y2||_2 over all pixels, unnormalized; batch mean for rank 4.
template <typename T>
double reg_loss(const Tensor<T>& y1, const Tensor<T>& y2) {
  loss_detail::require_same(y1.shape(), y2.shape(), "reg_loss");
  const auto [N, P] = loss_detail::samples(y1.shape());
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double sq = 0;
    for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
      const double d = static_cast<double>(y1[i]) - y2[i];
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(N);
}

template <typename T>
struct PairGrads {
  Tensor<T> first, second;
};

/// Gradient of scale * reg_loss; zero where the two maps coincide.
template <typename T>
PairGrads<T> reg_loss_backward(const Tensor<T>& y1, const Tensor<T>& y2, double scale = 1.0) {
  loss_detail::require_same(y1.shape(), y2.shape(), "reg_loss_backward");
  const auto [N, P] = loss_detail::samples(y1.shape());
  PairGrads<T> g{Tensor<T>(y1.shape()), Tensor<T>(y1.shape())};
  for (std::size_t n = 0; n < N; ++n) {
    double sq = 0;
    for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
      const double d = static_cast<double>(y1[i]) - y2[i];
      sq += d * d;
    }
    const double norm = std::sqrt(sq);
    if (norm == 0) continue;
    const double s = scale / (static_cast<double>(N) * norm);
    for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
      const T v = static_cast<T>(s * (static_cast<double>(y1[i]) - y2[i]));
      g.first[i] = v;
      g.second[i] = -v;
    }
  }
  return g;
}

struct LossValue {
  double total = 0;
  double l_s = 0;
  double l_r = 0;
  double lambda = 0;
};

inline LossValue combine_losses(double l_s, double l_r, double lambda) { return {l_s + lambda * l_r, l_s, l_r, lambda}; }

template <typename T>
struct TotalLoss {
  LossValue value;
  Tensor<T> grad_main, grad_aux;
};

/// L = dice(Y1, G) + lambda * ||Y1 - Y2||. Dice compares the label with the
/// main branch only.
template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& y1, const Tensor<T>& y2, const Tensor<T>& g, double lambda) {
  TotalLoss<T> out;
  out.value = combine_losses(dice_loss(y1, g), reg_loss(y1, y2), lambda);
  out.grad_main = dice_loss_backward(y1, g);
  out.grad_aux = Tensor<T>(y2.shape());
  if (lambda != 0) {
    auto r = reg_loss_backward(y1, y2, lambda);
    for (std::size_t i = 0; i < y1.numel(); ++i) out.grad_main[i] += r.first[i];
    out.grad_aux = std::move(r.second);
  }
  return out;
}

}  // namespace parefine
