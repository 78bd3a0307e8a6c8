#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "parefine/dataset.hpp"
#include "parefine/rng.hpp"

namespace parefine {

/// Synthetic fundus-like images: branching curvilinear "vessels" darkening a
/// smooth tinted background inside a circular field of view.
struct SynthConfig {
  std::size_t height = 64, width = 64;
  std::size_t n_trees = 3;
  // Chance per unit of path length that a side branch starts.
  double branch_prob = 0.05;
  // Vessel diameter range in pixels at the root of a tree.
  double width_min = 1.5, width_max = 3.0;
  double noise_sigma = 0.04;
  // Growth stops once this share of the image is vessel; sparser draws are redrawn.
  double max_vessel_fraction = 0.18;
  double min_vessel_fraction = 0.04;
  std::uint64_t seed = 0;

  void validate() const {
    if (height < 8 || width < 8) throw ParameterError("synth: image must be at least 8x8");
    if (n_trees == 0) throw ParameterError("synth: n_trees must be positive");
    if (!(branch_prob >= 0 && branch_prob < 1)) throw ParameterError("synth: branch_prob must be in [0, 1)");
    if (!(width_min > 0 && width_max >= width_min)) throw ParameterError("synth: invalid width range");
    if (!(noise_sigma >= 0)) throw ParameterError("synth: noise_sigma must be >= 0");
    if (!(max_vessel_fraction > 0 && max_vessel_fraction <= 1))
      throw ParameterError("synth: max_vessel_fraction must be in (0, 1]");
    if (!(min_vessel_fraction >= 0 && min_vessel_fraction < max_vessel_fraction))
      throw ParameterError("synth: min_vessel_fraction must be in [0, max_vessel_fraction)");
  }
};

namespace synth_detail {

struct Canvas {
  std::size_t h, w;
  double cy, cx, fov_radius;
  std::vector<std::uint8_t> label;
  std::size_t marked = 0, budget = 0;

  bool full() const { return marked >= budget; }

  bool disk_inside_fov(double y, double x, double r) const {
    return std::hypot(y - cy, x - cx) + r <= fov_radius;
  }

  // Marks pixel centres within `r` of (y, x). r >= 0.75 keeps consecutive
  // stamps half a pixel apart 8-connected.
  void stamp(double y, double x, double r) {
    const long y0 = static_cast<long>(std::floor(y - r)), y1 = static_cast<long>(std::ceil(y + r));
    const long x0 = static_cast<long>(std::floor(x - r)), x1 = static_cast<long>(std::ceil(x + r));
    for (long py = std::max(0L, y0); py <= std::min<long>(static_cast<long>(h) - 1, y1); ++py)
      for (long px = std::max(0L, x0); px <= std::min<long>(static_cast<long>(w) - 1, x1); ++px)
        if (std::hypot(static_cast<double>(py) - y, static_cast<double>(px) - x) <= r && !label[py * w + px]) {
          label[py * w + px] = 1;
          ++marked;
        }
  }
};

struct Walker {
  double y, x, angle, radius;
  int depth;
};

inline void grow_tree(Canvas& canvas, Walker root, double branch_prob, Rng& rng) {
  constexpr double kStep = 0.5;
  constexpr double kMinRadius = 0.75;
  std::vector<Walker> stack{root};
  while (!stack.empty()) {
    Walker w = stack.back();
    stack.pop_back();
    const double max_len = canvas.fov_radius * (w.depth == 0 ? 2.0 : 1.0);
    for (double len = 0; len < max_len; len += kStep) {
      if (canvas.full() || !canvas.disk_inside_fov(w.y, w.x, w.radius)) break;
      canvas.stamp(w.y, w.x, w.radius);
      w.angle += 0.08 * rng.normal();
      if (w.depth < 3 && rng.bernoulli(branch_prob * kStep)) {
        const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
        stack.push_back({w.y, w.x, w.angle + side * rng.uniform(0.5, 1.1), std::max(kMinRadius, w.radius * 0.75),
                         w.depth + 1});
      }
      w.y += kStep * std::sin(w.angle);
      w.x += kStep * std::cos(w.angle);
    }
  }
}

inline std::vector<double> gaussian_blur(const std::vector<double>& src, std::size_t h, std::size_t w, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double s = 0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) {
        const long xx = std::clamp<long>(static_cast<long>(x) + i, 0, static_cast<long>(w) - 1);
        acc += k[i + r] * src[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) {
        const long yy = std::clamp<long>(static_cast<long>(y) + i, 0, static_cast<long>(h) - 1);
        acc += k[i + r] * tmp[yy * w + x];
      }
      out[y * w + x] = acc;
    }
  return out;
}

// Bilinear upsampling of a coarse random grid: smooth illumination field.
inline std::vector<double> low_frequency_noise(std::size_t h, std::size_t w, Rng& rng) {
  constexpr std::size_t kGrid = 5;
  double grid[kGrid][kGrid];
  for (auto& row : grid)
    for (double& v : row) v = rng.uniform(-1.0, 1.0);
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double gy = static_cast<double>(y) / static_cast<double>(h - 1) * (kGrid - 1);
      const double gx = static_cast<double>(x) / static_cast<double>(w - 1) * (kGrid - 1);
      const std::size_t y0 = std::min<std::size_t>(kGrid - 2, static_cast<std::size_t>(gy));
      const std::size_t x0 = std::min<std::size_t>(kGrid - 2, static_cast<std::size_t>(gx));
      const double ty = gy - static_cast<double>(y0), tx = gx - static_cast<double>(x0);
      out[y * w + x] = (1 - ty) * ((1 - tx) * grid[y0][x0] + tx * grid[y0][x0 + 1]) +
                       ty * ((1 - tx) * grid[y0 + 1][x0] + tx * grid[y0 + 1][x0 + 1]);
    }
  return out;
}

}  // namespace synth_detail

/// Draws one sample; fully determined by cfg (including cfg.seed).
template <typename T>
Sample<T> synth_vessels(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).split(Stream::kSynth);
  const std::size_t H = cfg.height, W = cfg.width, HW = H * W;
  synth_detail::Canvas canvas{H, W, (static_cast<double>(H) - 1) / 2, (static_cast<double>(W) - 1) / 2,
                              0.47 * static_cast<double>(std::min(H, W)), std::vector<std::uint8_t>(HW, 0)};
  canvas.budget = static_cast<std::size_t>(cfg.max_vessel_fraction * static_cast<double>(HW));

  // Trees that leave the FOV early can leave a nearly empty label; redraw those.
  const auto floor = static_cast<std::size_t>(cfg.min_vessel_fraction * static_cast<double>(HW));
  for (int attempt = 0; attempt < 16 && (attempt == 0 || canvas.marked < floor); ++attempt) {
    std::fill(canvas.label.begin(), canvas.label.end(), std::uint8_t{0});
    canvas.marked = 0;
    for (std::size_t t = 0; t < cfg.n_trees; ++t) {
      const double radius = rng.uniform(cfg.width_min, cfg.width_max) / 2;
      const double rho = canvas.fov_radius * std::sqrt(rng.uniform(0.0, 0.5));
      const double phi = rng.uniform(0.0, 2 * std::numbers::pi);
      synth_detail::Walker root{canvas.cy + rho * std::sin(phi), canvas.cx + rho * std::cos(phi),
                                rng.uniform(0.0, 2 * std::numbers::pi), std::max(0.75, radius), 0};
      synth_detail::grow_tree(canvas, root, cfg.branch_prob, rng);
    }
  }

  Sample<T> s;
  s.id = "synth_" + std::to_string(cfg.seed);
  s.label = Tensor<T>({1, H, W});
  s.fov_mask = Tensor<T>({1, H, W});
  s.image = Tensor<T>({3, H, W});
  std::vector<double> lbl(HW);
  for (std::size_t i = 0; i < HW; ++i) {
    s.label[i] = canvas.label[i] ? T(1) : T(0);
    lbl[i] = canvas.label[i];
    const double y = static_cast<double>(i / W), x = static_cast<double>(i % W);
    s.fov_mask[i] = std::hypot(y - canvas.cy, x - canvas.cx) <= canvas.fov_radius ? T(1) : T(0);
  }

  const std::vector<double> soft = synth_detail::gaussian_blur(lbl, H, W, 0.7);
  const std::vector<double> shade = synth_detail::low_frequency_noise(H, W, rng);
  const double tint[3] = {rng.uniform(0.70, 0.85), rng.uniform(0.35, 0.50), rng.uniform(0.15, 0.25)};
  const double contrast[3] = {rng.uniform(0.15, 0.30), rng.uniform(0.35, 0.55), rng.uniform(0.25, 0.40)};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < HW; ++i) {
      double v = 0;
      if (s.fov_mask[i] > T(0)) {
        const double bg = tint[c] * (1.0 + 0.2 * shade[i]);
        v = bg * (1.0 - contrast[c] * std::min(1.0, soft[i])) + cfg.noise_sigma * rng.normal();
      }
      s.image[c * HW + i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
  return s;
}

/// n samples with seeds derived from `base.seed`, ids synth_0000.. in order;
/// the first n_train form the training split.
template <typename T>
std::vector<Sample<T>> synth_dataset(const SynthConfig& base, std::size_t n, SplitManifest* manifest = nullptr,
                                     std::size_t n_train = 0) {
  std::vector<Sample<T>> out;
  Rng seeds = Rng(base.seed).split(Stream::kSynth);
  for (std::size_t i = 0; i < n; ++i) {
    SynthConfig cfg = base;
    cfg.seed = seeds.next_u64();
    Sample<T> s = synth_vessels<T>(cfg);
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    s.id = id;
    out.push_back(std::move(s));
  }
  if (manifest) {
    std::vector<std::string> ids;
    for (const auto& s : out) ids.push_back(s.id);
    *manifest = make_manifest("first:" + std::to_string(n_train), ids);
  }
  return out;
}

}  // namespace parefine
