#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "parefine/model.hpp"

namespace parefine {

/// Counts calls into response cue erasing; lets tests assert that inference
/// never touches it.
inline std::atomic<std::uint64_t>& rce_invocations() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

struct ErasureSet {
  // (row, col), descending confidence, ties in row-major order.
  std::vector<std::pair<std::size_t, std::size_t>> positions;
  // FNV-1a hash of the map the selection was made from.
  std::uint64_t source = 0;
};

namespace rce_detail {

template <typename T>
std::uint64_t fingerprint(const T* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace rce_detail

/// The k pixels with the largest confidence |p - 0.5| (foreground and
/// background alike). `coarse` is 1 x H x W or 1 x 1 x H x W.
template <typename T>
ErasureSet select_topk_confident(const Tensor<T>& coarse, std::size_t k) {
  ++rce_invocations();
  const Shape& s = coarse.shape();
  const bool ok = (s.size() == 3 && s[0] == 1) || (s.size() == 4 && s[0] == 1 && s[1] == 1);
  if (!ok) throw DimensionError("select_topk_confident: expected a single 1 x H x W map, got " + shape_str(s));
  const std::size_t W = s.back(), n = coarse.numel();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(k, n);
  auto conf = [&](std::size_t i) { return std::abs(coarse[i] - T(0.5)); };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const T ca = conf(a), cb = conf(b);
                      return ca > cb || (ca == cb && a < b);
                    });
  ErasureSet set;
  set.source = rce_detail::fingerprint(coarse.data(), n);
  set.positions.reserve(take);
  for (std::size_t i = 0; i < take; ++i) set.positions.emplace_back(order[i] / W, order[i] % W);
  return set;
}

/// Copy of `image` (3 x H x W or 1 x 3 x H x W) with every channel zeroed at
/// each selected position; `radius` > 0 widens each position to a square.
template <typename T>
Tensor<T> erase(const Tensor<T>& image, const ErasureSet& set, std::size_t radius = 0) {
  ++rce_invocations();
  const std::size_t r = image.rank();
  if (r != 3 && !(r == 4 && image.dim(0) == 1)) throw DimensionError("erase: expected a single C x H x W image");
  const std::size_t C = image.dim(r - 3), H = image.dim(r - 2), W = image.dim(r - 1);
  Tensor<T> out = image;
  for (const auto& [row, col] : set.positions) {
    if (row >= H || col >= W) {
      throw std::logic_error("erase: position (" + std::to_string(row) + ", " + std::to_string(col) +
                             ") outside the image");
    }
    const std::size_t y0 = row >= radius ? row - radius : 0, y1 = std::min(H - 1, row + radius);
    const std::size_t x0 = col >= radius ? col - radius : 0, x1 = std::min(W - 1, col + radius);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = y0; y <= y1; ++y)
        for (std::size_t x = x0; x <= x1; ++x) out[(c * H + y) * W + x] = T(0);
  }
  return out;
}

template <typename T>
struct BranchOutputs {
  SegPair<T> main, aux;
  ModelCache<T> main_cache, aux_cache;
  std::vector<ErasureSet> erasures;  // one per batch element
  Tensor<T> erased_input;
};

/// Main branch on X, auxiliary branch on X with the top-k confident positions
/// of the main coarse map erased. Both use the same parameters; batchnorm
/// statistics are per branch and only the main branch moves running stats.
template <typename T>
BranchOutputs<T> dual_branch_forward(const Model& model, ParamStore<T>& store, const Tensor<T>& x, std::size_t k,
                                     std::size_t radius = 0) {
  BranchOutputs<T> out;
  out.main = model.forward(store, x, {Mode::kTrain, true}, &out.main_cache);
  // Selection reads a detached copy of the coarse map.
  const Tensor<T> snapshot = out.main.coarse;
  std::vector<Tensor<T>> erased;
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    out.erasures.push_back(select_topk_confident(ops::slice_batch(snapshot, n), k));
    erased.push_back(erase(ops::slice_batch(x, n), out.erasures.back(), radius));
  }
  out.erased_input = ops::stack_batch(erased);
  out.aux = model.forward(store, out.erased_input, {Mode::kTrain, false}, &out.aux_cache);
  return out;
}

}  // namespace parefine
