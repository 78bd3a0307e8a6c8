#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "parefine/errors.hpp"
#include "parefine/rng.hpp"
#include "parefine/tensor.hpp"

namespace parefine {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t coords_checked = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckResult> inputs;
  double tolerance = 0;

  bool pass() const {
    return std::all_of(inputs.begin(), inputs.end(), [](const auto& r) { return r.pass; });
  }
  double max_error() const {
    double m = 0;
    for (const auto& r : inputs) m = std::max(m, r.max_rel_error);
    return m;
  }
};

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // Per-element error is |a - n| / max(|a|, |n|, floor_ratio * scale), where
  // scale is the largest gradient magnitude seen across all inputs. The floor
  // keeps gradients that are exactly zero in theory (a conv bias ahead of
  // train-mode batchnorm) from comparing rounding noise against itself.
  double floor_ratio = 1e-3;
  // 0 checks every coordinate; otherwise a seeded random subset of this size.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

using LossFn = std::function<double(const std::vector<Tensor<double>>&)>;

/// Central finite differences of `loss` around `inputs`, compared against the
/// supplied analytic gradients. Runs in double precision.
inline GradCheckReport grad_check(const LossFn& loss, std::vector<Tensor<double>> inputs,
                                  const std::vector<Tensor<double>>& analytic, const GradCheckOptions& opt = {},
                                  const std::vector<std::string>& names = {}) {
  if (analytic.size() != inputs.size()) throw DimensionError("grad_check: analytic gradient count mismatch");
  GradCheckReport report;
  report.tolerance = opt.tolerance;
  Rng rng(opt.seed);
  std::vector<std::vector<std::size_t>> coords(inputs.size());
  std::vector<std::vector<double>> numeric(inputs.size());
  double scale = 0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (analytic[t].shape() != inputs[t].shape()) {
      throw DimensionError("grad_check: analytic gradient " + std::to_string(t) + " has shape " +
                           shape_str(analytic[t].shape()) + ", input has " + shape_str(inputs[t].shape()));
    }
    const std::size_t n = inputs[t].numel();
    if (opt.max_coords == 0 || opt.max_coords >= n) {
      coords[t].resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[t][i] = i;
    } else {
      for (std::size_t i = 0; i < opt.max_coords; ++i) coords[t].push_back(rng.below(n));
    }
    for (std::size_t i : coords[t]) {
      double& x = inputs[t][i];
      const double saved = x;
      x = saved + opt.step;
      const double up = loss(inputs);
      x = saved - opt.step;
      const double down = loss(inputs);
      x = saved;
      numeric[t].push_back((up - down) / (2 * opt.step));
      scale = std::max({scale, std::abs(numeric[t].back()), std::abs(analytic[t][i])});
    }
  }

  const double floor = std::max(opt.floor_ratio * scale, 1e-12);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    GradCheckResult r;
    r.name = t < names.size() ? names[t] : "input" + std::to_string(t);
    r.coords_checked = coords[t].size();
    for (std::size_t c = 0; c < coords[t].size(); ++c) {
      const double a = analytic[t][coords[t][c]];
      const double denom = std::max({std::abs(a), std::abs(numeric[t][c]), floor});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric[t][c]) / denom);
    }
    r.pass = r.max_rel_error < opt.tolerance;
    report.inputs.push_back(r);
  }
  return report;
}

}  // namespace parefine
