#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "parefine/errors.hpp"
#include "parefine/tensor.hpp"

namespace parefine {

struct Confusion {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
};

/// F1 / AUC / ACC in percent. f1_degenerate is set when 2TP + FP + FN = 0
/// (no positives predicted or present), in which case f1 is reported as 0.
struct MetricReport {
  double f1 = 0;
  double auc = 0;
  double acc = 0;
  Confusion confusion;
  std::uint64_t pixels_evaluated = 0;
  bool f1_degenerate = false;
  bool auc_defined = true;
};

namespace metric_detail {

template <typename T>
void require_compatible(const Tensor<T>& scores, const Tensor<T>& labels, const Tensor<T>* mask, const char* op) {
  if (scores.numel() != labels.numel()) {
    throw DimensionError(std::string(op) + ": scores " + shape_str(scores.shape()) + " vs labels " +
                         shape_str(labels.shape()));
  }
  if (mask && mask->numel() != scores.numel()) {
    throw DimensionError(std::string(op) + ": mask " + shape_str(mask->shape()) + " vs scores " +
                         shape_str(scores.shape()));
  }
}

template <typename T>
bool evaluated(const Tensor<T>* mask, std::size_t i) {
  return mask == nullptr || (*mask)[i] >= T(0.5);
}

}  // namespace metric_detail

/// Confusion counts and F1/ACC over unmasked pixels; prediction = score >= threshold.
template <typename T>
MetricReport confusion_metrics(const Tensor<T>& scores, const Tensor<T>& labels, const Tensor<T>* mask = nullptr,
                               double threshold = 0.5) {
  metric_detail::require_compatible(scores, labels, mask, "confusion_metrics");
  MetricReport r;
  Confusion& c = r.confusion;
  for (std::size_t i = 0; i < scores.numel(); ++i) {
    if (!metric_detail::evaluated(mask, i)) continue;
    const bool pred = scores[i] >= threshold;
    const bool pos = labels[i] >= T(0.5);
    if (pred && pos) ++c.tp;
    else if (pred) ++c.fp;
    else if (pos) ++c.fn;
    else ++c.tn;
  }
  r.pixels_evaluated = c.total();
  if (r.pixels_evaluated == 0) throw DataError("confusion_metrics: mask leaves zero pixels to evaluate");
  r.acc = 100.0 * static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  const std::uint64_t f1_den = 2 * c.tp + c.fp + c.fn;
  r.f1_degenerate = f1_den == 0;
  r.f1 = r.f1_degenerate ? 0.0 : 100.0 * static_cast<double>(2 * c.tp) / static_cast<double>(f1_den);
  return r;
}

inline constexpr std::size_t kAucBins = 256;

/// ROC area (percent) from 256-bin score histograms per class, trapezoidal
/// integration over bin thresholds. Scores are clamped to [0, 1].
template <typename T>
double auc(const Tensor<T>& scores, const Tensor<T>& labels, const Tensor<T>* mask = nullptr) {
  metric_detail::require_compatible(scores, labels, mask, "auc");
  std::array<std::uint64_t, kAucBins> pos{}, neg{};
  for (std::size_t i = 0; i < scores.numel(); ++i) {
    if (!metric_detail::evaluated(mask, i)) continue;
    const double s = std::clamp(static_cast<double>(scores[i]), 0.0, 1.0);
    const auto b = std::min<std::size_t>(kAucBins - 1, static_cast<std::size_t>(s * kAucBins));
    (labels[i] >= T(0.5) ? pos : neg)[b]++;
  }
  const double P = static_cast<double>(std::accumulate(pos.begin(), pos.end(), std::uint64_t{0}));
  const double N = static_cast<double>(std::accumulate(neg.begin(), neg.end(), std::uint64_t{0}));
  if (P == 0 || N == 0) throw DataError("auc: ground truth has a single class among evaluated pixels");
  // Sweep the threshold from above the top bin downwards.
  double area = 0, tp = 0, fp = 0;
  for (std::size_t b = kAucBins; b-- > 0;) {
    const double tp_next = tp + static_cast<double>(pos[b]);
    const double fp_next = fp + static_cast<double>(neg[b]);
    area += (fp_next - fp) * (tp + tp_next) / 2.0;
    tp = tp_next;
    fp = fp_next;
  }
  return 100.0 * area / (P * N);
}

/// Exact rank-based AUC (Mann-Whitney, ties count one half), percent.
template <typename T>
double auc_exact(const Tensor<T>& scores, const Tensor<T>& labels, const Tensor<T>* mask = nullptr) {
  metric_detail::require_compatible(scores, labels, mask, "auc_exact");
  std::vector<std::pair<double, bool>> items;
  for (std::size_t i = 0; i < scores.numel(); ++i)
    if (metric_detail::evaluated(mask, i)) items.emplace_back(static_cast<double>(scores[i]), labels[i] >= T(0.5));
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double P = 0, N = 0, rank_sum = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    while (j < items.size() && items[j].first == items[i].first) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t q = i; q < j; ++q) {
      if (items[q].second) {
        rank_sum += mid_rank;
        ++P;
      } else {
        ++N;
      }
    }
    i = j;
  }
  if (P == 0 || N == 0) throw DataError("auc_exact: ground truth has a single class among evaluated pixels");
  return 100.0 * (rank_sum - P * (P + 1) / 2.0) / (P * N);
}

/// Confusion metrics plus histogram AUC. AUC is left undefined (and reported
/// as 0) when only one class is present.
template <typename T>
MetricReport evaluate(const Tensor<T>& scores, const Tensor<T>& labels, const Tensor<T>* mask = nullptr,
                      double threshold = 0.5) {
  MetricReport r = confusion_metrics(scores, labels, mask, threshold);
  const bool both = (r.confusion.tp + r.confusion.fn) > 0 && (r.confusion.fp + r.confusion.tn) > 0;
  r.auc_defined = both;
  r.auc = both ? auc(scores, labels, mask) : 0.0;
  return r;
}

/// Mean of F1/AUC/ACC across reports; confusion counts are summed.
inline MetricReport mean_report(const std::vector<MetricReport>& reports) {
  MetricReport m;
  if (reports.empty()) return m;
  std::size_t auc_n = 0;
  for (const auto& r : reports) {
    m.f1 += r.f1;
    m.acc += r.acc;
    if (r.auc_defined) {
      m.auc += r.auc;
      ++auc_n;
    }
    m.confusion.tp += r.confusion.tp;
    m.confusion.fp += r.confusion.fp;
    m.confusion.tn += r.confusion.tn;
    m.confusion.fn += r.confusion.fn;
    m.pixels_evaluated += r.pixels_evaluated;
  }
  m.f1 /= static_cast<double>(reports.size());
  m.acc /= static_cast<double>(reports.size());
  m.auc_defined = auc_n > 0;
  m.auc = auc_n ? m.auc / static_cast<double>(auc_n) : 0.0;
  return m;
}

inline std::string format_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// Flat key=value block, fixed field order.
inline std::string to_key_value(const MetricReport& r) {
  std::string s;
  s += "f1=" + format_percent(r.f1) + "\n";
  s += "auc=" + format_percent(r.auc) + "\n";
  s += "acc=" + format_percent(r.acc) + "\n";
  s += "tp=" + std::to_string(r.confusion.tp) + "\n";
  s += "fp=" + std::to_string(r.confusion.fp) + "\n";
  s += "tn=" + std::to_string(r.confusion.tn) + "\n";
  s += "fn=" + std::to_string(r.confusion.fn) + "\n";
  s += "pixels=" + std::to_string(r.pixels_evaluated) + "\n";
  s += std::string("f1_degenerate=") + (r.f1_degenerate ? "1" : "0") + "\n";
  s += std::string("auc_defined=") + (r.auc_defined ? "1" : "0") + "\n";
  return s;
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["f1"] = r.f1;
  j["auc"] = r.auc;
  j["acc"] = r.acc;
  j["tp"] = r.confusion.tp;
  j["fp"] = r.confusion.fp;
  j["tn"] = r.confusion.tn;
  j["fn"] = r.confusion.fn;
  j["pixels"] = r.pixels_evaluated;
  j["f1_degenerate"] = r.f1_degenerate;
  j["auc_defined"] = r.auc_defined;
  return j;
}

inline MetricReport report_from_json(const nlohmann::ordered_json& j) {
  MetricReport r;
  r.f1 = j.at("f1").get<double>();
  r.auc = j.at("auc").get<double>();
  r.acc = j.at("acc").get<double>();
  r.confusion = {j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(), j.at("tn").get<std::uint64_t>(),
                 j.at("fn").get<std::uint64_t>()};
  r.pixels_evaluated = j.at("pixels").get<std::uint64_t>();
  r.f1_degenerate = j.at("f1_degenerate").get<bool>();
  r.auc_defined = j.at("auc_defined").get<bool>();
  return r;
}

}  // namespace parefine
