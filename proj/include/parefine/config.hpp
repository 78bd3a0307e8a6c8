#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include "parefine/errors.hpp"
#include "parefine/model.hpp"

namespace parefine {

/// Every training hyper-parameter. Defaults follow the published protocol
/// where one exists; k and lambda are this library's choices.
struct TrainConfig {
  double lr = 0.005;
  std::size_t batch = 4;
  std::size_t max_iters = 6000;
  double patch_ratio = 0.3;
  std::size_t filter_size = 5;
  // Erased positions per patch: an absolute count if set, else a fraction of the patch area.
  std::optional<std::size_t> k_count;
  double k_fraction = 0.01;
  double lambda = 0.1;
  std::uint64_t seed = 0;
  int precision = 32;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t eval_every = 500;
  std::size_t checkpoint_every = 500;
  std::size_t unet_depth = 5;
  std::size_t unet_width = 8;
  bool use_pa_filters = true;
  FilterNormalization normalization = FilterNormalization::kSum;
  std::size_t erase_radius = 0;
  // Batches used to re-estimate batchnorm statistics before evaluation and
  // before the final model is written; 0 keeps the momentum estimates.
  std::size_t bn_recalibration = 100;

  void validate() const {
    auto fail = [](const std::string& m) { throw ParameterError("config: " + m); };
    if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be positive");
    if (batch == 0) fail("batch must be positive");
    if (!(patch_ratio > 0 && patch_ratio <= 1)) fail("patch_ratio must be in (0, 1]");
    if (filter_size != 3 && filter_size != 5 && filter_size != 7 && filter_size != 9)
      fail("filter_size must be 3, 5, 7 or 9");
    if (!(k_fraction >= 0 && k_fraction <= 1)) fail("k_fraction must be in [0, 1]");
    if (!(lambda >= 0) || !std::isfinite(lambda)) fail("lambda must be >= 0");
    if (precision != 32 && precision != 64) fail("precision must be 32 or 64");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
      fail("adam betas must be in [0, 1)");
    if (!(adam_eps > 0)) fail("adam_eps must be positive");
    if (unet_depth < 2) fail("unet_depth must be >= 2");
    if (unet_width == 0) fail("unet_width must be positive");
  }

  /// Number of positions erased in a patch of `area` pixels.
  std::size_t k_for(std::size_t area) const {
    if (k_count) return *k_count;
    return static_cast<std::size_t>(std::llround(k_fraction * static_cast<double>(area)));
  }

  /// The auxiliary branch only matters when the consistency term is weighted.
  bool dual_branch() const { return lambda > 0; }

  ModelConfig model() const {
    ModelConfig m;
    m.unet.depth = unet_depth;
    m.unet.base_width = unet_width;
    m.filter_size = filter_size;
    m.use_pa_filters = use_pa_filters;
    m.normalization = normalization;
    return m;
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  V v{};
  if constexpr (std::is_unsigned_v<V>) {
    if (!text.empty() && text[0] == '-') throw ParameterError("config: " + key + " must be non-negative, got '" + text + "'");
  }
  if (!(in >> v) || !(in >> std::ws).eof()) throw ParameterError("config: bad value for " + key + ": '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ParameterError("config: bad boolean for " + key + ": '" + text + "'");
}

using Setter = std::function<void(TrainConfig&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"lr", [](TrainConfig& c, const std::string& v) { c.lr = parse_number<double>("lr", v); }},
      {"batch", [](TrainConfig& c, const std::string& v) { c.batch = parse_number<std::size_t>("batch", v); }},
      {"max_iters", [](TrainConfig& c, const std::string& v) { c.max_iters = parse_number<std::size_t>("max_iters", v); }},
      {"patch_ratio", [](TrainConfig& c, const std::string& v) { c.patch_ratio = parse_number<double>("patch_ratio", v); }},
      {"filter_size",
       [](TrainConfig& c, const std::string& v) { c.filter_size = parse_number<std::size_t>("filter_size", v); }},
      {"k",
       [](TrainConfig& c, const std::string& v) {
         if (v == "auto") c.k_count.reset();
         else c.k_count = parse_number<std::size_t>("k", v);
       }},
      {"k_fraction", [](TrainConfig& c, const std::string& v) { c.k_fraction = parse_number<double>("k_fraction", v); }},
      {"lambda", [](TrainConfig& c, const std::string& v) { c.lambda = parse_number<double>("lambda", v); }},
      {"seed", [](TrainConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }},
      {"precision", [](TrainConfig& c, const std::string& v) { c.precision = parse_number<int>("precision", v); }},
      {"adam_beta1", [](TrainConfig& c, const std::string& v) { c.adam_beta1 = parse_number<double>("adam_beta1", v); }},
      {"adam_beta2", [](TrainConfig& c, const std::string& v) { c.adam_beta2 = parse_number<double>("adam_beta2", v); }},
      {"adam_eps", [](TrainConfig& c, const std::string& v) { c.adam_eps = parse_number<double>("adam_eps", v); }},
      {"eval_every",
       [](TrainConfig& c, const std::string& v) { c.eval_every = parse_number<std::size_t>("eval_every", v); }},
      {"checkpoint_every",
       [](TrainConfig& c, const std::string& v) { c.checkpoint_every = parse_number<std::size_t>("checkpoint_every", v); }},
      {"unet_depth",
       [](TrainConfig& c, const std::string& v) { c.unet_depth = parse_number<std::size_t>("unet_depth", v); }},
      {"unet_width",
       [](TrainConfig& c, const std::string& v) { c.unet_width = parse_number<std::size_t>("unet_width", v); }},
      {"use_pa_filters", [](TrainConfig& c, const std::string& v) { c.use_pa_filters = parse_bool("use_pa_filters", v); }},
      {"normalization",
       [](TrainConfig& c, const std::string& v) {
         if (v == "sum") c.normalization = FilterNormalization::kSum;
         else if (v == "clamp") c.normalization = FilterNormalization::kClamp;
         else throw ParameterError("config: normalization must be sum or clamp, got '" + v + "'");
       }},
      {"erase_radius",
       [](TrainConfig& c, const std::string& v) { c.erase_radius = parse_number<std::size_t>("erase_radius", v); }},
      {"bn_recalibration",
       [](TrainConfig& c, const std::string& v) { c.bn_recalibration = parse_number<std::size_t>("bn_recalibration", v); }},
  };
  return table;
}

}  // namespace config_detail

/// Applies one key=value assignment.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = config_detail::setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ParameterError("config: unknown key '" + key + "'");
  it->second(cfg, config_detail::trim(value));
}

/// Flat key=value lines; '#' starts a comment. Later lines override earlier ones.
inline TrainConfig parse_config(const std::string& text, TrainConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    }
    set_config_value(cfg, config_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

/// Canonical text form; parse_config(to_text(c)) == c.
inline std::string to_text(const TrainConfig& c) {
  using config_detail::format_double;
  std::string s;
  auto put = [&](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
  put("lr", format_double(c.lr));
  put("batch", std::to_string(c.batch));
  put("max_iters", std::to_string(c.max_iters));
  put("patch_ratio", format_double(c.patch_ratio));
  put("filter_size", std::to_string(c.filter_size));
  put("k", c.k_count ? std::to_string(*c.k_count) : "auto");
  put("k_fraction", format_double(c.k_fraction));
  put("lambda", format_double(c.lambda));
  put("seed", std::to_string(c.seed));
  put("precision", std::to_string(c.precision));
  put("adam_beta1", format_double(c.adam_beta1));
  put("adam_beta2", format_double(c.adam_beta2));
  put("adam_eps", format_double(c.adam_eps));
  put("eval_every", std::to_string(c.eval_every));
  put("checkpoint_every", std::to_string(c.checkpoint_every));
  put("unet_depth", std::to_string(c.unet_depth));
  put("unet_width", std::to_string(c.unet_width));
  put("use_pa_filters", c.use_pa_filters ? "true" : "false");
  put("normalization", c.normalization == FilterNormalization::kSum ? "sum" : "clamp");
  put("erase_radius", std::to_string(c.erase_radius));
  put("bn_recalibration", std::to_string(c.bn_recalibration));
  return s;
}

inline bool operator==(const TrainConfig& a, const TrainConfig& b) { return to_text(a) == to_text(b); }

}  // namespace parefine
