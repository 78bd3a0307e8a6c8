#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "parefine/checkpoint.hpp"
#include "parefine/config.hpp"
#include "parefine/dataset.hpp"
#include "parefine/losses.hpp"
#include "parefine/metrics.hpp"
#include "parefine/model.hpp"
#include "parefine/rce.hpp"

namespace parefine {

struct PatchSize {
  std::size_t h = 0, w = 0;

  friend bool operator==(const PatchSize&, const PatchSize&) = default;
};

/// floor(ratio * extent) per axis. The small slack keeps products such as
/// 0.3 * 960 from landing just below an integer.
inline PatchSize patch_size(std::size_t image_h, std::size_t image_w, double ratio) {
  if (!(ratio > 0 && ratio <= 1)) throw ParameterError("patch_size: ratio must be in (0, 1]");
  const PatchSize p{static_cast<std::size_t>(std::floor(ratio * static_cast<double>(image_h) + 1e-9)),
                    static_cast<std::size_t>(std::floor(ratio * static_cast<double>(image_w) + 1e-9))};
  if (p.h < 16 || p.w < 16) {
    throw ParameterError("patch_size: " + std::to_string(p.h) + "x" + std::to_string(p.w) +
                         " is below the 16 pixel minimum");
  }
  return p;
}

namespace train_detail {

template <typename T>
Tensor<T> crop_chw(const Tensor<T>& t, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor<T> out({C, h, w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(t.data() + (c * H + y0 + y) * W + x0, w, out.data() + (c * h + y) * w);
  return out;
}

template <typename T>
void flip_w(Tensor<T>& t) {
  const std::size_t rows = t.dim(0) * t.dim(1), W = t.dim(2);
  for (std::size_t r = 0; r < rows; ++r) std::reverse(t.data() + r * W, t.data() + (r + 1) * W);
}

template <typename T>
void flip_h(Tensor<T>& t) {
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H / 2; ++y)
      std::swap_ranges(t.data() + (c * H + y) * W, t.data() + (c * H + y + 1) * W,
                       t.data() + (c * H + H - 1 - y) * W);
}

}  // namespace train_detail

/// Uniformly placed crop of image, label and mask. Draws the row offset, then
/// the column offset.
template <typename T>
Sample<T> sample_patch(const Sample<T>& s, PatchSize p, Rng& rng) {
  const std::size_t H = s.image.dim(1), W = s.image.dim(2);
  if (p.h > H || p.w > W) {
    throw DimensionError("sample_patch: patch " + std::to_string(p.h) + "x" + std::to_string(p.w) +
                         " larger than image " + std::to_string(H) + "x" + std::to_string(W));
  }
  const std::size_t y0 = rng.below(H - p.h + 1);
  const std::size_t x0 = rng.below(W - p.w + 1);
  Sample<T> out;
  out.id = s.id;
  out.image = train_detail::crop_chw(s.image, y0, x0, p.h, p.w);
  out.label = train_detail::crop_chw(s.label, y0, x0, p.h, p.w);
  out.fov_mask = train_detail::crop_chw(s.fov_mask, y0, x0, p.h, p.w);
  return out;
}

/// Independent horizontal and vertical flips, each with probability 0.5.
/// Always consumes exactly two draws.
template <typename T>
void augment_flip(Sample<T>& s, Rng& rng) {
  const bool horizontal = rng.bernoulli(0.5);
  const bool vertical = rng.bernoulli(0.5);
  for (Tensor<T>* t : {&s.image, &s.label, &s.fov_mask}) {
    if (horizontal) train_detail::flip_w(*t);
    if (vertical) train_detail::flip_h(*t);
  }
}

struct AdamOptions {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update at step t >= 1 over trainable entries;
/// gradients are zeroed afterwards.
template <typename T>
void adam_step(ParamStore<T>& store, const AdamOptions& o, std::uint64_t t) {
  if (t == 0) throw ParameterError("adam_step: step index starts at 1");
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
  for (auto& e : store.entries()) {
    if (!e.trainable) continue;
    if (!e.grad.all_finite()) throw NumericError("adam_step: non-finite gradient in '" + e.name + "'");
    for (std::size_t i = 0; i < e.value.numel(); ++i) {
      const double g = e.grad[i];
      const double m = o.beta1 * e.adam_m[i] + (1 - o.beta1) * g;
      const double v = o.beta2 * e.adam_v[i] + (1 - o.beta2) * g * g;
      e.adam_m[i] = static_cast<T>(m);
      e.adam_v[i] = static_cast<T>(v);
      const double mhat = m / c1, vhat = v / c2;
      e.value[i] = static_cast<T>(e.value[i] - o.lr * mhat / (std::sqrt(vhat) + o.eps));
    }
  }
  store.zero_grad();
}

/// Replaces every batchnorm running statistic with the exact average of the
/// batch statistics seen over `batches` training batches, weights frozen.
/// Patches are drawn from `rng` the same way training draws them.
template <typename T>
void recalibrate_batchnorm(const Model& model, ParamStore<T>& store, const std::vector<Sample<T>>& train_set,
                           PatchSize patch, std::size_t batch, std::size_t batches, Rng rng) {
  for (std::size_t i = 1; i <= batches; ++i) {
    std::vector<Tensor<T>> images;
    for (std::size_t b = 0; b < batch; ++b) {
      const Sample<T>& s = train_set[rng.below(train_set.size())];
      images.push_back(sample_patch(s, patch, rng).image);
    }
    PassOptions opts{Mode::kTrain, true, 1.0 / static_cast<double>(i)};
    model.forward(store, ops::stack_batch(images), opts);
  }
}

/// Full-image single-branch prediction; batchnorm uses running statistics.
/// `image` is 3 x H x W or 1 x 3 x H x W; returns 1 x 1 x H x W maps.
template <typename T>
SegPair<T> infer(const Model& model, ParamStore<T>& store, const Tensor<T>& image) {
  const Tensor<T> x = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  return model.forward(store, x, {Mode::kInfer, false});
}

struct SplitEvaluation {
  std::vector<std::string> ids;
  std::vector<MetricReport> refined, coarse;
  MetricReport refined_mean, coarse_mean;
};

template <typename T>
SplitEvaluation evaluate_split(const Model& model, ParamStore<T>& store, const std::vector<Sample<T>>& samples) {
  SplitEvaluation ev;
  for (const auto& s : samples) {
    const SegPair<T> out = infer(model, store, s.image);
    const Tensor<T> refined = out.refined.reshaped(s.label.shape());
    const Tensor<T> coarse = out.coarse.reshaped(s.label.shape());
    ev.ids.push_back(s.id);
    ev.refined.push_back(evaluate(refined, s.label, &s.fov_mask));
    ev.coarse.push_back(evaluate(coarse, s.label, &s.fov_mask));
  }
  ev.refined_mean = mean_report(ev.refined);
  ev.coarse_mean = mean_report(ev.coarse);
  return ev;
}

struct EvalRecord {
  std::uint64_t iteration = 0;
  MetricReport refined, coarse;
};

inline nlohmann::ordered_json to_json(const EvalRecord& r) {
  nlohmann::ordered_json j;
  j["iter"] = r.iteration;
  j["refined"] = to_json(r.refined);
  j["coarse"] = to_json(r.coarse);
  return j;
}

inline std::string format_loss_line(std::uint64_t iter, const LossValue& v) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu\t%.17g\t%.17g\t%.17g\t%.17g", static_cast<unsigned long long>(iter), v.total,
                v.l_s, v.l_r, v.lambda);
  return buf;
}

inline constexpr const char* kTrainLogHeader = "iter\ttotal\tl_s\tl_r\tlambda";

template <typename T>
struct TrainOptions {
  // Empty: nothing is written to disk.
  std::filesystem::path out_dir{};
  // Continue from this state instead of a fresh initialization.
  const Checkpoint<T>* resume = nullptr;
  // Stop after this iteration (0: run to max_iters). Simulates an interrupted run.
  std::uint64_t stop_after = 0;
  // Called after each iteration.
  std::function<void(std::uint64_t, const LossValue&)> on_iteration{};
  std::function<void(const EvalRecord&)> on_eval{};
};

template <typename T>
struct TrainResult {
  ParamStore<T> params;
  std::uint64_t iteration = 0;
  std::vector<LossValue> losses;  // one per iteration run in this call
  std::vector<EvalRecord> evals;
  PatchSize patch;
  std::size_t k = 0;
};

namespace train_detail {

// Keeps only records up to `iter` in a log being resumed, so an interrupted
// and resumed run leaves the same files as an uninterrupted one.
inline void truncate_log(const std::filesystem::path& path, std::uint64_t iter, bool has_header, bool json) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first && has_header) {
      keep.push_back(line);
      first = false;
      continue;
    }
    first = false;
    std::uint64_t it = 0;
    if (json) it = nlohmann::ordered_json::parse(line).at("iter").get<std::uint64_t>();
    else it = std::stoull(line.substr(0, line.find('\t')));
    if (it <= iter) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

template <typename T>
Checkpoint<T> snapshot(const TrainConfig& cfg, std::uint64_t iter, const ParamStore<T>& store) {
  Checkpoint<T> c;
  c.config = cfg;
  c.iteration = iter;
  c.seed = cfg.seed;
  const Rng base(cfg.seed);
  c.rng_key = base.key();
  c.rng_counter = base.counter();
  c.params = store;
  return c;
}

inline std::string ckpt_name(std::uint64_t iter) { return "ckpt_" + std::to_string(iter) + ".parf"; }

}  // namespace train_detail

/// Patch-based training. Each iteration t draws its batch from streams keyed
/// by (seed, t), so results do not depend on where a run was resumed.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<Sample<T>>& train_set,
                     const std::vector<Sample<T>>& test_set, const TrainOptions<T>& opts = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training split");
  const Model model(cfg.model());

  std::size_t min_h = train_set[0].image.dim(1), min_w = train_set[0].image.dim(2);
  for (const auto& s : train_set) {
    min_h = std::min(min_h, s.image.dim(1));
    min_w = std::min(min_w, s.image.dim(2));
  }
  TrainResult<T> result;
  result.patch = patch_size(min_h, min_w, cfg.patch_ratio);
  result.k = cfg.k_for(result.patch.h * result.patch.w);

  std::uint64_t start = 0;
  if (opts.resume) {
    if (!(opts.resume->config == cfg)) throw ParameterError("train: resume checkpoint was written with another config");
    result.params = opts.resume->params;
    start = opts.resume->iteration;
  } else {
    result.params = model.make_params<T>(cfg.seed);
  }
  ParamStore<T>& store = result.params;

  const bool write = !opts.out_dir.empty();
  const auto loss_log = opts.out_dir / "train_log.tsv";
  const auto metric_log = opts.out_dir / "metrics.jsonl";
  if (write) {
    std::filesystem::create_directories(opts.out_dir);
    if (start == 0) {
      std::ofstream(loss_log, std::ios::trunc) << kTrainLogHeader << "\n";
      std::ofstream(metric_log, std::ios::trunc);
    } else {
      train_detail::truncate_log(loss_log, start, true, false);
      train_detail::truncate_log(metric_log, start, false, true);
    }
  }
  std::ofstream loss_out, metric_out;
  if (write) {
    loss_out.open(loss_log, std::ios::app);
    metric_out.open(metric_log, std::ios::app);
  }

  const AdamOptions adam{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
  const Rng patches_root = Rng(cfg.seed).split(Stream::kPatches);
  const Rng augment_root = Rng(cfg.seed).split(Stream::kAugment);
  const Rng calibration_root = Rng(cfg.seed).split(Stream::kCalibration);
  auto recalibrate = [&](ParamStore<T>& params, std::uint64_t t) {
    if (cfg.bn_recalibration == 0) return;
    recalibrate_batchnorm(model, params, train_set, result.patch, cfg.batch, cfg.bn_recalibration,
                          calibration_root.split(t));
  };
  const std::uint64_t end = opts.stop_after ? std::min<std::uint64_t>(opts.stop_after, cfg.max_iters) : cfg.max_iters;

  for (std::uint64_t t = start + 1; t <= end; ++t) {
    Rng prng = patches_root.split(t);
    Rng arng = augment_root.split(t);
    std::vector<Tensor<T>> images, labels;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& src = train_set[prng.below(train_set.size())];
      Sample<T> p = sample_patch(src, result.patch, prng);
      augment_flip(p, arng);
      images.push_back(std::move(p.image));
      labels.push_back(std::move(p.label));
    }
    const Tensor<T> x = ops::stack_batch(images);
    const Tensor<T> g = ops::stack_batch(labels);

    LossValue loss;
    if (cfg.dual_branch()) {
      BranchOutputs<T> br = dual_branch_forward(model, store, x, result.k, cfg.erase_radius);
      TotalLoss<T> tl = total_loss(br.main.refined, br.aux.refined, g, cfg.lambda);
      loss = tl.value;
      if (!std::isfinite(loss.total)) throw NumericError("iteration " + std::to_string(t) + ": loss is not finite");
      model.backward(store, br.aux_cache, tl.grad_aux);
      model.backward(store, br.main_cache, tl.grad_main);
    } else {
      // Without the consistency term the auxiliary branch receives no gradient
      // and never touches running statistics, so it is skipped.
      ModelCache<T> cache;
      const SegPair<T> out = model.forward(store, x, {Mode::kTrain, true}, &cache);
      loss = combine_losses(dice_loss(out.refined, g), 0.0, cfg.lambda);
      if (!std::isfinite(loss.total)) throw NumericError("iteration " + std::to_string(t) + ": loss is not finite");
      model.backward(store, cache, dice_loss_backward(out.refined, g));
    }
    adam_step(store, adam, t);
    result.losses.push_back(loss);
    result.iteration = t;
    if (write) loss_out << format_loss_line(t, loss) << "\n";
    if (opts.on_iteration) opts.on_iteration(t, loss);

    const bool eval_now = !test_set.empty() && cfg.eval_every > 0 && (t % cfg.eval_every == 0 || t == cfg.max_iters);
    if (eval_now) {
      ParamStore<T> calibrated = store;
      recalibrate(calibrated, t);
      const SplitEvaluation ev = evaluate_split(model, calibrated, test_set);
      const EvalRecord rec{t, ev.refined_mean, ev.coarse_mean};
      result.evals.push_back(rec);
      if (write) metric_out << to_json(rec).dump() << "\n" << std::flush;
      if (opts.on_eval) opts.on_eval(rec);
    }
    if (write && cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0) {
      loss_out.flush();
      save_checkpoint(opts.out_dir / train_detail::ckpt_name(t), train_detail::snapshot(cfg, t, store));
    }
  }
  if (result.iteration == cfg.max_iters && cfg.max_iters > start) {
    recalibrate(store, result.iteration);
    if (write) save_checkpoint(opts.out_dir / "model.parf", train_detail::snapshot(cfg, result.iteration, store));
  }
  if (result.iteration == 0) result.iteration = start;
  return result;
}

}  // namespace parefine
