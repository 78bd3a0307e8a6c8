// parefine command-line tool: train, infer, eval, gradcheck, synth, dump-filters.
//
// Exit codes: 0 ok, 1 gradient check failure or unexpected error,
// 2 bad configuration or arguments, 3 data / checkpoint error,
// 4 numeric divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "parefine/gradcheck_suite.hpp"
#include "parefine/parefine.hpp"

namespace fs = std::filesystem;
using namespace parefine;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> d, iters, batch;
  std::optional<std::string> k;
  std::optional<double> lambda, lr;
  std::optional<int> precision;
  std::vector<std::string> set;
};

TrainConfig resolve(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw ParameterError("config file not found: " + a.config);
    cfg = parse_config(read_text(a.config));
  }
  for (const auto& kv : a.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParameterError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.d) cfg.filter_size = *a.d;
  if (a.k) set_config_value(cfg, "k", *a.k);
  if (a.lambda) cfg.lambda = *a.lambda;
  if (a.lr) cfg.lr = *a.lr;
  if (a.iters) cfg.max_iters = *a.iters;
  if (a.batch) cfg.batch = *a.batch;
  if (a.precision) cfg.precision = *a.precision;
  cfg.validate();
  return cfg;
}

void print_eval(const EvalRecord& r) {
  std::printf("eval iter=%llu f1=%s auc=%s acc=%s coarse_f1=%s\n", static_cast<unsigned long long>(r.iteration),
              format_percent(r.refined.f1).c_str(), format_percent(r.refined.auc).c_str(),
              format_percent(r.refined.acc).c_str(), format_percent(r.coarse.f1).c_str());
  std::fflush(stdout);
}

template <typename T>
int run_train(const TrainConfig& cfg, const TrainArgs& a) {
  std::vector<std::string> warnings;
  const auto train_set = load_dataset<T>(a.data, "train", &warnings);
  const auto test_set = load_dataset<T>(a.data, "test", &warnings);
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

  std::optional<Checkpoint<T>> resume;
  TrainOptions<T> opts;
  opts.out_dir = a.out;
  if (!a.resume.empty()) {
    resume = load_checkpoint<T>(a.resume);
    opts.resume = &*resume;
  }
  opts.on_eval = print_eval;
  opts.on_iteration = [&](std::uint64_t t, const LossValue& v) {
    if (t % 100 == 0) {
      std::printf("iter=%llu loss=%.6f l_s=%.6f l_r=%.6f\n", static_cast<unsigned long long>(t), v.total, v.l_s, v.l_r);
      std::fflush(stdout);
    }
  };
  const auto res = train(cfg, train_set, test_set, opts);
  std::printf("done iter=%llu patch=%zux%zu k=%zu train=%zu test=%zu\n", static_cast<unsigned long long>(res.iteration),
              res.patch.h, res.patch.w, res.k, train_set.size(), test_set.size());
  return kOk;
}

int cmd_train(const TrainArgs& a) {
  const TrainConfig cfg = resolve(a);
  fs::create_directories(a.out);
  {
    std::ofstream out(fs::path(a.out) / "resolved_config.txt");
    out << "# data: " << fs::absolute(a.data).string() << "\n";
    out << "# out: " << fs::absolute(a.out).string() << "\n";
    if (!a.resume.empty()) out << "# resume: " << fs::absolute(a.resume).string() << "\n";
    out << to_text(cfg);
  }
  return cfg.precision == 64 ? run_train<double>(cfg, a) : run_train<float>(cfg, a);
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string ckpt, image, out, mask;
};

template <typename T>
int run_infer(const std::vector<std::uint8_t>& bytes, const InferArgs& a) {
  Checkpoint<T> c = decode_checkpoint<T>(bytes);
  const Model model(c.config.model());
  const Tensor<T> image = load_image<T>(a.image, true);
  const SegPair<T> y = infer(model, c.params, image);
  const Tensor<T> refined = y.refined.reshaped({1, image.dim(1), image.dim(2)});
  write_image(a.out, refined);
  if (!a.mask.empty()) {
    Tensor<T> m(refined.shape());
    for (std::size_t i = 0; i < m.numel(); ++i) m[i] = refined[i] >= T(0.5) ? T(1) : T(0);
    write_image(a.mask, m);
  }
  return kOk;
}

int cmd_infer(const InferArgs& a) {
  const auto bytes = read_checkpoint_bytes(a.ckpt);
  return checkpoint_scalar_bytes(bytes) == 8 ? run_infer<double>(bytes, a) : run_infer<float>(bytes, a);
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string pred, gt, mask, json;
};

int cmd_eval(const EvalArgs& a) {
  const auto preds = [&] {
    std::map<std::string, fs::path> m;
    if (!fs::is_directory(a.pred)) throw DataError("prediction directory not found: " + a.pred);
    for (const auto& e : fs::directory_iterator(a.pred))
      if (e.is_regular_file() && e.path().extension() == ".pgm") m[e.path().stem().string()] = e.path();
    return m;
  }();
  if (preds.empty()) throw DataError("no .pgm predictions under " + a.pred);

  std::vector<std::string> ids;
  std::vector<MetricReport> reports;
  nlohmann::ordered_json j;
  j["images"] = nlohmann::ordered_json::array();
  std::printf("%-24s %7s %7s %7s\n", "image", "F1", "AUC", "ACC");
  for (const auto& [id, path] : preds) {
    const fs::path gt = fs::path(a.gt) / (id + ".pgm");
    if (!fs::exists(gt)) throw DataError("missing ground truth " + gt.string());
    const Tensor<double> scores = load_image<double>(path);
    Tensor<double> label = load_image<double>(gt);
    for (std::size_t i = 0; i < label.numel(); ++i) label[i] = label[i] >= 0.5 ? 1.0 : 0.0;
    std::optional<Tensor<double>> mask;
    if (!a.mask.empty()) {
      const fs::path mp = fs::path(a.mask) / (id + ".pgm");
      if (!fs::exists(mp)) throw DataError("missing mask " + mp.string());
      mask = load_image<double>(mp);
      for (std::size_t i = 0; i < mask->numel(); ++i) (*mask)[i] = (*mask)[i] >= 0.5 ? 1.0 : 0.0;
    }
    if (scores.shape() != label.shape()) throw DataError("size mismatch between " + path.string() + " and " + gt.string());
    const MetricReport r = evaluate(scores, label, mask ? &*mask : nullptr);
    std::printf("%-24s %7s %7s %7s\n", id.c_str(), format_percent(r.f1).c_str(), format_percent(r.auc).c_str(),
                format_percent(r.acc).c_str());
    nlohmann::ordered_json e = to_json(r);
    e["id"] = id;
    j["images"].push_back(e);
    ids.push_back(id);
    reports.push_back(r);
  }
  const MetricReport mean = mean_report(reports);
  std::printf("%-24s %7s %7s %7s\n", "mean", format_percent(mean.f1).c_str(), format_percent(mean.auc).c_str(),
              format_percent(mean.acc).c_str());
  j["mean"] = to_json(mean);
  if (!a.json.empty()) std::ofstream(a.json) << j.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- gradcheck

struct GradArgs {
  std::size_t instances = 3;
  std::uint64_t seed = 0;
  std::string filter;
};

int cmd_gradcheck(const GradArgs& a) {
  const auto results = run_gradcheck_suite(a.instances, a.seed, a.filter);
  std::size_t failed = 0;
  for (const auto& r : results) {
    const bool ok = r.report.pass();
    failed += !ok;
    std::printf("%-28s instance=%zu max_rel_error=%.3e tol=%.0e %s\n", r.name.c_str(), r.instance, r.report.max_error(),
                r.report.tolerance, ok ? "PASS" : "FAIL");
    if (!ok)
      for (const auto& in : r.report.inputs)
        if (!in.pass) std::printf("    %s max_rel_error=%.3e\n", in.name.c_str(), in.max_rel_error);
  }
  std::printf("gradcheck: %zu/%zu passed\n", results.size() - failed, results.size());
  return failed == 0 ? kOk : kFailure;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::size_t n = 250;
  std::optional<std::size_t> train;
  std::uint64_t seed = 0;
  std::size_t size = 64;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  if (a.n == 0) throw ParameterError("--n must be positive");
  const std::size_t n_train = a.train.value_or(a.n * 4 / 5);
  if (n_train > a.n) throw ParameterError("--train exceeds --n");
  SynthConfig sc;
  sc.seed = a.seed;
  sc.height = sc.width = a.size;
  SplitManifest m;
  const auto samples = synth_dataset<float>(sc, a.n, &m, n_train);
  write_dataset(a.out, samples, m);
  std::printf("wrote %zu samples (%zu train, %zu test) to %s\n", a.n, n_train, a.n - n_train, a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------- dump-filters

struct DumpArgs {
  std::string ckpt, image, out;
  std::optional<std::size_t> x, y;
  std::size_t width = 41, height = 41, stride = 8;
};

template <typename T>
int run_dump(const std::vector<std::uint8_t>& bytes, const DumpArgs& a) {
  Checkpoint<T> c = decode_checkpoint<T>(bytes);
  if (!c.config.use_pa_filters) throw ParameterError("checkpoint was trained without PA filters");
  const Model model(c.config.model());
  const Tensor<T> image = load_image<T>(a.image, true);
  const Tensor<T> bank = model.filters(c.params, image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}));
  const std::size_t H = image.dim(1), W = image.dim(2);
  if (a.width > W || a.height > H) throw ParameterError("region larger than the image");
  Region r;
  r.width = a.width;
  r.height = a.height;
  r.x = a.x.value_or((W - a.width) / 2);
  r.y = a.y.value_or((H - a.height) / 2);
  const GrayImage g = export_filters(bank, r, a.stride);
  write_pnm(a.out, PnmImage{g.width, g.height, 1, g.pixels});
  std::printf("region x=%zu y=%zu %zux%zu stride=%zu tiles=%zux%zu grid=%zux%zu\n", r.x, r.y, r.width, r.height,
              a.stride, tile_count(r.width, a.stride), tile_count(r.height, a.stride), g.width, g.height);
  return kOk;
}

int cmd_dump(const DumpArgs& a) {
  const auto bytes = read_checkpoint_bytes(a.ckpt);
  return checkpoint_scalar_bytes(bytes) == 8 ? run_dump<double>(bytes, a) : run_dump<float>(bytes, a);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pixel-adaptive filter refinement for vessel segmentation"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset tree");
  train_cmd->add_option("--config", ta.config, "key = value config file");
  train_cmd->add_option("--data", ta.data, "dataset root (images/, labels/, masks/, split.txt)")->required();
  train_cmd->add_option("--out", ta.out, "output directory")->required();
  train_cmd->add_option("--resume", ta.resume, "checkpoint to continue from");
  train_cmd->add_option("--seed", ta.seed);
  train_cmd->add_option("--d", ta.d, "filter size D");
  train_cmd->add_option("--k", ta.k, "erased positions per patch, or auto");
  train_cmd->add_option("--lambda", ta.lambda, "consistency loss weight");
  train_cmd->add_option("--lr", ta.lr);
  train_cmd->add_option("--iters", ta.iters, "maximum iterations");
  train_cmd->add_option("--batch", ta.batch);
  train_cmd->add_option("--precision", ta.precision, "32 or 64");
  train_cmd->add_option("--set", ta.set, "any config key=value (repeatable)");

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "predict the refined map for one image");
  infer_cmd->add_option("--ckpt", ia.ckpt)->required();
  infer_cmd->add_option("--image", ia.image)->required();
  infer_cmd->add_option("--out", ia.out, "probability map (PGM)")->required();
  infer_cmd->add_option("--mask", ia.mask, "optional binary mask at 0.5 (PGM)");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "score prediction maps against ground truth");
  eval_cmd->add_option("--pred-dir", ea.pred)->required();
  eval_cmd->add_option("--gt-dir", ea.gt)->required();
  eval_cmd->add_option("--mask-dir", ea.mask);
  eval_cmd->add_option("--json", ea.json, "write per-image and mean reports as JSON");

  GradArgs ga;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
  grad_cmd->add_option("--instances", ga.instances, "random instances per case");
  grad_cmd->add_option("--seed", ga.seed);
  grad_cmd->add_option("--filter", ga.filter, "only cases whose name contains this");

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset tree");
  synth_cmd->add_option("--n", sa.n, "number of samples");
  synth_cmd->add_option("--train", sa.train, "training samples (default 80%)");
  synth_cmd->add_option("--seed", sa.seed);
  synth_cmd->add_option("--size", sa.size, "image side in pixels");
  synth_cmd->add_option("--out", sa.out)->required();

  DumpArgs da;
  auto* dump_cmd = app.add_subcommand("dump-filters", "render the per-pixel filters of a region as a grid");
  dump_cmd->add_option("--ckpt", da.ckpt)->required();
  dump_cmd->add_option("--image", da.image)->required();
  dump_cmd->add_option("--out", da.out)->required();
  dump_cmd->add_option("--x", da.x, "region left (default: centred)");
  dump_cmd->add_option("--y", da.y, "region top (default: centred)");
  dump_cmd->add_option("--width", da.width);
  dump_cmd->add_option("--height", da.height);
  dump_cmd->add_option("--stride", da.stride);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*infer_cmd) return cmd_infer(ia);
    if (*eval_cmd) return cmd_eval(ea);
    if (*grad_cmd) return cmd_gradcheck(ga);
    if (*synth_cmd) return cmd_synth(sa);
    if (*dump_cmd) return cmd_dump(da);
  } catch (const ParameterError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
