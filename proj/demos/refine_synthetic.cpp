// Library usage: synthesize a small vessel dataset, train briefly, then
// compare the coarse and refined maps on held-out images.
//
//   demo_refine [iterations] [output.pgm]

#include <cstdio>
#include <cstdlib>
#include <string>

#include "parefine/parefine.hpp"

using namespace parefine;

int main(int argc, char** argv) {
  const std::size_t iters = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 300;
  const std::string out = argc > 2 ? argv[2] : "refined.pgm";

  SynthConfig sc;
  sc.seed = 11;
  auto all = synth_dataset<float>(sc, 60);
  std::vector<Sample<float>> train_set(all.begin(), all.begin() + 50), test_set(all.begin() + 50, all.end());

  TrainConfig cfg;
  cfg.max_iters = iters;
  cfg.eval_every = 0;
  cfg.seed = 3;
  cfg.patch_ratio = 0.5;  // 0.3 of a 64x64 image is mostly padding once inside the U-Net
  TrainOptions<float> opts;
  opts.on_iteration = [](std::uint64_t t, const LossValue& v) {
    if (t % 50 == 0) std::printf("iter %4llu  loss %.4f\n", static_cast<unsigned long long>(t), v.total);
  };
  TrainResult<float> res = train(cfg, train_set, test_set, opts);

  const Model model(cfg.model());
  const SplitEvaluation ev = evaluate_split(model, res.params, test_set);
  std::printf("test F1 coarse %s  refined %s\n", format_percent(ev.coarse_mean.f1).c_str(),
              format_percent(ev.refined_mean.f1).c_str());

  const SegPair<float> y = infer(model, res.params, test_set[0].image);
  write_image(out, y.refined);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}
