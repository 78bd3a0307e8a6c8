// Peak transient bytes of the MRSG filter-bank forward (inference path) as the
// filter size grows, at a fixed map size.

#include <cstdio>
#include <cstdlib>
#include <string>

#include "parefine/parefine.hpp"

using namespace parefine;

int main(int argc, char** argv) {
  const std::size_t side = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 128;
  if (side < 8) {
    std::fprintf(stderr, "usage: mrsg_memory_bench [side >= 8]\n");
    return 2;
  }
  Rng rng(7);
  Tensor<float> coarse({1, 1, side, side});
  for (std::size_t i = 0; i < coarse.numel(); ++i) coarse[i] = static_cast<float>(rng.uniform());

  std::printf("map=%zux%zu\n", side, side);
  std::size_t peak3 = 0, peak9 = 0;
  for (std::size_t d : {3, 5, 7, 9}) {
    const Mrsg mrsg(d);
    ParamStore<float> store;
    mrsg.register_params(store);
    mrsg.init(store, rng);
    std::size_t peak = 0;
    {
      MemoryProbe probe;
      const Tensor<float> bank = mrsg.forward(store, coarse, {Mode::kInfer, false});
      peak = probe.peak();
    }
    if (d == 3) peak3 = peak;
    if (d == 9) peak9 = peak;
    std::printf("D=%zu peak_bytes=%zu bank_bytes=%zu\n", d, peak, d * d * side * side * sizeof(float));
  }
  std::printf("ratio_9_3=%.4f\n", static_cast<double>(peak9) / static_cast<double>(peak3));
  return 0;
}
