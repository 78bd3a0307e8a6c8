#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace parefine {

/// Independent substreams derived from one seed.
enum class Stream : std::uint64_t {
  kWeights = 1,
  kPatches = 2,
  kAugment = 3,
  kSynth = 4,
  kCalibration = 5,
};

/// Counter-based generator: output i is a pure hash of (key, i), so a
/// stream's values never depend on how calls to other streams interleave.
/// split() derives a child key; children of distinct ids are independent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)), seed_(seed) {}

  Rng split(std::uint64_t id) const {
    Rng child(seed_);
    child.key_ = mix(key_ ^ mix(id + 0xbb67ae8584caa73bULL));
    child.counter_ = 0;
    return child;
  }
  Rng split(Stream s) const { return split(static_cast<std::uint64_t>(s)); }

  std::uint64_t next_u64() { return mix(key_ + mix(counter_++ * 0x9e3779b97f4a7c15ULL + 1)); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Lemire-style rejection keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = (~std::uint64_t{0} - n + 1) % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x >= limit) return x % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller; the sine partner is discarded so each call consumes exactly two draws.
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }
  std::uint64_t seed() const noexcept { return seed_; }

  /// Restore a previously captured position.
  void set_state(std::uint64_t key, std::uint64_t counter) noexcept {
    key_ = key;
    counter_ = counter;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace parefine
