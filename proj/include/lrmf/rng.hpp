#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace lrmf {

// SplitMix64 with explicit substream derivation. Chosen over <random> engines
// because std::normal_distribution's algorithm is implementation-defined;
// everything here is fixed arithmetic, so datasets generated from a seed are
// bit-identical across platforms and across reimplementations of this scheme:
//
//   state_0            = seed
//   next(state)        : state += 0x9E3779B97F4A7C15; return mix(state)
//   mix(z)             : z ^= z>>30; z *= 0xBF58476D1CE4E5B9;
//                        z ^= z>>27; z *= 0x94D049BB133111EB; z ^= z>>31
//   substream(seed, i) = mix(seed + (i+1) * 0x9E3779B97F4A7C15)
//   uniform()          = next() >> 11, scaled by 2^-53           (in [0,1))
//   normal()           = Box-Muller on (1-u1, u2), cos branch first
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  Rng substream(std::uint64_t i) const {
    return Rng(mix(state_ + (i + 1) * 0x9E3779B97F4A7C15ULL));
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0,1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Unbiased-enough bounded integer via 128-bit multiply; deterministic.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Fisher-Yates permutation of {0,...,n-1}.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lrmf
