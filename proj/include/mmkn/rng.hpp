#pragma once

#include <cmath>
#include <cstdint>

namespace mmkn {

// SplitMix64; used to derive independent stream seeds from a base seed
// plus cell indices, so any single experiment cell can be replayed alone.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// PCG32 (O'Neill, pcg-random.org, XSH-RR variant). Small, seedable and
// identical on every platform, which keeps artifacts bit-reproducible.
class Pcg32 {
 public:
  explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL, std::uint64_t seq = 0xda3e39cb94b95bdbULL) {
    state_ = 0;
    inc_ = (seq << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  // Uniform in [0, 1).
  double next_double() {
    return next_u32() * (1.0 / 4294967296.0);
  }

  // Uniform integer in [0, bound) without modulo bias.
  std::uint32_t next_below(std::uint32_t bound) {
    std::uint32_t threshold = (-bound) % bound;
    for (;;) {
      std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  // Standard normal via Box-Muller; caches the paired deviate.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    double u1 = (static_cast<double>(next_u32()) + 1.0) * (1.0 / 4294967296.0);
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace mmkn
