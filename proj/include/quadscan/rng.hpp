#pragma once

// Self-contained counter-free PRNG (splitmix64 core) with the handful of
// distributions the project needs. Implemented here instead of <random> so
// that streams are bit-reproducible across standard library versions.

#include <cmath>
#include <cstdint>

namespace quadscan {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  int uniform_int(int n) { return int(next_u64() % std::uint64_t(n)); }

  // standard normal via Box-Muller (one value per call, no caching, so the
  // stream position stays a pure function of call count)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // standard Gumbel(0,1): -log(-log(u)), u ~ U(0,1)
  double gumbel() {
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    return -std::log(-std::log(u));
  }

 private:
  std::uint64_t state_;
};

}  // namespace quadscan
