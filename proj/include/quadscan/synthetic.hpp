#pragma once

// Synthetic quadrant-classification task. Each 32x32x3 image is i.i.d.
// Gaussian noise except for one quadrant, which carries the class-defining
// pattern: the quadrant's 2x2 grid of 8x8-pixel blocks holds constant +/-
// amplitude offsets, the two class bits being the signs of the top-left and
// top-right blocks (the bottom blocks are per-sample distractor bits).
// Labels and informative quadrants are sampled uniformly and independently.
//
// The geometry is deliberate: after the 4x stem, one 4x4-pixel cell is one
// token, a block is a 2x2 token group, and the quadrant is a 4x4 token tile
// — the granularity at which the mixed scan ordering regroups tokens. The
// noise level is high enough that single tokens are unreliable, so block
// integration carries the class signal.

#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace quadscan {

struct SyntheticSample {
  Tensor<float> image;  // [32, 32, 3]
  int label = 0;                // in [0, 4)
  int informative_quadrant = 0; // in [0, 4)
  std::uint64_t seed = 0;
};

constexpr double kSyntheticAmplitude = 0.6;
constexpr double kSyntheticNoiseStd = 1.2;

inline SyntheticSample make_synthetic_sample(std::uint64_t seed) {
  constexpr int kSide = 32;
  Rng rng(seed);
  SyntheticSample s;
  s.seed = seed;
  s.label = rng.uniform_int(4);
  s.informative_quadrant = rng.uniform_int(4);
  s.image = Tensor<float>::zeros({kSide, kSide, 3});
  auto& px = s.image.param_data();
  for (int i = 0; i < kSide; ++i)
    for (int j = 0; j < kSide; ++j)
      for (int c = 0; c < 3; ++c)
        px[static_cast<size_t>((i * kSide + j) * 3 + c)] =
            float(kSyntheticNoiseStd * rng.normal());

  // block signs: both block rows repeat the two class bits
  int bits[4] = {(s.label >> 1) & 1, s.label & 1, (s.label >> 1) & 1,
                 s.label & 1};
  int qi = s.informative_quadrant / 2, qj = s.informative_quadrant % 2;
  for (int b = 0; b < 4; ++b) {
    double v = bits[b] ? kSyntheticAmplitude : -kSyntheticAmplitude;
    int r0 = qi * 16 + (b / 2) * 8, c0 = qj * 16 + (b % 2) * 8;
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        for (int c = 0; c < 3; ++c)
          px[static_cast<size_t>(((r0 + i) * kSide + c0 + j) * 3 + c)] += float(v);
  }
  return s;
}

// Deterministic given seed: sample k's content depends only on (seed, k).
inline std::vector<SyntheticSample> gen_synthetic(int n, std::uint64_t seed) {
  check(n >= 1, "gen_synthetic: n must be >= 1");
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<size_t>(n));
  Rng master(seed ^ 0x5851f42d4c957f2dULL);
  for (int k = 0; k < n; ++k) out.push_back(make_synthetic_sample(master.next_u64()));
  return out;
}

}  // namespace quadscan
