#pragma once

// Differentiable quadrant selection and mixed coarse/fine sequence
// construction.
//
// Selection is Gumbel-Softmax with a straight-through estimator: the forward
// value is the hard one-hot at argmax((logits + noise)/tau), the backward
// gradient is the soft softmax Jacobian at the same point. Evaluation uses
// zero noise, which makes the selection identical to top-1 on the raw scores.
//
// The sequence is built per the masking recipe: x_sel = x .* M and
// x_non = x .* (1 - M) are arranged by the mixed-granularity (composed) and
// coarse orderings respectively and summed. With the composed ordering the
// selected quadrant's block is exactly the support of the fine summand, so
// the two supports are disjoint, cover every position, and the construction
// is an exact (invertible) permutation of x for any hard mask.

#include <cstdint>

#include "quadtree.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace quadscan {

enum class MaskMode { train_gumbel, eval_argmax };

// Hard one-hot forward, soft softmax((logits+noise)/tau) backward.
template <typename S>
Tensor<S> gumbel_softmax_hard(const Tensor<S>& logits, S tau,
                              const std::vector<S>& noise) {
  check(tau > S(0), "gumbel_softmax_hard: temperature must be positive");
  int k = int(logits.size());
  check(int(noise.size()) == k, "gumbel_softmax_hard: noise length mismatch");
  auto& lv = logits.vals();
  std::vector<S> z(static_cast<size_t>(k));
  int best = 0;
  for (int i = 0; i < k; ++i) {
    z[size_t(i)] = (lv[size_t(i)] + noise[size_t(i)]) / tau;
    if (z[size_t(i)] > z[size_t(best)]) best = i;  // ties keep lowest index
  }
  S mx = z[size_t(best)];
  auto soft = std::make_shared<std::vector<S>>(static_cast<size_t>(k));
  S sum = 0;
  for (int i = 0; i < k; ++i) {
    (*soft)[size_t(i)] = S(std::exp(double(z[size_t(i)] - mx)));
    sum += (*soft)[size_t(i)];
  }
  for (int i = 0; i < k; ++i) (*soft)[size_t(i)] /= sum;

  Tensor<S> out = Tensor<S>::zeros(logits.shape());
  out.param_data()[size_t(best)] = S(1);
  if (detail::any_tracked(logits)) {
    detail::mark_out(out);
    auto ld = logits.data(), od = out.data();
    Tape<S>::active()->record("gumbel_st", od, [ld, od, soft, tau, k] {
      if (od->grad.empty() || !ld->needs_grad) return;
      ld->ensure_grad();
      S dot = 0;
      for (int i = 0; i < k; ++i) dot += od->grad[size_t(i)] * (*soft)[size_t(i)];
      for (int i = 0; i < k; ++i)
        ld->grad[size_t(i)] +=
            (*soft)[size_t(i)] * (od->grad[size_t(i)] - dot) / tau;
    });
  }
  return out;
}

// Top-1 quadrant index, row-major, ties to the lowest index. K is fixed at 1.
template <typename S>
int topk_select(const Tensor<S>& q) {
  check(q.size() >= 1, "topk_select: empty scores");
  auto& v = q.vals();
  int best = 0;
  for (int i = 1; i < int(v.size()); ++i)
    if (v[size_t(i)] > v[size_t(best)]) best = i;
  return best;
}

template <typename S>
struct QuadrantMask {
  MaskMode mode = MaskMode::eval_argmax;
  int quadrant = 0;      // selected (fine) quadrant
  int height = 0, width = 0;
  Tensor<S> one_hot;     // [4]; hard one-hot in both modes
  Tensor<S> token_mask;  // [H*W] raster mask M
};

// scores4: the 2x2 quadrant score grid (flattened row-major as logits).
// Training mode perturbs with the given Gumbel noise; evaluation uses zero
// noise so the same argmax as topk_select is taken.
template <typename S>
QuadrantMask<S> make_quadrant_mask(const Tensor<S>& scores4, S tau, MaskMode mode,
                                   const std::vector<S>& noise, int h, int w) {
  check(scores4.size() == 4, "make_quadrant_mask: expected 4 quadrant scores");
  QuadrantMask<S> m;
  m.mode = mode;
  m.height = h;
  m.width = w;
  Tensor<S> logits = reshape(scores4, {4});
  std::vector<S> n = mode == MaskMode::train_gumbel
                         ? noise
                         : std::vector<S>(4, S(0));
  m.one_hot = gumbel_softmax_hard(logits, tau, n);
  int best = 0;
  for (int i = 1; i < 4; ++i)
    if (m.one_hot.vals()[size_t(i)] > m.one_hot.vals()[size_t(best)]) best = i;
  m.quadrant = best;
  m.token_mask = expand_quadrant_mask(m.one_hot, h, w);
  return m;
}

template <typename S>
QuadrantMask<S> make_quadrant_mask(const Tensor<S>& scores4, S tau, MaskMode mode,
                                   Rng& rng, int h, int w) {
  std::vector<S> noise(4, S(0));
  if (mode == MaskMode::train_gumbel)
    for (auto& v : noise) v = S(rng.gumbel());
  return make_quadrant_mask(scores4, tau, mode, noise, h, w);
}

enum class Provenance : std::uint8_t { coarse = 0, fine = 1 };

template <typename S>
struct MixedSequence {
  Tensor<S> tokens;  // [L, D] in mixed quadtree order
  std::vector<Provenance> provenance;
  int quadrant = 0;
  int height = 0, width = 0;
};

// x .* M arranged by the composed (selected-quadrant-refined) ordering plus
// x .* (1 - M) arranged coarse. Differentiable in x and, through M, in the
// selection logits; no stop-gradient anywhere.
template <typename S>
MixedSequence<S> build_sequence(const Tensor<S>& x, const QuadrantMask<S>& mask) {
  check(x.rank() == 3, "build_sequence: x must be [H,W,D]");
  int h = x.dim(0), w = x.dim(1), d = x.dim(2);
  check(h == mask.height && w == mask.width,
        "build_sequence: mask grid " + std::to_string(mask.height) + "x" +
            std::to_string(mask.width) + " does not match feature " +
            std::to_string(h) + "x" + std::to_string(w));
  check(h % 4 == 0 && w % 4 == 0,
        "build_sequence: H and W must be divisible by 4 (pad first)");
  int L = h * w;
  Tensor<S> flat = reshape(x, {L, d});
  Tensor<S> ones = Tensor<S>::full({L}, S(1));
  Tensor<S> sel = scale_rows(flat, mask.token_mask);
  Tensor<S> non = scale_rows(flat, sub(ones, mask.token_mask));
  auto comp = PermutationCache::get(h, w, ScanKind::composed, mask.quadrant);
  auto coarse = PermutationCache::get(h, w, ScanKind::coarse_quad);
  MixedSequence<S> seq;
  seq.tokens = add(gather_sequence(sel, *comp), gather_sequence(non, *coarse));
  seq.quadrant = mask.quadrant;
  seq.height = h;
  seq.width = w;
  seq.provenance.assign(static_cast<size_t>(L), Provenance::coarse);
  int block = L / 4;
  for (int t = 0; t < block; ++t)
    seq.provenance[size_t(mask.quadrant * block + t)] = Provenance::fine;
  return seq;
}

// Exact left inverse of build_sequence for the same mask: every raster
// position reads back from whichever arrangement sourced it (masked-in
// positions from the composed ordering, masked-out from the coarse one).
template <typename S>
Tensor<S> restore_sequence(const MixedSequence<S>& seq, const QuadrantMask<S>& mask) {
  check(seq.quadrant == mask.quadrant && seq.height == mask.height &&
            seq.width == mask.width,
        "restore_sequence: mask does not match the sequence it built");
  int h = seq.height, w = seq.width;
  int L = h * w;
  check(seq.tokens.dim(0) == L, "restore_sequence: sequence length mismatch");
  int d = seq.tokens.dim(1);
  auto comp = PermutationCache::get(h, w, ScanKind::composed, mask.quadrant);
  auto coarse = PermutationCache::get(h, w, ScanKind::coarse_quad);
  std::vector<int> idx(static_cast<size_t>(L));
  for (int r = 0; r < L; ++r)
    idx[static_cast<size_t>(r)] = mask.token_mask.vals()[static_cast<size_t>(r)] == S(1)
                                      ? comp->inverse[static_cast<size_t>(r)]
                                      : coarse->inverse[static_cast<size_t>(r)];
  Tensor<S> flat = gather_rows(seq.tokens, idx);
  return reshape(flat, {h, w, d});
}

}  // namespace quadscan
