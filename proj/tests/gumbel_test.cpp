#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "oracles.hpp"
#include "quadscan/gumbel.hpp"

using namespace quadscan;

namespace {

Tensor<double> rand_tensor(const Shape& shape, Rng& rng, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  for (auto& v : t.param_data()) v = rng.uniform(lo, hi);
  return t;
}

QuadrantMask<double> hard_mask(int quadrant, int h, int w) {
  Tensor<double> scores = Tensor<double>::zeros({2, 2});
  scores.param_data()[static_cast<size_t>(quadrant)] = 1.0;
  return make_quadrant_mask(scores, 1.0, MaskMode::eval_argmax,
                            std::vector<double>(4, 0.0), h, w);
}

// A mask object with explicit one-hot values (possibly degenerate), used for
// the collapse cases the hard path cannot produce.
QuadrantMask<double> synthetic_mask(std::vector<double> one_hot, int quadrant,
                                    int h, int w) {
  QuadrantMask<double> m;
  m.mode = MaskMode::eval_argmax;
  m.quadrant = quadrant;
  m.height = h;
  m.width = w;
  m.one_hot = Tensor<double>::from({4}, std::move(one_hot));
  m.token_mask = expand_quadrant_mask(m.one_hot, h, w);
  return m;
}

}  // namespace

TEST(GumbelSoftmaxHard, DominantLogitWinsAtZeroNoise) {
  Tensor<double> logits = Tensor<double>::from({4}, {10, 0, 0, 0});
  auto y = gumbel_softmax_hard(logits, 1.0, {0, 0, 0, 0});
  EXPECT_EQ(y.vals(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(GumbelSoftmaxHard, PerturbedArgmax) {
  Tensor<double> logits = Tensor<double>::from({4}, {1, 2, 0, 1});
  auto y = gumbel_softmax_hard(logits, 1.0, {0.5, -0.2, 0.1, -0.4});
  // perturbed logits (1.5, 1.8, 0.1, 0.6) peak at index 1
  EXPECT_EQ(y.vals(), (std::vector<double>{0, 1, 0, 0}));
}

TEST(GumbelSoftmaxHard, NonPositiveTemperatureRejected) {
  Tensor<double> logits = Tensor<double>::from({4}, {1, 2, 0, 1});
  EXPECT_THROW(gumbel_softmax_hard(logits, 0.0, {0, 0, 0, 0}),
               std::runtime_error);
  EXPECT_THROW(gumbel_softmax_hard(logits, -1.0, {0, 0, 0, 0}),
               std::runtime_error);
}

// Straight-through: gradient of <one_hot, v> w.r.t. logits equals the
// analytic soft-softmax Jacobian-vector product.
TEST(GumbelSoftmaxHard, StraightThroughMatchesSoftJacobian) {
  Rng rng(70);
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    double tau = rng.uniform(0.3, 2.0);
    Tensor<double> logits = rand_tensor({4}, rng, -2, 2).set_needs_grad();
    std::vector<double> noise(4);
    for (auto& n : noise) n = rng.gumbel();
    Tensor<double> v = rand_tensor({4}, rng, -1, 1);

    logits.zero_grad();
    {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      backward(sum_all(mul(gumbel_softmax_hard(logits, tau, noise), v)));
    }
    // analytic: d<softmax(z), v>/dlogits, z = (logits + noise)/tau
    std::vector<double> z(4);
    for (int i = 0; i < 4; ++i) z[static_cast<size_t>(i)] = (logits.vals()[static_cast<size_t>(i)] + noise[static_cast<size_t>(i)]) / tau;
    auto soft = oracle::naive_softmax_row(z);
    double dot = 0;
    for (int i = 0; i < 4; ++i) dot += soft[static_cast<size_t>(i)] * v.vals()[static_cast<size_t>(i)];
    for (int i = 0; i < 4; ++i) {
      double want = soft[static_cast<size_t>(i)] * (v.vals()[static_cast<size_t>(i)] - dot) / tau;
      worst = std::max(worst, std::abs(want - logits.grad()[static_cast<size_t>(i)]));
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(TopkSelect, ExamplesAndTieRule) {
  EXPECT_EQ(topk_select(Tensor<double>::from({2, 2}, {0.9, 0.1, 0.1, 0.1})), 0);
  EXPECT_EQ(topk_select(Tensor<double>::from({2, 2}, {0.25, 0.25, 0.25, 0.25})), 0);
  EXPECT_EQ(topk_select(Tensor<double>::from({2, 2}, {0.2, 0.3, 0.5, 0.1})), 2);
}

TEST(MaskModes, EvalAgreesWithTopkAtZeroNoise) {
  Rng rng(71);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor<double> scores = rand_tensor({2, 2}, rng, 0, 1);
    auto m = make_quadrant_mask(scores, 1.0, MaskMode::eval_argmax,
                                std::vector<double>(4, 0.0), 8, 8);
    EXPECT_EQ(m.quadrant, topk_select(scores));
    // hard one-hot with matching token mask
    double sum = 0;
    for (double v : m.one_hot.vals()) {
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      sum += v;
    }
    EXPECT_EQ(sum, 1.0);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        EXPECT_EQ(m.token_mask.vals()[static_cast<size_t>(i * 8 + j)],
                  m.one_hot.vals()[static_cast<size_t>((i / 4) * 2 + (j / 4))]);
  }
}

TEST(BuildSequence, AllZeroMaskCollapsesToCoarse) {
  Rng rng(72);
  Tensor<double> x = rand_tensor({8, 8, 3}, rng);
  auto m = synthetic_mask({0, 0, 0, 0}, 0, 8, 8);
  auto seq = build_sequence(x, m);
  auto coarse = gather_sequence(reshape(x, {64, 3}), coarse_partition_perm(8, 8));
  EXPECT_EQ(seq.tokens.vals(), coarse.vals());
  // and the mask-aware restore is the coarse restoration
  auto back = restore_sequence(seq, m);
  EXPECT_EQ(back.vals(), x.vals());
}

TEST(BuildSequence, AllOneMaskCollapsesToFinePath) {
  Rng rng(73);
  Tensor<double> x = rand_tensor({8, 8, 3}, rng);
  auto m = synthetic_mask({1, 1, 1, 1}, 2, 8, 8);
  auto seq = build_sequence(x, m);
  auto fine_path =
      gather_sequence(reshape(x, {64, 3}), composed_perm(8, 8, 2));
  EXPECT_EQ(seq.tokens.vals(), fine_path.vals());
  auto back = restore_sequence(seq, m);
  EXPECT_EQ(back.vals(), x.vals());
}

TEST(BuildSequence, HandEvaluationFourByFour) {
  // x = raster indices, quadrant 0 selected: mask {0,1,4,5} takes the fine
  // path, the rest the coarse path, summed elementwise.
  Tensor<double> x = Tensor<double>::zeros({4, 4, 1});
  for (int i = 0; i < 16; ++i) x.param_data()[static_cast<size_t>(i)] = i;
  auto m = hard_mask(0, 4, 4);
  auto seq = build_sequence(x, m);
  std::vector<double> want{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  EXPECT_EQ(seq.tokens.vals(), want);
}

TEST(BuildSequence, DisjointSupportCoversAllPositions) {
  Rng rng(74);
  for (int q = 0; q < 4; ++q) {
    Tensor<double> x = rand_tensor({8, 8, 4}, rng, 0.5, 1.5);  // nonzero tags
    auto m = hard_mask(q, 8, 8);
    // replicate the two summands
    Tensor<double> flat = reshape(x, {64, 4});
    Tensor<double> ones = Tensor<double>::full({64}, 1.0);
    auto sel = gather_sequence(scale_rows(flat, m.token_mask),
                               composed_perm(8, 8, q));
    auto non = gather_sequence(scale_rows(flat, sub(ones, m.token_mask)),
                               coarse_partition_perm(8, 8));
    for (int s = 0; s < 64; ++s) {
      bool sel_live = sel.vals()[static_cast<size_t>(s * 4)] != 0.0;
      bool non_live = non.vals()[static_cast<size_t>(s * 4)] != 0.0;
      EXPECT_TRUE(sel_live != non_live) << "position " << s;
    }
    // and provenance tags agree with the live summand
    auto seq = build_sequence(x, m);
    int block = 16;
    for (int s = 0; s < 64; ++s) {
      bool fine = seq.provenance[static_cast<size_t>(s)] == Provenance::fine;
      EXPECT_EQ(fine, s / block == q);
      EXPECT_EQ(fine, sel.vals()[static_cast<size_t>(s * 4)] != 0.0);
    }
  }
}

TEST(BuildSequence, PermutationOfInputValues) {
  Rng rng(75);
  for (int q = 0; q < 4; ++q) {
    Tensor<double> x = rand_tensor({8, 8, 4}, rng);
    auto seq = build_sequence(x, hard_mask(q, 8, 8));
    std::vector<double> a = x.vals(), b = seq.tokens.vals();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

// Masking before arranging (the pseudo-code form) equals arranging x and the
// mask separately and masking in sequence space (the equation form).
TEST(BuildSequence, MaskThenArrangeEqualsArrangeThenMask) {
  Rng rng(76);
  for (int q = 0; q < 4; ++q) {
    Tensor<double> x = rand_tensor({8, 8, 4}, rng);
    auto m = hard_mask(q, 8, 8);
    auto seq = build_sequence(x, m);

    Tensor<double> flat = reshape(x, {64, 4});
    auto comp = composed_perm(8, 8, q);
    auto coarse = coarse_partition_perm(8, 8);
    Tensor<double> ones = Tensor<double>::full({64}, 1.0);
    Tensor<double> m_fine = gather_rows(reshape(m.token_mask, {64, 1}), comp.forward);
    Tensor<double> m_coarse =
        gather_rows(reshape(m.token_mask, {64, 1}), coarse.forward);
    auto eq_form = add(scale_rows(gather_sequence(flat, comp), reshape(m_fine, {64})),
                       scale_rows(gather_sequence(flat, coarse),
                                  sub(ones, reshape(m_coarse, {64}))));
    EXPECT_EQ(seq.tokens.vals(), eq_form.vals());
  }
}

TEST(RestoreSequence, ExactRoundTripForAllMasks) {
  Rng rng(77);
  for (int q = 0; q < 4; ++q) {
    Tensor<double> x = rand_tensor({8, 8, 4}, rng);
    auto m = hard_mask(q, 8, 8);
    auto back = restore_sequence(build_sequence(x, m), m);
    EXPECT_EQ(back.vals(), x.vals());
  }
}

TEST(RestoreSequence, MismatchedMaskRejected) {
  Rng rng(78);
  Tensor<double> x = rand_tensor({8, 8, 2}, rng);
  auto m0 = hard_mask(0, 8, 8);
  auto m1 = hard_mask(1, 8, 8);
  auto seq = build_sequence(x, m0);
  EXPECT_THROW(restore_sequence(seq, m1), std::runtime_error);
}

TEST(RestoreSequence, RoundTripGradientIsAllOnes) {
  Rng rng(79);
  Tensor<double> x = rand_tensor({8, 8, 2}, rng).set_needs_grad();
  auto m = hard_mask(3, 8, 8);
  x.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    backward(sum_all(restore_sequence(build_sequence(x, m), m)));
  }
  for (double g : x.grad()) EXPECT_NEAR(g, 1.0, 1e-12);
}

// Gradient reaches the selection logits through both the M and (1 - M)
// terms; finite differences on the soft surrogate verify the mask-expansion
// path (the hard argmax is held fixed by construction here).
TEST(BuildSequence, MaskGradientFlowsIntoOneHot) {
  Rng rng(80);
  Tensor<double> x = rand_tensor({8, 8, 2}, rng);
  Tensor<double> one_hot = Tensor<double>::from({4}, {0.2, 0.3, 0.4, 0.1});
  one_hot.set_needs_grad();
  Tensor<double> w = rand_tensor({64, 2}, rng);
  auto forward = [&] {
    QuadrantMask<double> m;
    m.quadrant = 2;
    m.height = 8;
    m.width = 8;
    m.one_hot = one_hot;
    m.token_mask = expand_quadrant_mask(one_hot, 8, 8);
    return sum_all(mul(build_sequence(x, m).tokens, w));
  };
  auto res = oracle::fd_check({&one_hot}, forward, 1e-5);
  EXPECT_LE(res.max_rel_err, 1e-6);
}
