#pragma once

// Partition map prediction: a lightweight head scoring every token's
// suitability for fine-grained scanning.
//
//   score_embed       Norm -> Linear(C->C) -> GELU, per token
//   aggregate_context channel split into local/global halves; the local half
//                     is pooled to 2x2 context vectors and broadcast back by
//                     bilinear upsampling, then concatenated to the global
//                     half (exactly the published order, even though the
//                     local/global naming reads swapped)
//   predict_scores    Linear(C->2) -> GELU -> softmax over the 2 channels
//   quadrant_scores   channel 0 averaged per coarse quadrant -> 2x2

#include "rng.hpp"
#include "tensor.hpp"

namespace quadscan {

template <typename S>
struct PartitionPredictorParams {
  int channels = 0;
  Tensor<S> ln_gamma, ln_beta;  // [C]
  Tensor<S> w_embed;            // [C, C]
  Tensor<S> b_embed;            // [C]
  Tensor<S> w_pred;             // [C, 2]
  Tensor<S> b_pred;             // [2]

  static PartitionPredictorParams init(int channels, Rng& rng) {
    PartitionPredictorParams p;
    p.channels = channels;
    p.ln_gamma = Tensor<S>::full({channels}, S(1)).set_needs_grad();
    p.ln_beta = Tensor<S>::zeros({channels}).set_needs_grad();
    double bound = 1.0 / std::sqrt(double(channels));
    p.w_embed = Tensor<S>::zeros({channels, channels});
    for (auto& v : p.w_embed.param_data()) v = S(rng.uniform(-bound, bound));
    p.w_embed.set_needs_grad();
    p.b_embed = Tensor<S>::zeros({channels}).set_needs_grad();
    p.w_pred = Tensor<S>::zeros({channels, 2});
    for (auto& v : p.w_pred.param_data()) v = S(rng.uniform(-bound, bound));
    p.w_pred.set_needs_grad();
    p.b_pred = Tensor<S>::zeros({2}).set_needs_grad();
    return p;
  }

  std::vector<Tensor<S>*> parameters() {
    return {&ln_gamma, &ln_beta, &w_embed, &b_embed, &w_pred, &b_pred};
  }
};

template <typename S>
Tensor<S> score_embed(const PartitionPredictorParams<S>& p, const Tensor<S>& x) {
  check(x.rank() == 3 && x.dim(2) == p.channels, "score_embed: x must be [H,W,C]");
  Tensor<S> n = layer_norm(x, p.ln_gamma, p.ln_beta, S(1e-6));
  return gelu(add_bias(matmul(n, p.w_embed), p.b_embed));
}

template <typename S>
Tensor<S> aggregate_context(const Tensor<S>& xs) {
  check(xs.rank() == 3, "aggregate_context: x must be [H,W,C]");
  int h = xs.dim(0), w = xs.dim(1), c = xs.dim(2);
  check(c % 2 == 0, "aggregate_context: channel count must be even");
  Tensor<S> local = slice_last(xs, 0, c / 2);
  Tensor<S> global = slice_last(xs, c / 2, c);
  Tensor<S> ctx = adaptive_avg_pool2d(local, 2, 2);
  return concat_last(global, interpolate_bilinear(ctx, h, w));
}

template <typename S>
Tensor<S> predict_scores(const PartitionPredictorParams<S>& p,
                         const Tensor<S>& x_agg) {
  Tensor<S> z = gelu(add_bias(matmul(x_agg, p.w_pred), p.b_pred));
  return softmax(z, -1);  // [H, W, 2], valid categorical per token
}

// Channel 0 of the score map averaged per coarse quadrant, row-major 2x2.
template <typename S>
Tensor<S> quadrant_scores(const Tensor<S>& s) {
  check(s.rank() == 3 && s.dim(2) == 2, "quadrant_scores: s must be [H,W,2]");
  check(s.dim(0) % 2 == 0 && s.dim(1) % 2 == 0,
        "quadrant_scores: H and W must be even");
  Tensor<S> ch0 = slice_last(s, 0, 1);
  return reshape(adaptive_avg_pool2d(ch0, 2, 2), {2, 2});
}

// Full pipeline from features to the 2x2 quadrant score grid.
template <typename S>
Tensor<S> partition_scores(const PartitionPredictorParams<S>& p,
                           const Tensor<S>& x) {
  return predict_scores(p, aggregate_context(score_embed(p, x)));
}

}  // namespace quadscan
