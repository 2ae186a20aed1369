#pragma once

// (Quad)VSS blocks: token operator + FFN, each normalized inside a residual.
//
// Quad token operator pipeline:
//   cyclic shift -> partition scores -> quadrant scores -> Gumbel/top-1 mask
//   -> input projection -> mixed-order sequence -> depthwise causal conv +
//   GELU -> selective scan -> sequence restoration -> output projection ->
//   inverse shift.
// The plain VSS operator is the same with the raster ordering and no
// predictor or shift.
//
// Block form (post-norm inside the residual):
//   x = x + DropPath(Norm(token_op(x)))
//   x = x + DropPath(Norm(FFN(x)))

#include <array>

#include "gumbel.hpp"
#include "predictor.hpp"
#include "ssm.hpp"
#include "tensor.hpp"

namespace quadscan {

enum class RunMode { train, eval };

struct ShiftSpec {
  int dy = 0, dx = 0;
  bool enabled() const { return dy != 0 || dx != 0; }
};

struct BlockConfig {
  int dim = 0;
  double expansion_ratio = 8.0 / 3.0;
  double mlp_ratio = 4.0;
  int d_state = 16;
  int dt_rank = 0;  // 0 = auto: ceil(hidden / 16)
  int conv_width = 3;
  double drop_path = 0.0;
  bool uses_quad_scan = true;
  ShiftSpec shift;
  double tau = 1.0;

  int hidden() const {
    int h = int(expansion_ratio * dim);
    return h < 1 ? 1 : h;
  }
};

// Per-block record of what the partition predictor decided, for reporting.
template <typename S>
struct QuadDecision {
  int quadrant = 0;
  std::array<S, 4> scores{};     // 2x2 quadrant scores, row-major
  std::vector<S> score_map;      // channel-0 of the HxW score map
  int height = 0, width = 0;
};

// ---------------------------------------------------------------------------
// Depthwise causal 1D convolution over a token sequence. x: [L, D],
// w: [k, D], b: [D]; out[t] depends on x[t-k+1 .. t] only (zero left pad).

template <typename S>
Tensor<S> causal_depthwise_conv1d(const Tensor<S>& x, const Tensor<S>& w,
                                  const Tensor<S>& b) {
  check(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
        "causal_depthwise_conv1d: x=[L,D], w=[k,D]");
  int L = x.dim(0), D = x.dim(1), k = w.dim(0);
  check(b.size() == D, "causal_depthwise_conv1d: bias length");
  Tensor<S> out = Tensor<S>::zeros({L, D});
  auto &xv = x.vals(), &wv = w.vals(), &bv = b.vals();
  auto& ov = out.param_data();
  for (int t = 0; t < L; ++t)
    for (int d = 0; d < D; ++d) {
      S acc = bv[size_t(d)];
      for (int i = 0; i < k; ++i) {
        int tt = t - (k - 1) + i;
        if (tt < 0) continue;
        acc += wv[size_t(i * D + d)] * xv[size_t((long long)tt * D + d)];
      }
      ov[size_t((long long)t * D + d)] = acc;
    }
  if (detail::any_tracked(x, w, b)) {
    detail::mark_out(out);
    auto xd = x.data(), wd = w.data(), bd = b.data(), od = out.data();
    Tape<S>::active()->record("causal_dwconv1d", od, [xd, wd, bd, od, L, D, k] {
      if (od->grad.empty()) return;
      if (bd->needs_grad) {
        bd->ensure_grad();
        for (int t = 0; t < L; ++t)
          for (int d = 0; d < D; ++d)
            bd->grad[size_t(d)] += od->grad[size_t((long long)t * D + d)];
      }
      for (int t = 0; t < L; ++t)
        for (int i = 0; i < k; ++i) {
          int tt = t - (k - 1) + i;
          if (tt < 0) continue;
          for (int d = 0; d < D; ++d) {
            S g = od->grad[size_t((long long)t * D + d)];
            if (wd->needs_grad) {
              wd->ensure_grad();
              wd->grad[size_t(i * D + d)] +=
                  g * xd->val[size_t((long long)tt * D + d)];
            }
            if (xd->needs_grad) {
              xd->ensure_grad();
              xd->grad[size_t((long long)tt * D + d)] +=
                  g * wd->val[size_t(i * D + d)];
            }
          }
        }
    });
  }
  return out;
}

// Zero-pad bottom/right to (ph, pw); inverse crop back to (h, w).
template <typename S>
Tensor<S> pad_bottom_right(const Tensor<S>& x, int ph, int pw) {
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  check(ph >= h && pw >= w, "pad_bottom_right: target smaller than input");
  if (ph == h && pw == w) return x;
  Tensor<S> out = Tensor<S>::zeros({ph, pw, c});
  auto& xv = x.vals();
  auto& ov = out.param_data();
  for (int i = 0; i < h; ++i)
    std::copy_n(xv.data() + (long long)i * w * c, (long long)w * c,
                ov.data() + (long long)i * pw * c);
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("pad_br", od, [xd, od, h, w, c, pw] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (int i = 0; i < h; ++i)
        for (long long j = 0; j < (long long)w * c; ++j)
          xd->grad[size_t((long long)i * w * c + j)] +=
              od->grad[size_t((long long)i * pw * c + j)];
    });
  }
  return out;
}

template <typename S>
Tensor<S> crop_top_left(const Tensor<S>& x, int h, int w) {
  int ph = x.dim(0), pw = x.dim(1), c = x.dim(2);
  check(h <= ph && w <= pw, "crop_top_left: target larger than input");
  if (ph == h && pw == w) return x;
  Tensor<S> out = Tensor<S>::zeros({h, w, c});
  auto& xv = x.vals();
  auto& ov = out.param_data();
  for (int i = 0; i < h; ++i)
    std::copy_n(xv.data() + (long long)i * pw * c, (long long)w * c,
                ov.data() + (long long)i * w * c);
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("crop_tl", od, [xd, od, h, w, c, pw] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (int i = 0; i < h; ++i)
        for (long long j = 0; j < (long long)w * c; ++j)
          xd->grad[size_t((long long)i * pw * c + j)] +=
              od->grad[size_t((long long)i * w * c + j)];
    });
  }
  return out;
}

// out[i][j] = x[(i - dy) mod H][(j - dx) mod W]; see roll2d.
template <typename S>
Tensor<S> omnidirectional_shift(const Tensor<S>& x, const ShiftSpec& s) {
  if (!s.enabled()) return x;
  return roll2d(x, s.dy, s.dx);
}

// ---------------------------------------------------------------------------
// Parameter bundles

template <typename S>
struct TokenOperatorParams {
  int dim = 0, hidden = 0;
  bool has_predictor = false;
  PartitionPredictorParams<S> predictor;
  Tensor<S> w_in, b_in;      // [D, h], [h]
  Tensor<S> conv_w, conv_b;  // [k, h], [h]
  SelectiveSsmParams<S> ssm;
  Tensor<S> d_skip;                  // [h], per-channel scan skip, init 1
  Tensor<S> out_norm_g, out_norm_b;  // [h], normalizes the scan output
  Tensor<S> w_out, b_out;    // [h, D], [D]

  static TokenOperatorParams init(const BlockConfig& cfg, Rng& rng) {
    TokenOperatorParams p;
    p.dim = cfg.dim;
    p.hidden = cfg.hidden();
    p.has_predictor = cfg.uses_quad_scan;
    if (p.has_predictor) p.predictor = PartitionPredictorParams<S>::init(cfg.dim, rng);
    auto uniform_init = [&](Tensor<S>& t, int fan_in) {
      double bound = 1.0 / std::sqrt(double(fan_in));
      for (auto& v : t.param_data()) v = S(rng.uniform(-bound, bound));
      t.set_needs_grad();
    };
    p.w_in = Tensor<S>::zeros({cfg.dim, p.hidden});
    uniform_init(p.w_in, cfg.dim);
    p.b_in = Tensor<S>::zeros({p.hidden}).set_needs_grad();
    p.conv_w = Tensor<S>::zeros({cfg.conv_width, p.hidden});
    uniform_init(p.conv_w, cfg.conv_width);
    p.conv_b = Tensor<S>::zeros({p.hidden}).set_needs_grad();
    p.ssm = SelectiveSsmParams<S>::init(p.hidden, cfg.d_state, cfg.dt_rank, rng,
                                        cfg.conv_width);
    p.d_skip = Tensor<S>::full({p.hidden}, S(1)).set_needs_grad();
    p.out_norm_g = Tensor<S>::full({p.hidden}, S(1)).set_needs_grad();
    p.out_norm_b = Tensor<S>::zeros({p.hidden}).set_needs_grad();
    p.w_out = Tensor<S>::zeros({p.hidden, cfg.dim});
    uniform_init(p.w_out, p.hidden);
    p.b_out = Tensor<S>::zeros({cfg.dim}).set_needs_grad();
    return p;
  }

  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> out;
    if (has_predictor)
      for (auto* t : predictor.parameters()) out.push_back(t);
    out.push_back(&w_in);
    out.push_back(&b_in);
    out.push_back(&conv_w);
    out.push_back(&conv_b);
    for (auto* t : ssm.parameters()) out.push_back(t);
    out.push_back(&d_skip);
    out.push_back(&out_norm_g);
    out.push_back(&out_norm_b);
    out.push_back(&w_out);
    out.push_back(&b_out);
    return out;
  }
};

template <typename S>
struct BlockParams {
  BlockConfig cfg;
  TokenOperatorParams<S> op;
  Tensor<S> norm1_g, norm1_b, norm2_g, norm2_b;
  Tensor<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static BlockParams init(const BlockConfig& cfg, Rng& rng) {
    BlockParams p;
    p.cfg = cfg;
    p.op = TokenOperatorParams<S>::init(cfg, rng);
    int d = cfg.dim;
    int m = int(cfg.mlp_ratio * d);
    p.norm1_g = Tensor<S>::full({d}, S(1)).set_needs_grad();
    p.norm1_b = Tensor<S>::zeros({d}).set_needs_grad();
    p.norm2_g = Tensor<S>::full({d}, S(1)).set_needs_grad();
    p.norm2_b = Tensor<S>::zeros({d}).set_needs_grad();
    auto uniform_init = [&](Tensor<S>& t, int fan_in) {
      double bound = 1.0 / std::sqrt(double(fan_in));
      for (auto& v : t.param_data()) v = S(rng.uniform(-bound, bound));
      t.set_needs_grad();
    };
    p.ffn_w1 = Tensor<S>::zeros({d, m});
    uniform_init(p.ffn_w1, d);
    p.ffn_b1 = Tensor<S>::zeros({m}).set_needs_grad();
    p.ffn_w2 = Tensor<S>::zeros({m, d});
    uniform_init(p.ffn_w2, m);
    p.ffn_b2 = Tensor<S>::zeros({d}).set_needs_grad();
    return p;
  }

  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> out = op.parameters();
    for (auto* t : {&norm1_g, &norm1_b, &norm2_g, &norm2_b, &ffn_w1, &ffn_b1,
                    &ffn_w2, &ffn_b2})
      out.push_back(t);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Token operators

// Shared tail: projection -> arrange -> conv+act -> scan -> restore ->
// projection. `arrange` and `restore` are callbacks so the quad and raster
// paths share the exact same numerics.
template <typename S>
Tensor<S> quad_token_operator(const TokenOperatorParams<S>& p, const Tensor<S>& x,
                              RunMode mode, Rng* noise_rng,
                              const ShiftSpec& shift, S tau,
                              QuadDecision<S>* decision = nullptr) {
  check(x.rank() == 3 && x.dim(2) == p.dim, "quad_token_operator: x=[H,W,D]");
  int h = x.dim(0), w = x.dim(1);
  Tensor<S> xs = omnidirectional_shift(x, shift);

  // pad to a multiple of 4 before partition, crop after restoration
  int h4 = (h + 3) / 4 * 4, w4 = (w + 3) / 4 * 4;
  bool padded = h4 != h || w4 != w;
  Tensor<S> xp = padded ? pad_bottom_right(xs, h4, w4) : xs;

  Tensor<S> smap = partition_scores(p.predictor, xp);  // [h4, w4, 2]
  Tensor<S> q = quadrant_scores(smap);                 // [2, 2]
  QuadrantMask<S> mask;
  if (mode == RunMode::train) {
    check(noise_rng != nullptr, "quad_token_operator: train mode needs an RNG");
    mask = make_quadrant_mask(q, tau, MaskMode::train_gumbel, *noise_rng, h4, w4);
  } else {
    mask = make_quadrant_mask(q, tau, MaskMode::eval_argmax,
                              std::vector<S>(4, S(0)), h4, w4);
  }
  if (padded) {
    // padding positions always take the coarse path
    Tensor<S> keep = Tensor<S>::zeros({h4 * w4});
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) keep.param_data()[size_t(i * w4 + j)] = S(1);
    mask.token_mask = mul(mask.token_mask, keep);
  }
  if (decision) {
    decision->quadrant = mask.quadrant;
    for (int i = 0; i < 4; ++i) decision->scores[size_t(i)] = q.vals()[size_t(i)];
    decision->height = h4;
    decision->width = w4;
    decision->score_map.resize(size_t(h4) * w4);
    for (int i = 0; i < h4 * w4; ++i)
      decision->score_map[size_t(i)] = smap.vals()[size_t(i * 2)];
  }

  Tensor<S> u = add_bias(matmul(xp, p.w_in), p.b_in);  // [h4, w4, hidden]
  MixedSequence<S> seq = build_sequence(u, mask);
  Tensor<S> c = gelu(causal_depthwise_conv1d(seq.tokens, p.conv_w, p.conv_b));
  MixedSequence<S> scanned = seq;
  Tensor<S> ssm_out = add(selective_scan(p.ssm, c), scale_channels(c, p.d_skip));
  scanned.tokens = layer_norm(ssm_out, p.out_norm_g, p.out_norm_b, S(1e-6));
  Tensor<S> y = restore_sequence(scanned, mask);  // [h4, w4, hidden]
  if (padded) y = crop_top_left(y, h, w);
  Tensor<S> out = add_bias(matmul(y, p.w_out), p.b_out);
  return omnidirectional_shift(out, ShiftSpec{-shift.dy, -shift.dx});
}

// Plain VSS token operator: raster ordering, no predictor, no shift.
template <typename S>
Tensor<S> vss_token_operator(const TokenOperatorParams<S>& p, const Tensor<S>& x) {
  check(x.rank() == 3 && x.dim(2) == p.dim, "vss_token_operator: x=[H,W,D]");
  int h = x.dim(0), w = x.dim(1);
  Tensor<S> u = add_bias(matmul(x, p.w_in), p.b_in);
  Tensor<S> seq = reshape(u, {h * w, p.hidden});
  Tensor<S> c = gelu(causal_depthwise_conv1d(seq, p.conv_w, p.conv_b));
  Tensor<S> ssm_out = add(selective_scan(p.ssm, c), scale_channels(c, p.d_skip));
  Tensor<S> scanned = layer_norm(ssm_out, p.out_norm_g, p.out_norm_b, S(1e-6));
  Tensor<S> y = reshape(scanned, {h, w, p.hidden});
  return add_bias(matmul(y, p.w_out), p.b_out);
}

template <typename S>
Tensor<S> ffn_forward(const BlockParams<S>& p, const Tensor<S>& x) {
  Tensor<S> hid = gelu(add_bias(matmul(x, p.ffn_w1), p.ffn_b1));
  return add_bias(matmul(hid, p.ffn_w2), p.ffn_b2);
}

// Per-sample stochastic depth. Training drops the branch with probability
// `rate` and scales kept branches by 1/(1-rate); evaluation is the identity.
template <typename S>
Tensor<S> drop_path(const Tensor<S>& branch, double rate, RunMode mode, Rng* rng) {
  if (mode == RunMode::eval || rate <= 0.0) return branch;
  check(rng != nullptr, "drop_path: train mode needs an RNG");
  if (rng->uniform() < rate) return scale(branch, S(0));
  return scale(branch, S(1.0 / (1.0 - rate)));
}

template <typename S>
Tensor<S> quadvss_block(const BlockParams<S>& p, const Tensor<S>& x, RunMode mode,
                        Rng* rng, QuadDecision<S>* decision = nullptr) {
  Tensor<S> t = p.cfg.uses_quad_scan
                    ? quad_token_operator(p.op, x, mode, rng, p.cfg.shift,
                                          S(p.cfg.tau), decision)
                    : vss_token_operator(p.op, x);
  Tensor<S> n1 = layer_norm(t, p.norm1_g, p.norm1_b, S(1e-6));
  Tensor<S> x1 = add(x, drop_path(n1, p.cfg.drop_path, mode, rng));
  Tensor<S> n2 = layer_norm(ffn_forward(p, x1), p.norm2_g, p.norm2_b, S(1e-6));
  return add(x1, drop_path(n2, p.cfg.drop_path, mode, rng));
}

template <typename S>
Tensor<S> vss_block(const BlockParams<S>& p, const Tensor<S>& x, RunMode mode,
                    Rng* rng) {
  Tensor<S> t = vss_token_operator(p.op, x);
  Tensor<S> n1 = layer_norm(t, p.norm1_g, p.norm1_b, S(1e-6));
  Tensor<S> x1 = add(x, drop_path(n1, p.cfg.drop_path, mode, rng));
  Tensor<S> n2 = layer_norm(ffn_forward(p, x1), p.norm2_g, p.norm2_b, S(1e-6));
  return add(x1, drop_path(n2, p.cfg.drop_path, mode, rng));
}

}  // namespace quadscan
