#pragma once
#include <type_traits>

// Hierarchical 4-stage backbone: 3-conv patch-embedding stem (strides 2,1,2),
// stages of (Quad)VSS blocks with a stride-2 conv downsample in between
// (channels double, spatial size halves), then LayerNorm -> global average
// pool -> linear classifier.
//
// Variants follow the published table: Lite/Tiny/Small/Base with stage depths
// {2,2,2,2}/{2,6,2,2}/{2,2,5,2}/{2,2,15,2}, base channels 48/64/96/96 and
// token-operator expansion 1/1/2/2. QuadVSS blocks sit in stages 1 and 2.
// Micro (C=16, depths {1,1,1,1}, 32x32 inputs, 4 classes) is the desk-scale
// configuration used by the training harness.

#include <string>
#include <utility>
#include <vector>

#include "blocks.hpp"

namespace quadscan {

struct VariantConfig {
  std::string name = "micro";
  std::array<int, 4> depths{1, 1, 1, 1};
  int base_channels = 16;
  // 1-indexed. Micro keeps the quad scan out of stage 2: its 4x4 grid has
  // 2x2-token quadrants whose refinement is the identity permutation, which
  // would leave that block's predictor without any gradient.
  std::vector<int> quad_stages{1};
  int num_classes = 4;
  double expansion_ratio = 2.0;
  double mlp_ratio = 4.0;
  int d_state = 16;
  int conv_width = 3;
  double drop_path_rate = 0.1;
  bool enable_shift = true;
  double tau = 1.0;
  int image_size = 32;
  std::uint64_t seed = 0;

  bool stage_uses_quad(int stage_1indexed) const {
    for (int s : quad_stages)
      if (s == stage_1indexed) return true;
    return false;
  }

  static VariantConfig lite() {
    VariantConfig v;
    v.name = "lite";
    v.depths = {2, 2, 2, 2};
    v.base_channels = 48;
    v.quad_stages = {1, 2};
    v.num_classes = 1000;
    v.expansion_ratio = 1.0;
    v.drop_path_rate = 0.1;
    v.image_size = 224;
    return v;
  }
  static VariantConfig tiny() {
    VariantConfig v = lite();
    v.name = "tiny";
    v.depths = {2, 6, 2, 2};
    v.base_channels = 64;
    return v;
  }
  static VariantConfig small() {
    VariantConfig v = lite();
    v.name = "small";
    v.depths = {2, 2, 5, 2};
    v.base_channels = 96;
    v.expansion_ratio = 2.0;
    v.drop_path_rate = 0.2;
    return v;
  }
  static VariantConfig base() {
    VariantConfig v = lite();
    v.name = "base";
    v.depths = {2, 2, 15, 2};
    v.base_channels = 96;
    v.expansion_ratio = 2.0;
    v.drop_path_rate = 0.3;
    return v;
  }
  static VariantConfig micro() { return VariantConfig{}; }

  static VariantConfig by_name(const std::string& n) {
    if (n == "lite") return lite();
    if (n == "tiny") return tiny();
    if (n == "small") return small();
    if (n == "base") return base();
    if (n == "micro") return micro();
    throw std::runtime_error("unknown variant: " + n);
  }
};

template <typename S>
struct StageParams {
  bool has_downsample = false;
  Tensor<S> ds_w, ds_b;  // stride-2 3x3 conv doubling channels
  std::vector<BlockParams<S>> blocks;
};

template <typename S>
struct Model {
  VariantConfig cfg;
  Tensor<S> stem_w1, stem_b1, stem_w2, stem_b2, stem_w3, stem_b3;
  std::vector<StageParams<S>> stages;
  Tensor<S> head_ln_g, head_ln_b, head_w, head_b;

  int stage_channels(int i) const { return cfg.base_channels << i; }  // 0-based

  std::vector<std::pair<std::string, Tensor<S>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    out.emplace_back("stem.w1", &stem_w1);
    out.emplace_back("stem.b1", &stem_b1);
    out.emplace_back("stem.w2", &stem_w2);
    out.emplace_back("stem.b2", &stem_b2);
    out.emplace_back("stem.w3", &stem_w3);
    out.emplace_back("stem.b3", &stem_b3);
    for (size_t si = 0; si < stages.size(); ++si) {
      std::string sp = "stage" + std::to_string(si + 1) + ".";
      auto& st = stages[si];
      if (st.has_downsample) {
        out.emplace_back(sp + "down.w", &st.ds_w);
        out.emplace_back(sp + "down.b", &st.ds_b);
      }
      for (size_t bi = 0; bi < st.blocks.size(); ++bi) {
        std::string bp = sp + "block" + std::to_string(bi) + ".p";
        auto params = st.blocks[bi].parameters();
        for (size_t pi = 0; pi < params.size(); ++pi)
          out.emplace_back(bp + std::to_string(pi), params[pi]);
      }
    }
    out.emplace_back("head.ln_g", &head_ln_g);
    out.emplace_back("head.ln_b", &head_ln_b);
    out.emplace_back("head.w", &head_w);
    out.emplace_back("head.b", &head_b);
    return out;
  }

  long long parameter_count() {
    long long n = 0;
    for (auto& [name, t] : named_parameters()) n += t->size();
    return n;
  }
};

// Stem: Conv3x3 s2 C/2 -> GELU -> Conv3x3 s1 C/2 -> GELU -> Conv3x3 s2 C.
template <typename S>
Tensor<S> stem_forward(const Model<S>& m, const Tensor<S>& image) {
  check(image.rank() == 3 && image.dim(2) == 3, "stem: image must be [H,W,3]");
  check(image.dim(0) % 4 == 0 && image.dim(1) % 4 == 0,
        "stem: image sides must be divisible by 4");
  Tensor<S> x = gelu(conv2d(image, m.stem_w1, m.stem_b1, 2, 1));
  x = gelu(conv2d(x, m.stem_w2, m.stem_b2, 1, 1));
  return conv2d(x, m.stem_w3, m.stem_b3, 2, 1);
}

template <typename S>
Model<S> build_variant(const VariantConfig& cfg) {
  for (int d : cfg.depths) check(d >= 1, "build_variant: stage depths must be >= 1");
  Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL);
  Model<S> m;
  m.cfg = cfg;
  int c = cfg.base_channels;
  int ch = c / 2;
  auto conv_init = [&](Tensor<S>& t, int fan_in) {
    double bound = 1.0 / std::sqrt(double(fan_in));
    for (auto& v : t.param_data()) v = S(rng.uniform(-bound, bound));
    t.set_needs_grad();
  };
  m.stem_w1 = Tensor<S>::zeros({3, 3, 3, ch});
  conv_init(m.stem_w1, 3 * 9);
  m.stem_b1 = Tensor<S>::zeros({ch}).set_needs_grad();
  m.stem_w2 = Tensor<S>::zeros({3, 3, ch, ch});
  conv_init(m.stem_w2, ch * 9);
  m.stem_b2 = Tensor<S>::zeros({ch}).set_needs_grad();
  m.stem_w3 = Tensor<S>::zeros({3, 3, ch, c});
  conv_init(m.stem_w3, ch * 9);
  m.stem_b3 = Tensor<S>::zeros({c}).set_needs_grad();

  int total_blocks = 0;
  for (int d : cfg.depths) total_blocks += d;
  int block_index = 0;
  int grid = cfg.image_size / 4;
  m.stages.resize(4);
  for (int si = 0; si < 4; ++si) {
    StageParams<S>& st = m.stages[size_t(si)];
    int dim = cfg.base_channels << si;
    if (si > 0) {
      st.has_downsample = true;
      st.ds_w = Tensor<S>::zeros({3, 3, dim / 2, dim});
      conv_init(st.ds_w, (dim / 2) * 9);
      st.ds_b = Tensor<S>::zeros({dim}).set_needs_grad();
      grid /= 2;
    }
    bool quad = cfg.stage_uses_quad(si + 1);
    int shifted_seen = 0;
    for (int bi = 0; bi < cfg.depths[size_t(si)]; ++bi) {
      BlockConfig bc;
      bc.dim = dim;
      bc.expansion_ratio = cfg.expansion_ratio;
      bc.mlp_ratio = cfg.mlp_ratio;
      bc.d_state = cfg.d_state;
      bc.conv_width = cfg.conv_width;
      bc.uses_quad_scan = quad;
      bc.tau = cfg.tau;
      bc.drop_path = total_blocks > 1 ? cfg.drop_path_rate * double(block_index) /
                                            double(total_blocks - 1)
                                      : 0.0;
      // every other QuadVSS block shifts; successive shifted blocks take
      // complementary directions, magnitude = half the fine window
      if (quad && cfg.enable_shift && bi % 2 == 1) {
        int dy = grid / 8, dx = grid / 8;
        if (shifted_seen % 2 == 1) {
          dy = -dy;
          dx = -dx;
        }
        bc.shift = ShiftSpec{dy, dx};
        ++shifted_seen;
      }
      st.blocks.push_back(BlockParams<S>::init(bc, rng));
      ++block_index;
    }
  }
  int c4 = cfg.base_channels * 8;
  m.head_ln_g = Tensor<S>::full({c4}, S(1)).set_needs_grad();
  m.head_ln_b = Tensor<S>::zeros({c4}).set_needs_grad();
  m.head_w = Tensor<S>::zeros({c4, cfg.num_classes});
  conv_init(m.head_w, c4);
  m.head_b = Tensor<S>::zeros({cfg.num_classes}).set_needs_grad();
  return m;
}

// Forward pass for one image. Collects per-QuadVSS-block partition decisions
// and (optionally) the per-stage feature tensors.
template <typename S>
Tensor<S> forward_classify(
    const Model<S>& m, const Tensor<S>& image, RunMode mode, Rng* rng,
    std::vector<QuadDecision<std::type_identity_t<S>>>* decisions = nullptr,
    std::vector<Tensor<std::type_identity_t<S>>>* stage_outputs = nullptr) {
  Tensor<S> x = stem_forward(m, image);
  for (size_t si = 0; si < m.stages.size(); ++si) {
    const StageParams<S>& st = m.stages[si];
    if (st.has_downsample) x = conv2d(x, st.ds_w, st.ds_b, 2, 1);
    for (const auto& blk : st.blocks) {
      if (blk.cfg.uses_quad_scan) {
        QuadDecision<S> dec;
        x = quadvss_block(blk, x, mode, rng, decisions ? &dec : nullptr);
        if (decisions) decisions->push_back(std::move(dec));
      } else {
        x = vss_block(blk, x, mode, rng);
      }
    }
    if (stage_outputs) stage_outputs->push_back(x);
  }
  Tensor<S> n = layer_norm(x, m.head_ln_g, m.head_ln_b, S(1e-6));
  Tensor<S> pooled = adaptive_avg_pool2d(n, 1, 1);  // [1,1,C4]
  Tensor<S> row = reshape(pooled, {1, m.stage_channels(3)});
  Tensor<S> logits = add_bias(matmul(row, m.head_w), m.head_b);
  return reshape(logits, {m.cfg.num_classes});
}

// ---------------------------------------------------------------------------
// Parameter / FLOP accounting.
//
// FLOP convention: one multiply-add = 2 flops, transcendentals = 1; bias adds
// and elementwise plumbing are included at their элement counts. The `macs`
// field halves the total, which is the convention the published model tables
// use.

struct FlopReport {
  long long params = 0;
  long long flops = 0;          // multiply-adds x2
  long long token_op_flops = 0; // scan-path share of `flops`
  long long attention_reference_flops = 0;

  long long macs() const { return flops / 2; }
};

inline long long attention_reference_flops(long long h, long long w, long long d) {
  // 4 H W D^2 + 2 (H W)^2 D
  long long hw = h * w;
  return 4 * hw * d * d + 2 * hw * hw * d;
}

namespace detail {

inline long long linear_flops(long long tokens, long long in, long long out) {
  return 2 * tokens * in * out;
}

inline long long predictor_flops(long long t, long long c) {
  long long f = 0;
  f += 8 * t * c;                 // layer norm
  f += linear_flops(t, c, c) + 6 * t * c;  // embed + gelu
  f += 2 * t * (c / 2);           // adaptive pool of the local half
  f += 8 * t * (c / 2);           // bilinear upsample
  f += linear_flops(t, c, 2) + 6 * t * 2 + 5 * t * 2;  // predict + gelu + softmax
  f += 2 * t;                     // quadrant pooling
  return f;
}

inline long long scan_flops(long long t, long long h, long long n, long long r) {
  long long f = 0;
  f += linear_flops(t, h, r) + linear_flops(t, r, h);  // delta projection
  f += 2 * linear_flops(t, h, n);                      // B and C projections
  f += t * h * (11 * n + 3);                           // per-step core + softplus
  return f;
}

inline long long token_op_flops(long long t, long long d, long long hid,
                                long long n, long long r, long long k,
                                bool quad) {
  long long f = 0;
  if (quad) f += predictor_flops(t, d) + 6 * t;  // predictor + mask plumbing
  f += linear_flops(t, d, hid);
  f += 2 * t * hid * k + 6 * t * hid;  // depthwise conv + gelu
  f += scan_flops(t, hid, n, r);
  f += linear_flops(t, hid, d);
  return f;
}

}  // namespace detail

template <typename S>
FlopReport count_params_flops(Model<S>& m, int image_h, int image_w) {
  FlopReport rep;
  rep.params = m.parameter_count();

  const VariantConfig& cfg = m.cfg;
  long long c = cfg.base_channels, ch = c / 2;
  long long h2 = image_h / 2, w2 = image_w / 2;
  long long h4 = image_h / 4, w4 = image_w / 4;
  rep.flops += 2 * h2 * w2 * 9 * 3 * ch + 6 * h2 * w2 * ch;
  rep.flops += 2 * h2 * w2 * 9 * ch * ch + 6 * h2 * w2 * ch;
  rep.flops += 2 * h4 * w4 * 9 * ch * c;

  long long gh = h4, gw = w4;
  for (int si = 0; si < 4; ++si) {
    long long dim = c << si;
    if (si > 0) {
      gh /= 2;
      gw /= 2;
      rep.flops += 2 * gh * gw * 9 * (dim / 2) * dim;
    }
    long long t = gh * gw;
    bool quad = cfg.stage_uses_quad(si + 1);
    const auto& blocks = m.stages[size_t(si)].blocks;
    for (const auto& blk : blocks) {
      long long hid = blk.cfg.hidden();
      long long n = blk.cfg.d_state;
      long long r = blk.op.ssm.dt_rank;
      long long top = detail::token_op_flops(t, dim, hid, n, r,
                                             blk.cfg.conv_width, quad);
      rep.token_op_flops += top;
      rep.flops += top;
      rep.flops += 2 * (8 * t * dim);  // the two layer norms
      long long mdim = (long long)(blk.cfg.mlp_ratio * double(dim));
      rep.flops += detail::linear_flops(t, dim, mdim) + 6 * t * mdim +
                   detail::linear_flops(t, mdim, dim);
      rep.flops += 2 * (2 * t * dim);  // residual adds
    }
  }
  long long c4 = c * 8;
  rep.flops += 8 * gh * gw * c4 + 2 * gh * gw * c4;  // head norm + pool
  rep.flops += detail::linear_flops(1, c4, cfg.num_classes);

  rep.attention_reference_flops = attention_reference_flops(14, 14, 384);
  return rep;
}

}  // namespace quadscan
