#pragma once

// Exact, invertible 2D -> 1D scan orderings.
//
// A ScanPermutation maps sequence position -> raster position (forward) and
// carries its inverse. Orderings:
//   raster       row-major over the full grid.
//   coarse_quad  loop (q1, q2, i, j): the four (H/2, W/2) quadrants in
//                row-major quadrant order, row-major inside each.
//   fine_quad    loop (q1, q3, q2, q4, i, j) over (H/4, W/4) windows: the
//                fused two-level ordering, equivalent to visiting the 4x4
//                window grid row-major.
//   composed     coarse ordering with one selected quadrant's block refined
//                sub-quadrant-major; this is the mixed-granularity ordering
//                the differentiable sequence construction uses, so that each
//                coarse block stays contiguous.
//
// Permutations are pure index data, built once per key and cached immutably.

#include <array>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>
#include <vector>

#include "tensor.hpp"

namespace quadscan {

enum class ScanKind { raster, coarse_quad, fine_quad, composed };

inline const char* scan_kind_name(ScanKind k) {
  switch (k) {
    case ScanKind::raster: return "raster";
    case ScanKind::coarse_quad: return "coarse";
    case ScanKind::fine_quad: return "fine";
    case ScanKind::composed: return "composed";
  }
  return "?";
}

struct ScanPermutation {
  int length = 0;
  int height = 0, width = 0;
  ScanKind kind = ScanKind::raster;
  std::vector<int> forward;  // forward[seq_pos] = raster_pos
  std::vector<int> inverse;  // inverse[raster_pos] = seq_pos

  void finish() {
    length = int(forward.size());
    inverse.assign(forward.size(), -1);
    for (int i = 0; i < length; ++i) {
      int r = forward[size_t(i)];
      check(r >= 0 && r < length && inverse[size_t(r)] == -1,
            "scan permutation is not a bijection");
      inverse[size_t(r)] = i;
    }
  }
};

inline ScanPermutation raster_perm(int h, int w) {
  ScanPermutation p;
  p.height = h;
  p.width = w;
  p.kind = ScanKind::raster;
  p.forward.resize(size_t(h) * w);
  for (int i = 0; i < h * w; ++i) p.forward[size_t(i)] = i;
  p.finish();
  return p;
}

// Fixed-size window arrangement: (H/wh) x (W/ww) windows visited row-major,
// row-major inside each window.
inline ScanPermutation window_arrange_perm(int h, int w, int wh, int ww) {
  check(wh >= 1 && ww >= 1 && h % wh == 0 && w % ww == 0,
        "window_arrange: window must tile the grid");
  ScanPermutation p;
  p.height = h;
  p.width = w;
  p.forward.reserve(size_t(h) * w);
  for (int a = 0; a < h / wh; ++a)
    for (int b = 0; b < w / ww; ++b)
      for (int i = 0; i < wh; ++i)
        for (int j = 0; j < ww; ++j)
          p.forward.push_back((a * wh + i) * w + (b * ww + j));
  p.finish();
  return p;
}

inline ScanPermutation coarse_partition_perm(int h, int w) {
  check(h % 2 == 0 && w % 2 == 0, "coarse partition: H and W must be even");
  ScanPermutation p;
  p.height = h;
  p.width = w;
  p.kind = ScanKind::coarse_quad;
  int hh = h / 2, ww = w / 2;
  p.forward.reserve(size_t(h) * w);
  for (int q1 = 0; q1 < 2; ++q1)
    for (int q2 = 0; q2 < 2; ++q2)
      for (int i = 0; i < hh; ++i)
        for (int j = 0; j < ww; ++j)
          p.forward.push_back((q1 * hh + i) * w + (q2 * ww + j));
  p.finish();
  return p;
}

// Fused two-level ordering, dim order (q1, q3, q2, q4, i, j): row-half,
// row-quarter, column-half, column-quarter, then rows/cols inside the
// (H/4, W/4) window.
inline ScanPermutation fine_partition_perm(int h, int w) {
  check(h % 4 == 0 && w % 4 == 0, "fine partition: H and W must be divisible by 4");
  ScanPermutation p;
  p.height = h;
  p.width = w;
  p.kind = ScanKind::fine_quad;
  int hf = h / 4, wf = w / 4;
  p.forward.reserve(size_t(h) * w);
  for (int q1 = 0; q1 < 2; ++q1)
    for (int q3 = 0; q3 < 2; ++q3)
      for (int q2 = 0; q2 < 2; ++q2)
        for (int q4 = 0; q4 < 2; ++q4)
          for (int i = 0; i < hf; ++i)
            for (int j = 0; j < wf; ++j)
              p.forward.push_back((q1 * (h / 2) + q3 * hf + i) * w +
                                  (q2 * (w / 2) + q4 * wf + j));
  p.finish();
  return p;
}

// Coarse ordering with the selected quadrant's contiguous block re-ordered by
// the one-level quad partition of that (H/2, W/2) quadrant. Every coarse
// block occupies the same sequence range as in coarse_partition_perm, which
// keeps the two summands of the masked sequence construction disjoint.
inline ScanPermutation composed_perm(int h, int w, int quadrant) {
  check(quadrant >= 0 && quadrant < 4, "composed perm: quadrant in [0,4)");
  ScanPermutation coarse = coarse_partition_perm(h, w);
  ScanPermutation inner = coarse_partition_perm(h / 2, w / 2);
  ScanPermutation p;
  p.height = h;
  p.width = w;
  p.kind = ScanKind::composed;
  p.forward = coarse.forward;
  int block = (h / 2) * (w / 2);
  int base = quadrant * block;
  for (int t = 0; t < block; ++t)
    p.forward[size_t(base + t)] =
        coarse.forward[size_t(base + inner.forward[size_t(t)])];
  p.finish();
  return p;
}

inline ScanPermutation restore_perm(const ScanPermutation& p) {
  ScanPermutation r;
  r.height = p.height;
  r.width = p.width;
  r.kind = p.kind;
  r.forward = p.inverse;
  r.finish();
  return r;
}

// r = apply p first, then q: gather(gather(x, p), q) == gather(x, r)
inline ScanPermutation compose_perms(const ScanPermutation& p,
                                     const ScanPermutation& q) {
  check(p.length == q.length, "compose: length mismatch");
  ScanPermutation r;
  r.height = p.height;
  r.width = p.width;
  r.forward.resize(static_cast<size_t>(p.length));
  for (int i = 0; i < p.length; ++i)
    r.forward[size_t(i)] = p.forward[size_t(q.forward[size_t(i)])];
  r.finish();
  return r;
}

// ---------------------------------------------------------------------------
// Cache. Keyed by (H, W, kind, quadrant); quadrant only matters for composed.

class PermutationCache {
 public:
  static std::shared_ptr<const ScanPermutation> get(int h, int w, ScanKind kind,
                                                    int quadrant = 0) {
    auto& self = instance();
    std::lock_guard<std::mutex> lock(self.mu_);
    auto key = std::make_tuple(h, w, int(kind),
                               kind == ScanKind::composed ? quadrant : 0);
    auto it = self.map_.find(key);
    if (it != self.map_.end()) return it->second;
    ScanPermutation p;
    switch (kind) {
      case ScanKind::raster: p = raster_perm(h, w); break;
      case ScanKind::coarse_quad: p = coarse_partition_perm(h, w); break;
      case ScanKind::fine_quad: p = fine_partition_perm(h, w); break;
      case ScanKind::composed: p = composed_perm(h, w, quadrant); break;
    }
    auto sp = std::make_shared<const ScanPermutation>(std::move(p));
    self.map_.emplace(key, sp);
    return sp;
  }

  // Test hook: overwrite one cached entry with a corrupted copy. Returns
  // false if the entry was not cached yet.
  static bool debug_corrupt(int h, int w, ScanKind kind, int quadrant = 0) {
    auto& self = instance();
    std::lock_guard<std::mutex> lock(self.mu_);
    auto key = std::make_tuple(h, w, int(kind),
                               kind == ScanKind::composed ? quadrant : 0);
    auto it = self.map_.find(key);
    if (it == self.map_.end()) return false;
    ScanPermutation bad = *it->second;
    if (bad.length >= 2) std::swap(bad.forward[0], bad.forward[1]);
    // deliberately stale inverse: do not refresh
    it->second = std::make_shared<const ScanPermutation>(std::move(bad));
    return true;
  }

  static void debug_clear() {
    auto& self = instance();
    std::lock_guard<std::mutex> lock(self.mu_);
    self.map_.clear();
  }

 private:
  static PermutationCache& instance() {
    static PermutationCache c;
    return c;
  }
  std::mutex mu_;
  std::map<std::tuple<int, int, int, int>,
           std::shared_ptr<const ScanPermutation>>
      map_;
};

// ---------------------------------------------------------------------------
// Tensor-facing operations

// out[i, :] = x[p.forward[i], :]
template <typename S>
Tensor<S> gather_sequence(const Tensor<S>& x, const ScanPermutation& p) {
  check(x.dim(0) == p.length, "gather_sequence: sequence length " +
                                  std::to_string(x.dim(0)) +
                                  " != permutation length " +
                                  std::to_string(p.length));
  return gather_rows(x, p.forward);
}

// Broadcast a 2x2 quadrant mask to a raster token mask of shape [H*W].
// Differentiable in m: each token's mask value is the owning quadrant's entry.
template <typename S>
Tensor<S> expand_quadrant_mask(const Tensor<S>& m, int h, int w) {
  check(m.size() == 4, "expand_quadrant_mask: m must hold 4 values");
  check(h % 2 == 0 && w % 2 == 0, "expand_quadrant_mask: H and W must be even");
  Tensor<S> out = Tensor<S>::zeros({h * w});
  auto& mv = m.vals();
  auto& ov = out.param_data();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      ov[size_t(i * w + j)] = mv[size_t((i / (h / 2)) * 2 + (j / (w / 2)))];
  if (detail::any_tracked(m)) {
    detail::mark_out(out);
    auto md = m.data(), od = out.data();
    Tape<S>::active()->record("expand_quadrant_mask", od, [md, od, h, w] {
      if (od->grad.empty() || !md->needs_grad) return;
      md->ensure_grad();
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          md->grad[size_t((i / (h / 2)) * 2 + (j / (w / 2)))] +=
              od->grad[size_t(i * w + j)];
    });
  }
  return out;
}

}  // namespace quadscan
