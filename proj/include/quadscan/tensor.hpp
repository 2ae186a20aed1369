#pragma once

// Dense row-major tensor with tape-based reverse-mode differentiation.
//
// A Tensor<S> is a cheap handle (shared_ptr) to shape + values + an optional
// gradient buffer. Operations are free functions; when a Tape<S> is active on
// the current thread and an input participates in differentiation, the
// operation appends one tape entry holding a backward closure. backward(root)
// replays the entries once, in reverse creation order (creation order is
// topological by construction).
//
// Gradient contract: gradients accumulate (+=) into leaf .grad buffers across
// backward calls; intermediate grads are reset at the start of each backward
// pass. Values are immutable after construction except through param_data()
// (optimizer updates) and the grad buffer.
//
// S is float for the model path and double for oracle/gradient-check work.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace quadscan {

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

template <typename S>
struct TensorData {
  Shape shape;
  std::vector<S> val;
  std::vector<S> grad;  // empty until first needed
  bool needs_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(val.size(), S(0));
  }
};

template <typename S>
class Tape {
 public:
  struct Entry {
    const char* tag;
    std::shared_ptr<TensorData<S>> out;  // reset before each backward pass
    std::function<void()> backward;
  };

  void record(const char* tag, std::shared_ptr<TensorData<S>> out,
              std::function<void()> fn) {
    entries_.push_back(Entry{tag, std::move(out), std::move(fn)});
  }

  size_t size() const { return entries_.size(); }

  // Replays all entries once, newest first. Intermediate grads are zeroed
  // up front so repeated calls accumulate only into leaves.
  void run_backward() {
    for (auto& e : entries_) {
      if (!e.out->grad.empty())
        std::fill(e.out->grad.begin(), e.out->grad.end(), S(0));
    }
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

  void run_backward_from(TensorData<S>* root) {
    for (auto& e : entries_) {
      if (!e.out->grad.empty())
        std::fill(e.out->grad.begin(), e.out->grad.end(), S(0));
    }
    root->ensure_grad();
    root->grad[0] += S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

  static Tape<S>*& active() {
    static thread_local Tape<S>* t = nullptr;
    return t;
  }

 private:
  std::vector<Entry> entries_;
};

// RAII scope making a tape the active one for the current thread.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& t) : prev_(Tape<S>::active()) {
    Tape<S>::active() = &t;
  }
  ~TapeScope() { Tape<S>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

template <typename S>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData<S>>()) {}

  static Tensor zeros(const Shape& shape) {
    Tensor t;
    t.d_->shape = shape;
    t.d_->val.assign(size_t(shape_numel(shape)), S(0));
    return t;
  }

  static Tensor full(const Shape& shape, S value) {
    Tensor t = zeros(shape);
    std::fill(t.d_->val.begin(), t.d_->val.end(), value);
    return t;
  }

  static Tensor from(const Shape& shape, std::vector<S> values) {
    check(shape_numel(shape) == (long long)values.size(),
          "tensor: data length " + std::to_string(values.size()) +
              " does not match shape " + shape_str(shape));
    Tensor t;
    t.d_->shape = shape;
    t.d_->val = std::move(values);
    return t;
  }

  static Tensor scalar(S value) { return from({1}, {value}); }

  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[size_t(i)]; }
  int rank() const { return int(d_->shape.size()); }
  long long size() const { return (long long)d_->val.size(); }

  const std::vector<S>& vals() const { return d_->val; }
  S item() const {
    check(size() == 1, "item() on non-scalar tensor " + shape_str(shape()));
    return d_->val[0];
  }

  // Mutable access for parameter initialization / optimizer steps only.
  std::vector<S>& param_data() { return d_->val; }

  bool needs_grad() const { return d_->needs_grad; }
  Tensor& set_needs_grad(bool v = true) {
    d_->needs_grad = v;
    return *this;
  }

  const std::vector<S>& grad() const {
    d_->ensure_grad();
    return d_->grad;
  }
  std::vector<S>& grad_mut() {
    d_->ensure_grad();
    return d_->grad;
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
  }

  std::shared_ptr<TensorData<S>> data() const { return d_; }

  bool all_finite() const {
    for (S v : d_->val)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

 private:
  std::shared_ptr<TensorData<S>> d_;
};

namespace detail {

template <typename S>
bool tracked(const Tensor<S>& t) {
  return t.needs_grad() && Tape<S>::active() != nullptr;
}

template <typename S, typename... Ts>
bool any_tracked(const Tensor<S>& t, const Ts&... rest) {
  if constexpr (sizeof...(rest) == 0) return tracked(t);
  else return tracked(t) || any_tracked(rest...);
}

template <typename S>
void mark_out(Tensor<S>& out) {
  out.data()->needs_grad = true;
}

template <typename S>
void accum(const std::shared_ptr<TensorData<S>>& t, size_t i, S g) {
  if (!t->needs_grad) return;
  t->ensure_grad();
  t->grad[i] += g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  auto &av = a.vals(), &bv = b.vals();
  auto& ov = out.param_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::any_tracked(a, b)) {
    detail::mark_out(out);
    auto ad = a.data(), bd = b.data(), od = out.data();
    Tape<S>::active()->record("add", od, [ad, bd, od] {
      if (od->grad.empty()) return;
      if (ad->needs_grad) {
        ad->ensure_grad();
        for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->needs_grad) {
        bd->ensure_grad();
        for (size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  auto &av = a.vals(), &bv = b.vals();
  auto& ov = out.param_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (detail::any_tracked(a, b)) {
    detail::mark_out(out);
    auto ad = a.data(), bd = b.data(), od = out.data();
    Tape<S>::active()->record("sub", od, [ad, bd, od] {
      if (od->grad.empty()) return;
      if (ad->needs_grad) {
        ad->ensure_grad();
        for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->needs_grad) {
        bd->ensure_grad();
        for (size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] -= od->grad[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  auto &av = a.vals(), &bv = b.vals();
  auto& ov = out.param_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::any_tracked(a, b)) {
    detail::mark_out(out);
    auto ad = a.data(), bd = b.data(), od = out.data();
    Tape<S>::active()->record("mul", od, [ad, bd, od] {
      if (od->grad.empty()) return;
      if (ad->needs_grad) {
        ad->ensure_grad();
        for (size_t i = 0; i < od->grad.size(); ++i)
          ad->grad[i] += od->grad[i] * bd->val[i];
      }
      if (bd->needs_grad) {
        bd->ensure_grad();
        for (size_t i = 0; i < od->grad.size(); ++i)
          bd->grad[i] += od->grad[i] * ad->val[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  auto& av = a.vals();
  auto& ov = out.param_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (detail::any_tracked(a)) {
    detail::mark_out(out);
    auto ad = a.data(), od = out.data();
    Tape<S>::active()->record("scale", od, [ad, od, c] {
      if (od->grad.empty() || !ad->needs_grad) return;
      ad->ensure_grad();
      for (size_t i = 0; i < od->grad.size(); ++i)
        ad->grad[i] += od->grad[i] * c;
    });
  }
  return out;
}

// x[..., N] + b[N], broadcast over all leading dims.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  check(x.rank() >= 1 && b.rank() == 1 && x.dim(x.rank() - 1) == b.dim(0),
        "add_bias: bias length must match last axis");
  int n = b.dim(0);
  long long rows = x.size() / n;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto &xv = x.vals(), &bv = b.vals();
  auto& ov = out.param_data();
  for (long long r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] + bv[j];
  if (detail::any_tracked(x, b)) {
    detail::mark_out(out);
    auto xd = x.data(), bd = b.data(), od = out.data();
    Tape<S>::active()->record("add_bias", od, [xd, bd, od, rows, n] {
      if (od->grad.empty()) return;
      if (xd->needs_grad) {
        xd->ensure_grad();
        for (size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i];
      }
      if (bd->needs_grad) {
        bd->ensure_grad();
        for (long long r = 0; r < rows; ++r)
          for (int j = 0; j < n; ++j) bd->grad[j] += od->grad[r * n + j];
      }
    });
  }
  return out;
}

// Row scaling: out[i, :] = x[i, :] * m[i]. m has shape [L] or [L, 1].
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& x, const Tensor<S>& m) {
  check(x.rank() == 2, "scale_rows: x must be [L, D]");
  int L = x.dim(0), D = x.dim(1);
  check((long long)m.size() == L, "scale_rows: mask length must equal rows");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto &xv = x.vals(), &mv = m.vals();
  auto& ov = out.param_data();
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < D; ++j) ov[i * D + j] = xv[i * D + j] * mv[i];
  if (detail::any_tracked(x, m)) {
    detail::mark_out(out);
    auto xd = x.data(), md = m.data(), od = out.data();
    Tape<S>::active()->record("scale_rows", od, [xd, md, od, L, D] {
      if (od->grad.empty()) return;
      if (xd->needs_grad) {
        xd->ensure_grad();
        for (int i = 0; i < L; ++i)
          for (int j = 0; j < D; ++j)
            xd->grad[i * D + j] += od->grad[i * D + j] * md->val[i];
      }
      if (md->needs_grad) {
        md->ensure_grad();
        for (int i = 0; i < L; ++i) {
          S g = 0;
          for (int j = 0; j < D; ++j) g += od->grad[i * D + j] * xd->val[i * D + j];
          md->grad[i] += g;
        }
      }
    });
  }
  return out;
}

// Per-channel scaling: out[..., c] = x[..., c] * s[c].
template <typename S>
Tensor<S> scale_channels(const Tensor<S>& x, const Tensor<S>& s) {
  check(s.rank() == 1 && x.dim(x.rank() - 1) == s.dim(0),
        "scale_channels: scale length must match last axis");
  int n = s.dim(0);
  long long rows = x.size() / n;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto &xv = x.vals(), &sv = s.vals();
  auto& ov = out.param_data();
  for (long long r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] * sv[j];
  if (detail::any_tracked(x, s)) {
    detail::mark_out(out);
    auto xd = x.data(), sd = s.data(), od = out.data();
    Tape<S>::active()->record("scale_channels", od, [xd, sd, od, rows, n] {
      if (od->grad.empty()) return;
      if (xd->needs_grad) {
        xd->ensure_grad();
        for (long long r = 0; r < rows; ++r)
          for (int j = 0; j < n; ++j)
            xd->grad[r * n + j] += od->grad[r * n + j] * sd->val[j];
      }
      if (sd->needs_grad) {
        sd->ensure_grad();
        for (long long r = 0; r < rows; ++r)
          for (int j = 0; j < n; ++j)
            sd->grad[j] += od->grad[r * n + j] * xd->val[r * n + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul: [.., m, k] x [k, n]; the left operand may carry leading batch dims.
// Plain 2D x 2D is the common case.

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.rank() >= 2 && b.rank() == 2,
        "matmul: expected a=[..,m,k], b=[k,n], got " + shape_str(a.shape()) +
            " x " + shape_str(b.shape()));
  int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  check(b.dim(0) == k, "matmul: inner dimensions disagree: " +
                           shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int n = b.dim(1);
  long long batch = a.size() / ((long long)m * k);
  Shape oshape(a.shape().begin(), a.shape().end() - 1);
  oshape.back() = m;
  oshape.push_back(n);
  Tensor<S> out = Tensor<S>::zeros(oshape);
  const S* av = a.vals().data();
  const S* bv = b.vals().data();
  S* ov = out.param_data().data();
  for (long long bi = 0; bi < batch; ++bi) {
    const S* A = av + bi * m * k;
    S* O = ov + bi * (long long)m * n;
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        S aip = A[i * k + p];
        if (aip == S(0)) continue;
        const S* Bp = bv + (long long)p * n;
        S* Oi = O + (long long)i * n;
        for (int j = 0; j < n; ++j) Oi[j] += aip * Bp[j];
      }
  }
  if (detail::any_tracked(a, b)) {
    detail::mark_out(out);
    auto ad = a.data(), bd = b.data(), od = out.data();
    Tape<S>::active()->record("matmul", od, [ad, bd, od, batch, m, k, n] {
      if (od->grad.empty()) return;
      for (long long bi = 0; bi < batch; ++bi) {
        const S* G = od->grad.data() + bi * (long long)m * n;
        const S* A = ad->val.data() + bi * (long long)m * k;
        if (ad->needs_grad) {
          ad->ensure_grad();
          S* dA = ad->grad.data() + bi * (long long)m * k;
          const S* B = bd->val.data();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              S g = G[i * n + j];
              if (g == S(0)) continue;
              for (int p = 0; p < k; ++p) dA[i * k + p] += g * B[p * n + j];
            }
        }
        if (bd->needs_grad) {
          bd->ensure_grad();
          S* dB = bd->grad.data();
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              S aip = A[i * k + p];
              if (aip == S(0)) continue;
              const S* Gi = G + (long long)i * n;
              S* dBp = dB + (long long)p * n;
              for (int j = 0; j < n; ++j) dBp[j] += aip * Gi[j];
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax along an axis, computed with max-subtraction.

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (axis < 0) axis += x.rank();
  check(axis >= 0 && axis < x.rank(), "softmax: invalid axis");
  int n = x.dim(axis);
  long long inner = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  long long outer = x.size() / (n * inner);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto& xv = x.vals();
  auto& ov = out.param_data();
  for (long long o = 0; o < outer; ++o)
    for (long long in = 0; in < inner; ++in) {
      long long base = o * n * inner + in;
      S mx = xv[base];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      S sum = 0;
      for (int j = 0; j < n; ++j) {
        S e = std::exp(xv[base + j * inner] - mx);
        ov[base + j * inner] = e;
        sum += e;
      }
      for (int j = 0; j < n; ++j) ov[base + j * inner] /= sum;
    }
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("softmax", od, [xd, od, outer, inner, n] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (long long o = 0; o < outer; ++o)
        for (long long in = 0; in < inner; ++in) {
          long long base = o * n * inner + in;
          S dot = 0;
          for (int j = 0; j < n; ++j)
            dot += od->grad[base + j * inner] * od->val[base + j * inner];
          for (int j = 0; j < n; ++j)
            xd->grad[base + j * inner] +=
                od->val[base + j * inner] * (od->grad[base + j * inner] - dot);
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer_norm over the last (channel) axis, gamma/beta affine, eps inside sqrt.

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-6)) {
  int C = x.dim(x.rank() - 1);
  check(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 &&
            beta.dim(0) == C,
        "layer_norm: gamma/beta must be length-C vectors");
  long long rows = x.size() / C;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  // xhat saved for backward
  auto xhat = std::make_shared<std::vector<S>>(size_t(x.size()));
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  auto &xv = x.vals(), &gv = gamma.vals(), &bv = beta.vals();
  auto& ov = out.param_data();
  for (long long r = 0; r < rows; ++r) {
    const S* row = xv.data() + r * C;
    S mean = 0;
    for (int j = 0; j < C; ++j) mean += row[j];
    mean /= S(C);
    S var = 0;
    for (int j = 0; j < C; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= S(C);
    S inv = S(1) / std::sqrt(var + eps);
    (*inv_std)[size_t(r)] = inv;
    for (int j = 0; j < C; ++j) {
      S xh = (row[j] - mean) * inv;
      (*xhat)[size_t(r * C + j)] = xh;
      ov[r * C + j] = gv[j] * xh + bv[j];
    }
  }
  if (detail::any_tracked(x, gamma, beta)) {
    detail::mark_out(out);
    auto xd = x.data(), gd = gamma.data(), bd = beta.data(), od = out.data();
    Tape<S>::active()->record(
        "layer_norm", od, [xd, gd, bd, od, xhat, inv_std, rows, C] {
          if (od->grad.empty()) return;
          for (long long r = 0; r < rows; ++r) {
            const S* g = od->grad.data() + r * C;
            const S* xh = xhat->data() + r * C;
            if (gd->needs_grad) {
              gd->ensure_grad();
              for (int j = 0; j < C; ++j) gd->grad[j] += g[j] * xh[j];
            }
            if (bd->needs_grad) {
              bd->ensure_grad();
              for (int j = 0; j < C; ++j) bd->grad[j] += g[j];
            }
            if (xd->needs_grad) {
              xd->ensure_grad();
              S inv = (*inv_std)[size_t(r)];
              S mean_dxh = 0, mean_dxh_xh = 0;
              for (int j = 0; j < C; ++j) {
                S dxh = g[j] * gd->val[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
              }
              mean_dxh /= S(C);
              mean_dxh_xh /= S(C);
              for (int j = 0; j < C; ++j) {
                S dxh = g[j] * gd->val[j];
                xd->grad[r * C + j] +=
                    inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// GELU, exact erf form: x * Phi(x).

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto& xv = x.vals();
  auto& ov = out.param_data();
  for (size_t i = 0; i < ov.size(); ++i) {
    S v = xv[i];
    ov[i] = v * S(0.5) * (S(1) + S(std::erf(double(v) * 0.7071067811865476)));
  }
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("gelu", od, [xd, od] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (size_t i = 0; i < od->grad.size(); ++i) {
        double v = double(xd->val[i]);
        double phi = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
        double pdf = std::exp(-0.5 * v * v) * 0.3989422804014327;
        xd->grad[i] += od->grad[i] * S(phi + v * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d. x: [H, W, Cin], w: [kh, kw, Cin, Cout], bias optional [Cout].
// Cross-correlation, zero padding, output (H + 2p - kh)/s + 1 (floor).

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int stride, int pad) {
  check(x.rank() == 3 && w.rank() == 4, "conv2d: x=[H,W,Ci], w=[kh,kw,Ci,Co]");
  int H = x.dim(0), W = x.dim(1), Ci = x.dim(2);
  int kh = w.dim(0), kw = w.dim(1), Co = w.dim(3);
  check(w.dim(2) == Ci, "conv2d: channel mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  check(Ho > 0 && Wo > 0, "conv2d: non-positive output size");
  bool has_bias = bias.size() > 0;
  if (has_bias) check(bias.rank() == 1 && bias.dim(0) == Co, "conv2d: bad bias");
  Tensor<S> out = Tensor<S>::zeros({Ho, Wo, Co});
  auto &xv = x.vals(), &wv = w.vals();
  auto& ov = out.param_data();
  for (int oi = 0; oi < Ho; ++oi)
    for (int oj = 0; oj < Wo; ++oj) {
      S* orow = ov.data() + ((long long)oi * Wo + oj) * Co;
      if (has_bias)
        for (int co = 0; co < Co; ++co) orow[co] = bias.vals()[co];
      for (int ki = 0; ki < kh; ++ki) {
        int ii = oi * stride + ki - pad;
        if (ii < 0 || ii >= H) continue;
        for (int kj = 0; kj < kw; ++kj) {
          int jj = oj * stride + kj - pad;
          if (jj < 0 || jj >= W) continue;
          const S* xrow = xv.data() + ((long long)ii * W + jj) * Ci;
          const S* wrow = wv.data() + (((long long)ki * kw + kj) * Ci) * Co;
          for (int ci = 0; ci < Ci; ++ci) {
            S xc = xrow[ci];
            if (xc == S(0)) continue;
            const S* wc = wrow + (long long)ci * Co;
            for (int co = 0; co < Co; ++co) orow[co] += xc * wc[co];
          }
        }
      }
    }
  if (detail::any_tracked(x, w) || (has_bias && detail::tracked(bias))) {
    detail::mark_out(out);
    auto xd = x.data(), wd = w.data(), od = out.data();
    auto bd = has_bias ? bias.data() : nullptr;
    Tape<S>::active()->record(
        "conv2d", od, [xd, wd, bd, od, H, W, Ci, kh, kw, Co, Ho, Wo, stride, pad] {
          if (od->grad.empty()) return;
          for (int oi = 0; oi < Ho; ++oi)
            for (int oj = 0; oj < Wo; ++oj) {
              const S* g = od->grad.data() + ((long long)oi * Wo + oj) * Co;
              if (bd && bd->needs_grad) {
                bd->ensure_grad();
                for (int co = 0; co < Co; ++co) bd->grad[co] += g[co];
              }
              for (int ki = 0; ki < kh; ++ki) {
                int ii = oi * stride + ki - pad;
                if (ii < 0 || ii >= H) continue;
                for (int kj = 0; kj < kw; ++kj) {
                  int jj = oj * stride + kj - pad;
                  if (jj < 0 || jj >= W) continue;
                  long long xoff = ((long long)ii * W + jj) * Ci;
                  long long woff = ((long long)ki * kw + kj) * Ci * Co;
                  if (wd->needs_grad) {
                    wd->ensure_grad();
                    for (int ci = 0; ci < Ci; ++ci) {
                      S xc = xd->val[xoff + ci];
                      if (xc == S(0)) continue;
                      for (int co = 0; co < Co; ++co)
                        wd->grad[woff + ci * Co + co] += xc * g[co];
                    }
                  }
                  if (xd->needs_grad) {
                    xd->ensure_grad();
                    for (int ci = 0; ci < Ci; ++ci) {
                      S acc = 0;
                      for (int co = 0; co < Co; ++co)
                        acc += wd->val[woff + ci * Co + co] * g[co];
                      xd->grad[xoff + ci] += acc;
                    }
                  }
                }
              }
            }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// adaptive_avg_pool2d: cell (i,j) averages rows [floor(i*H/oh), ceil((i+1)*H/oh))
// and the analogous column range.

template <typename S>
Tensor<S> adaptive_avg_pool2d(const Tensor<S>& x, int oh, int ow) {
  check(x.rank() == 3, "adaptive_avg_pool2d: x must be [H,W,C]");
  int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  check(oh >= 1 && ow >= 1, "adaptive_avg_pool2d: zero output dims");
  check(oh <= H && ow <= W, "adaptive_avg_pool2d: output larger than input");
  Tensor<S> out = Tensor<S>::zeros({oh, ow, C});
  auto& xv = x.vals();
  auto& ov = out.param_data();
  auto row0 = [&](int i) { return (i * H) / oh; };
  auto row1 = [&](int i) { return ((i + 1) * H + oh - 1) / oh; };
  auto col0 = [&](int j) { return (j * W) / ow; };
  auto col1 = [&](int j) { return ((j + 1) * W + ow - 1) / ow; };
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      int r0 = row0(i), r1 = row1(i), c0 = col0(j), c1 = col1(j);
      S inv = S(1) / S((r1 - r0) * (c1 - c0));
      for (int c = 0; c < C; ++c) {
        S acc = 0;
        for (int r = r0; r < r1; ++r)
          for (int cc = c0; cc < c1; ++cc)
            acc += xv[((long long)r * W + cc) * C + c];
        ov[((long long)i * ow + j) * C + c] = acc * inv;
      }
    }
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record(
        "adaptive_avg_pool2d", od, [xd, od, H, W, C, oh, ow] {
          if (od->grad.empty() || !xd->needs_grad) return;
          xd->ensure_grad();
          for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
              int r0 = (i * H) / oh, r1 = ((i + 1) * H + oh - 1) / oh;
              int c0 = (j * W) / ow, c1 = ((j + 1) * W + ow - 1) / ow;
              S inv = S(1) / S((r1 - r0) * (c1 - c0));
              for (int c = 0; c < C; ++c) {
                S g = od->grad[((long long)i * ow + j) * C + c] * inv;
                for (int r = r0; r < r1; ++r)
                  for (int cc = c0; cc < c1; ++cc)
                    xd->grad[((long long)r * W + cc) * C + c] += g;
              }
            }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear resize with half-pixel centers (align_corners=false):
// src = (dst + 0.5) * in/out - 0.5, edge-clamped.

template <typename S>
Tensor<S> interpolate_bilinear(const Tensor<S>& x, int oh, int ow) {
  check(x.rank() == 3, "interpolate_bilinear: x must be [h,w,C]");
  int h = x.dim(0), w = x.dim(1), C = x.dim(2);
  check(h >= 1 && w >= 1 && oh >= 1 && ow >= 1, "interpolate_bilinear: bad dims");
  Tensor<S> out = Tensor<S>::zeros({oh, ow, C});
  auto& xv = x.vals();
  auto& ov = out.param_data();
  struct Tap {
    int i0, i1;
    S t;
  };
  std::vector<Tap> rt(static_cast<size_t>(oh)), ct(static_cast<size_t>(ow));
  auto make_tap = [](int dst, int in, int outn) {
    double s = (dst + 0.5) * double(in) / double(outn) - 0.5;
    double fl = std::floor(s);
    int i0 = int(fl);
    double t = s - fl;
    int i1 = i0 + 1;
    if (i0 < 0) { i0 = 0; i1 = 0; t = 0; }
    if (i1 > in - 1) { i1 = in - 1; if (i0 > in - 1) i0 = in - 1; }
    if (i0 == i1) t = 0;
    return Tap{i0, i1, S(t)};
  };
  for (int i = 0; i < oh; ++i) rt[size_t(i)] = make_tap(i, h, oh);
  for (int j = 0; j < ow; ++j) ct[size_t(j)] = make_tap(j, w, ow);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j)
      for (int c = 0; c < C; ++c) {
        const Tap &r = rt[size_t(i)], &cc = ct[size_t(j)];
        S v00 = xv[((long long)r.i0 * w + cc.i0) * C + c];
        S v01 = xv[((long long)r.i0 * w + cc.i1) * C + c];
        S v10 = xv[((long long)r.i1 * w + cc.i0) * C + c];
        S v11 = xv[((long long)r.i1 * w + cc.i1) * C + c];
        S top = v00 + (v01 - v00) * cc.t;
        S bot = v10 + (v11 - v10) * cc.t;
        ov[((long long)i * ow + j) * C + c] = top + (bot - top) * r.t;
      }
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record(
        "interpolate_bilinear", od, [xd, od, rt, ct, oh, ow, w, C] {
          if (od->grad.empty() || !xd->needs_grad) return;
          xd->ensure_grad();
          for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
              const Tap &r = rt[size_t(i)], &cc = ct[size_t(j)];
              for (int c = 0; c < C; ++c) {
                S g = od->grad[((long long)i * ow + j) * C + c];
                xd->grad[((long long)r.i0 * w + cc.i0) * C + c] +=
                    g * (S(1) - r.t) * (S(1) - cc.t);
                xd->grad[((long long)r.i0 * w + cc.i1) * C + c] +=
                    g * (S(1) - r.t) * cc.t;
                xd->grad[((long long)r.i1 * w + cc.i0) * C + c] +=
                    g * r.t * (S(1) - cc.t);
                xd->grad[((long long)r.i1 * w + cc.i1) * C + c] += g * r.t * cc.t;
              }
            }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, const Shape& shape) {
  check(shape_numel(shape) == x.size(), "reshape: element count mismatch " +
                                            shape_str(x.shape()) + " -> " +
                                            shape_str(shape));
  Tensor<S> out = Tensor<S>::from(shape, x.vals());
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("reshape", od, [xd, od] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i];
    });
  }
  return out;
}

// Slice of the last axis: out[..., 0..c1-c0) = x[..., c0..c1)
template <typename S>
Tensor<S> slice_last(const Tensor<S>& x, int c0, int c1) {
  int C = x.dim(x.rank() - 1);
  check(0 <= c0 && c0 < c1 && c1 <= C, "slice_last: bad range");
  long long rows = x.size() / C;
  int n = c1 - c0;
  Shape oshape = x.shape();
  oshape.back() = n;
  Tensor<S> out = Tensor<S>::zeros(oshape);
  auto& xv = x.vals();
  auto& ov = out.param_data();
  for (long long r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) ov[r * n + j] = xv[r * C + c0 + j];
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("slice_last", od, [xd, od, rows, C, c0, n] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j)
          xd->grad[r * C + c0 + j] += od->grad[r * n + j];
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_last(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.rank() == b.rank(), "concat_last: rank mismatch");
  for (int i = 0; i < a.rank() - 1; ++i)
    check(a.dim(i) == b.dim(i), "concat_last: leading dims differ");
  int Ca = a.dim(a.rank() - 1), Cb = b.dim(b.rank() - 1);
  long long rows = a.size() / Ca;
  Shape oshape = a.shape();
  oshape.back() = Ca + Cb;
  Tensor<S> out = Tensor<S>::zeros(oshape);
  auto &av = a.vals(), &bv = b.vals();
  auto& ov = out.param_data();
  for (long long r = 0; r < rows; ++r) {
    for (int j = 0; j < Ca; ++j) ov[r * (Ca + Cb) + j] = av[r * Ca + j];
    for (int j = 0; j < Cb; ++j) ov[r * (Ca + Cb) + Ca + j] = bv[r * Cb + j];
  }
  if (detail::any_tracked(a, b)) {
    detail::mark_out(out);
    auto ad = a.data(), bd = b.data(), od = out.data();
    Tape<S>::active()->record("concat_last", od, [ad, bd, od, rows, Ca, Cb] {
      if (od->grad.empty()) return;
      int Co = Ca + Cb;
      if (ad->needs_grad) {
        ad->ensure_grad();
        for (long long r = 0; r < rows; ++r)
          for (int j = 0; j < Ca; ++j)
            ad->grad[r * Ca + j] += od->grad[r * Co + j];
      }
      if (bd->needs_grad) {
        bd->ensure_grad();
        for (long long r = 0; r < rows; ++r)
          for (int j = 0; j < Cb; ++j)
            bd->grad[r * Cb + j] += od->grad[r * Co + Ca + j];
      }
    });
  }
  return out;
}

// Row gather: out[i, :] = x[fwd[i], :]. Gradient scatters along the inverse.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int>& fwd) {
  check(x.rank() == 2, "gather_rows: x must be [L, D]");
  int L = x.dim(0), D = x.dim(1);
  check((int)fwd.size() == L, "gather_rows: permutation length " +
                                  std::to_string(fwd.size()) +
                                  " != rows " + std::to_string(L));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto& xv = x.vals();
  auto& ov = out.param_data();
  for (int i = 0; i < L; ++i)
    std::copy_n(xv.data() + (long long)fwd[size_t(i)] * D, D,
                ov.data() + (long long)i * D);
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("gather_rows", od, [xd, od, fwd, L, D] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (int i = 0; i < L; ++i) {
        const S* g = od->grad.data() + (long long)i * D;
        S* dst = xd->grad.data() + (long long)fwd[size_t(i)] * D;
        for (int j = 0; j < D; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

// Cyclic 2D roll: out[i][j] = x[(i - dy) mod H][(j - dx) mod W].
template <typename S>
Tensor<S> roll2d(const Tensor<S>& x, int dy, int dx) {
  check(x.rank() == 3, "roll2d: x must be [H,W,C]");
  int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  check(std::abs(dy) < H && std::abs(dx) < W, "roll2d: offsets out of range");
  auto md = [](int a, int m) { return ((a % m) + m) % m; };
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto& xv = x.vals();
  auto& ov = out.param_data();
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      long long src = ((long long)md(i - dy, H) * W + md(j - dx, W)) * C;
      long long dst = ((long long)i * W + j) * C;
      std::copy_n(xv.data() + src, C, ov.data() + dst);
    }
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("roll2d", od, [xd, od, H, W, C, dy, dx, md] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          long long src = ((long long)md(i - dy, H) * W + md(j - dx, W)) * C;
          long long dst = ((long long)i * W + j) * C;
          for (int c = 0; c < C; ++c) xd->grad[src + c] += od->grad[dst + c];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc = 0;
  for (S v : x.vals()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (detail::any_tracked(x)) {
    detail::mark_out(out);
    auto xd = x.data(), od = out.data();
    Tape<S>::active()->record("sum_all", od, [xd, od] {
      if (od->grad.empty() || !xd->needs_grad) return;
      xd->ensure_grad();
      for (size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += od->grad[0];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S(1) / S(x.size()));
}

// Stable cross-entropy from raw logits against an integer label.
template <typename S>
Tensor<S> cross_entropy_logits(const Tensor<S>& logits, int label) {
  check(logits.rank() == 1, "cross_entropy_logits: logits must be 1-D");
  int K = logits.dim(0);
  check(0 <= label && label < K, "cross_entropy_logits: label out of range");
  auto& lv = logits.vals();
  S mx = lv[0];
  for (int j = 1; j < K; ++j) mx = std::max(mx, lv[j]);
  S lse = 0;
  for (int j = 0; j < K; ++j) lse += std::exp(lv[j] - mx);
  lse = std::log(lse) + mx;
  Tensor<S> out = Tensor<S>::scalar(lse - lv[label]);
  if (detail::any_tracked(logits)) {
    detail::mark_out(out);
    auto ld = logits.data(), od = out.data();
    Tape<S>::active()->record("cross_entropy", od, [ld, od, label, K, mx, lse] {
      if (od->grad.empty() || !ld->needs_grad) return;
      ld->ensure_grad();
      S g = od->grad[0];
      for (int j = 0; j < K; ++j) {
        S p = std::exp(ld->val[j] - lse);
        ld->grad[j] += g * (p - (j == label ? S(1) : S(0)));
      }
    });
  }
  return out;
}

// backward(root): root must be a scalar produced under the active tape.
template <typename S>
void backward(const Tensor<S>& root) {
  check(root.size() == 1, "backward: root must be scalar, got " +
                              shape_str(root.shape()));
  Tape<S>* tape = Tape<S>::active();
  check(tape != nullptr, "backward: no active tape on this thread");
  tape->run_backward_from(root.data().get());
}

}  // namespace quadscan
