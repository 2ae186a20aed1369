#pragma once

// Scan-vs-attention runtime benchmark. Times three single-threaded kernels
// per sequence length: the sequential selective scan, the associative
// prefix-scan evaluation, and a naive attention reference (row-streaming
// softmax(QK^T/sqrt(d)) V, O(L^2) time, O(L) memory). Timing uses a
// monotonic clock, discards one warmup run, and reports the median of k
// runs; k shrinks with the quadratic kernel's size so a full sweep stays
// within a desk-scale budget. Timed outputs are compared bitwise against an
// untimed run of the same kernel.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <vector>

#include "ssm.hpp"

namespace quadscan {

struct BenchRow {
  int length = 0;
  double sequential_ns = 0;
  double parallel_ns = 0;
  double attention_ns = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double sequential_slope = 0;
  double parallel_slope = 0;
  double attention_slope = 0;
  bool numerics_ok = true;  // timed outputs identical to untimed outputs
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

template <typename F>
double time_kernel_ns(F&& fn, int reps) {
  fn();  // warmup, discarded
  std::vector<double> times;
  times.reserve(static_cast<size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  return median_of(std::move(times));
}

// softmax(Q K^T / sqrt(d)) V computed one query row at a time.
inline void naive_attention(const std::vector<double>& q,
                            const std::vector<double>& k,
                            const std::vector<double>& v, int L, int d,
                            std::vector<double>& out,
                            std::vector<double>& scores) {
  double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  std::fill(out.begin(), out.end(), 0.0);
  for (int i = 0; i < L; ++i) {
    const double* qi = q.data() + (long long)i * d;
    double mx = -1e300;
    for (int j = 0; j < L; ++j) {
      const double* kj = k.data() + (long long)j * d;
      double s = 0;
      for (int c = 0; c < d; ++c) s += qi[c] * kj[c];
      s *= inv_sqrt_d;
      scores[static_cast<size_t>(j)] = s;
      mx = std::max(mx, s);
    }
    double denom = 0;
    for (int j = 0; j < L; ++j) {
      double e = std::exp(scores[static_cast<size_t>(j)] - mx);
      scores[static_cast<size_t>(j)] = e;
      denom += e;
    }
    double* oi = out.data() + (long long)i * d;
    for (int j = 0; j < L; ++j) {
      double w = scores[static_cast<size_t>(j)] / denom;
      const double* vj = v.data() + (long long)j * d;
      for (int c = 0; c < d; ++c) oi[c] += w * vj[c];
    }
  }
}

inline double fit_loglog_slope(const std::vector<int>& xs,
                               const std::vector<double>& ys) {
  int n = int(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    double lx = std::log(double(xs[static_cast<size_t>(i)]));
    double ly = std::log(ys[static_cast<size_t>(i)]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace detail

inline BenchResult bench_scan(const std::vector<int>& lengths, int reps = 9,
                              int channels = 8, int state = 16,
                              int attention_dim = 4) {
  check(!lengths.empty(), "bench_scan: lengths required");
  for (size_t i = 1; i < lengths.size(); ++i)
    check(lengths[i] > lengths[i - 1], "bench_scan: lengths must be ascending");

  BenchResult res;
  Rng rng(0x9d2c5680cafef00dULL);
  auto p = SelectiveSsmParams<double>::init(channels, state, 1, rng);

  std::vector<int> ls = lengths;
  std::vector<double> seq_t, par_t, att_t;
  for (int L : ls) {
    std::vector<double> x(static_cast<size_t>(L) * channels);
    for (auto& vv : x) vv = rng.uniform(-1, 1);
    Tensor<double> xt = Tensor<double>::from({L, channels}, x);

    auto seq_ref = selective_scan_reference(x, L, channels, state, p.dt_rank,
                                            p.log_a.vals(), p.w_dt1.vals(),
                                            p.w_dt2.vals(), p.b_dt.vals(),
                                            p.w_b.vals(), p.w_c.vals());
    std::vector<double> seq_out;
    double tseq = detail::time_kernel_ns(
        [&] {
          seq_out = selective_scan_reference(
              x, L, channels, state, p.dt_rank, p.log_a.vals(), p.w_dt1.vals(),
              p.w_dt2.vals(), p.b_dt.vals(), p.w_b.vals(), p.w_c.vals());
        },
        reps);
    if (seq_out != seq_ref) res.numerics_ok = false;

    auto par_ref = parallel_scan(p, xt).vals();
    std::vector<double> par_out;
    double tpar = detail::time_kernel_ns(
        [&] { par_out = parallel_scan(p, xt).vals(); }, reps);
    if (par_out != par_ref) res.numerics_ok = false;

    int d = attention_dim;
    std::vector<double> q(static_cast<size_t>(L) * d), k(static_cast<size_t>(L) * d),
        v(static_cast<size_t>(L) * d);
    for (auto& vv : q) vv = rng.uniform(-1, 1);
    for (auto& vv : k) vv = rng.uniform(-1, 1);
    for (auto& vv : v) vv = rng.uniform(-1, 1);
    std::vector<double> att_out(static_cast<size_t>(L) * d),
        att_ref(static_cast<size_t>(L) * d), scores(static_cast<size_t>(L));
    detail::naive_attention(q, k, v, L, d, att_ref, scores);
    // the quadratic kernel gets fewer reps at large L to bound wall time
    int att_reps = L <= 4096 ? reps : (L <= 16384 ? std::min(reps, 3) : 1);
    double tatt = detail::time_kernel_ns(
        [&] { detail::naive_attention(q, k, v, L, d, att_out, scores); },
        att_reps);
    if (att_out != att_ref) res.numerics_ok = false;

    res.rows.push_back(BenchRow{L, tseq, tpar, tatt});
    seq_t.push_back(tseq);
    par_t.push_back(tpar);
    att_t.push_back(tatt);
  }
  if (ls.size() >= 2) {
    res.sequential_slope = detail::fit_loglog_slope(ls, seq_t);
    res.parallel_slope = detail::fit_loglog_slope(ls, par_t);
    res.attention_slope = detail::fit_loglog_slope(ls, att_t);
  }
  return res;
}

}  // namespace quadscan
