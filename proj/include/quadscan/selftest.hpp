#pragma once

// Compact invariant suites runnable from the CLI. Each suite re-checks the
// load-bearing invariants of one module against small independent
// computations; the permutation suite validates the shared cache so an
// injected cache fault is caught and named.

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <vector>

#include "backbone.hpp"
#include "bench.hpp"
#include "gumbel.hpp"
#include "quadtree.hpp"
#include "ssm.hpp"

namespace quadscan {

struct SuiteResult {
  std::string name;
  int passed = 0;
  int failed = 0;
};

namespace selftest_detail {

struct Checker {
  SuiteResult* r;
  void operator()(bool ok) {
    if (ok)
      ++r->passed;
    else
      ++r->failed;
  }
};

inline SuiteResult permutation_cache_suite() {
  SuiteResult r{"permutation_cache"};
  Checker ok{&r};
  std::vector<int> golden{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  ok(PermutationCache::get(4, 4, ScanKind::coarse_quad)->forward == golden);
  for (int h : {4, 8, 12, 16})
    for (int w : {4, 8, 16}) {
      for (auto kind : {ScanKind::coarse_quad, ScanKind::fine_quad}) {
        auto p = PermutationCache::get(h, w, kind);
        std::vector<int> seen(static_cast<size_t>(h) * w, 0);
        bool bij = int(p->forward.size()) == h * w;
        for (int v : p->forward)
          if (v < 0 || v >= h * w || seen[static_cast<size_t>(v)]++) bij = false;
        ok(bij);
        bool inv = true;
        for (int i = 0; i < p->length; ++i)
          if (p->inverse[static_cast<size_t>(p->forward[static_cast<size_t>(i)])] != i) inv = false;
        ok(inv);
      }
      for (int q = 0; q < 4; ++q) {
        auto c = PermutationCache::get(h, w, ScanKind::composed, q);
        bool inv = true;
        for (int i = 0; i < c->length; ++i)
          if (c->inverse[static_cast<size_t>(c->forward[static_cast<size_t>(i)])] != i) inv = false;
        ok(inv);
      }
    }
  return r;
}

inline SuiteResult ssm_suite() {
  SuiteResult r{"ssm_kernels"};
  Checker ok{&r};
  SsmContinuous<double> s;
  s.state_size = 1;
  s.log_a = {0.0};
  s.b = {1.0};
  s.c = {1.0};
  auto d = zoh_discretize(s, 0.1);
  ok(std::abs(d.a_bar[0] - std::exp(-0.1)) < 1e-12);
  ok(std::abs(d.b_bar[0] - (1.0 - std::exp(-0.1))) < 1e-12);

  Rng rng(7);
  for (int rep = 0; rep < 25; ++rep) {
    int n = 1 + rng.uniform_int(8);
    SsmContinuous<double> c;
    c.state_size = n;
    for (int i = 0; i < n; ++i) {
      c.log_a.push_back(rng.uniform(-2, 1));
      c.b.push_back(rng.uniform(-1, 1));
      c.c.push_back(rng.uniform(-1, 1));
    }
    auto dd = zoh_discretize(c, rng.uniform(0.05, 1.0));
    int L = 1 + rng.uniform_int(48);
    std::vector<double> x(static_cast<size_t>(L));
    for (auto& v : x) v = rng.uniform(-1, 1);
    auto y1 = ssm_recurrence(dd, x);
    auto y2 = causal_conv_apply(x, ssm_conv_kernel(dd, L));
    double worst = 0;
    for (int t = 0; t < L; ++t) worst = std::max(worst, std::abs(y1[t] - y2[t]));
    ok(worst <= 1e-10);
  }
  for (int L : {1, 2, 7, 64}) {
    auto p = SelectiveSsmParams<double>::init(3, 4, 0, rng);
    Tensor<double> x = Tensor<double>::zeros({L, 3});
    for (auto& v : x.param_data()) v = rng.uniform(-1, 1);
    auto ys = selective_scan(p, x);
    auto yp = parallel_scan(p, x);
    double worst = 0;
    for (long long i = 0; i < ys.size(); ++i)
      worst = std::max(worst, std::abs(ys.vals()[static_cast<size_t>(i)] -
                                       yp.vals()[static_cast<size_t>(i)]));
    ok(worst <= 1e-10);
  }
  return r;
}

inline SuiteResult sequence_masking_suite() {
  SuiteResult r{"sequence_masking"};
  Checker ok{&r};
  Rng rng(11);
  for (int q = 0; q < 4; ++q) {
    Tensor<double> scores = Tensor<double>::zeros({2, 2});
    scores.param_data()[static_cast<size_t>(q)] = 1.0;
    auto m = make_quadrant_mask(scores, 1.0, MaskMode::eval_argmax,
                                std::vector<double>(4, 0.0), 8, 8);
    ok(m.quadrant == q);
    Tensor<double> x = Tensor<double>::zeros({8, 8, 2});
    for (auto& v : x.param_data()) v = rng.uniform(-1, 1);
    auto seq = build_sequence(x, m);
    auto back = restore_sequence(seq, m);
    ok(back.vals() == x.vals());
    std::vector<double> a = x.vals(), b = seq.tokens.vals();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    ok(a == b);
  }
  // straight-through gradient equals the soft Jacobian-vector product
  for (int rep = 0; rep < 10; ++rep) {
    Tensor<double> logits = Tensor<double>::zeros({4});
    for (auto& v : logits.param_data()) v = rng.uniform(-2, 2);
    logits.set_needs_grad();
    std::vector<double> noise(4);
    for (auto& n : noise) n = rng.gumbel();
    Tensor<double> v = Tensor<double>::zeros({4});
    for (auto& vv : v.param_data()) vv = rng.uniform(-1, 1);
    logits.zero_grad();
    {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      backward(sum_all(mul(gumbel_softmax_hard(logits, 1.0, noise), v)));
    }
    std::vector<double> z(4), soft(4);
    double mx = -1e300, denom = 0, dot = 0;
    for (int i = 0; i < 4; ++i) {
      z[static_cast<size_t>(i)] = logits.vals()[static_cast<size_t>(i)] + noise[static_cast<size_t>(i)];
      mx = std::max(mx, z[static_cast<size_t>(i)]);
    }
    for (int i = 0; i < 4; ++i) {
      soft[static_cast<size_t>(i)] = std::exp(z[static_cast<size_t>(i)] - mx);
      denom += soft[static_cast<size_t>(i)];
    }
    for (int i = 0; i < 4; ++i) soft[static_cast<size_t>(i)] /= denom;
    for (int i = 0; i < 4; ++i) dot += soft[static_cast<size_t>(i)] * v.vals()[static_cast<size_t>(i)];
    double worst = 0;
    for (int i = 0; i < 4; ++i)
      worst = std::max(worst, std::abs(logits.grad()[static_cast<size_t>(i)] -
                                       soft[static_cast<size_t>(i)] *
                                           (v.vals()[static_cast<size_t>(i)] - dot)));
    ok(worst <= 1e-6);
  }
  return r;
}

inline SuiteResult gradient_suite() {
  SuiteResult r{"gradients"};
  Checker ok{&r};
  Rng rng(13);
  // central-difference spot checks on a few primitives
  auto fd_scalar = [&](std::function<Tensor<double>(Tensor<double>&)> f,
                       double lo, double hi) {
    Tensor<double> x = Tensor<double>::zeros({4, 4});
    for (auto& v : x.param_data()) v = rng.uniform(lo, hi);
    x.set_needs_grad();
    x.zero_grad();
    {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      backward(f(x));
    }
    double worst = 0;
    for (int i = 0; i < 16; ++i) {
      double orig = x.param_data()[static_cast<size_t>(i)];
      x.param_data()[static_cast<size_t>(i)] = orig + 1e-5;
      double fp = f(x).item();
      x.param_data()[static_cast<size_t>(i)] = orig - 1e-5;
      double fm = f(x).item();
      x.param_data()[static_cast<size_t>(i)] = orig;
      double num = (fp - fm) / 2e-5;
      double ana = x.grad()[static_cast<size_t>(i)];
      worst = std::max(worst, std::abs(ana - num) /
                                  std::max({1.0, std::abs(ana), std::abs(num)}));
    }
    return worst;
  };
  ok(fd_scalar([](Tensor<double>& x) { return sum_all(gelu(x)); }, -2, 2) <= 1e-6);
  ok(fd_scalar([](Tensor<double>& x) { return sum_all(mul(softmax(x, -1), x)); },
               -2, 2) <= 1e-6);
  ok(fd_scalar([](Tensor<double>& x) { return sum_all(mul(x, mul(x, x))); }, -1,
               1) <= 1e-6);
  return r;
}

inline SuiteResult determinism_suite() {
  SuiteResult r{"determinism"};
  Checker ok{&r};
  VariantConfig cfg = VariantConfig::micro();
  cfg.seed = 123;
  Model<float> m = build_variant<float>(cfg);
  Tensor<float> img = Tensor<float>::zeros({32, 32, 3});
  Rng rng(5);
  for (auto& v : img.param_data()) v = float(rng.uniform(-1, 1));
  auto l1 = forward_classify(m, img, RunMode::eval, nullptr);
  auto l2 = forward_classify(m, img, RunMode::eval, nullptr);
  ok(l1.vals() == l2.vals());
  Model<float> m2 = build_variant<float>(cfg);
  auto l3 = forward_classify(m2, img, RunMode::eval, nullptr);
  ok(l1.vals() == l3.vals());
  ok(l1.all_finite());
  return r;
}

}  // namespace selftest_detail

// Runs every suite, prints per-suite pass counts, returns a process exit
// code (0 iff everything passed). `inject_perm_fault` corrupts one cached
// permutation first, exercising the failure path.
inline int run_selftest(std::ostream& os, bool inject_perm_fault = false) {
  PermutationCache::debug_clear();
  if (inject_perm_fault) {
    PermutationCache::get(8, 8, ScanKind::coarse_quad);
    PermutationCache::debug_corrupt(8, 8, ScanKind::coarse_quad);
  }
  std::vector<SuiteResult> results;
  results.push_back(selftest_detail::permutation_cache_suite());
  results.push_back(selftest_detail::ssm_suite());
  results.push_back(selftest_detail::sequence_masking_suite());
  results.push_back(selftest_detail::gradient_suite());
  results.push_back(selftest_detail::determinism_suite());
  int rc = 0;
  for (const auto& r : results) {
    os << "suite " << r.name << ": " << r.passed << " passed, " << r.failed
       << " failed\n";
    if (r.failed > 0) {
      os << "FAILING SUITE: " << r.name << "\n";
      rc = 1;
    }
  }
  os << (rc == 0 ? "selftest: OK" : "selftest: FAILED") << "\n";
  if (inject_perm_fault) PermutationCache::debug_clear();
  return rc;
}

}  // namespace quadscan
