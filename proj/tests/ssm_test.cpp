#include <gtest/gtest.h>

#include "oracles.hpp"
#include "quadscan/ssm.hpp"

using namespace quadscan;

namespace {

SsmContinuous<double> random_ssm(int n, Rng& rng) {
  SsmContinuous<double> s;
  s.state_size = n;
  s.log_a.resize(n);
  s.b.resize(n);
  s.c.resize(n);
  for (int i = 0; i < n; ++i) {
    s.log_a[i] = rng.uniform(-2, 1);  // A in [-e, -e^-2]
    s.b[i] = rng.uniform(-1, 1);
    s.c[i] = rng.uniform(-1, 1);
  }
  return s;
}

SelectiveSsmParams<double> random_selective(int d, int n, Rng& rng) {
  return SelectiveSsmParams<double>::init(d, n, 0, rng);
}

Tensor<double> rand_tensor(const Shape& shape, Rng& rng, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  for (auto& v : t.param_data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> run_reference(const SelectiveSsmParams<double>& p,
                                  const Tensor<double>& x) {
  return selective_scan_reference(x.vals(), x.dim(0), p.channels, p.state_size,
                                  p.dt_rank, p.log_a.vals(), p.w_dt1.vals(),
                                  p.w_dt2.vals(), p.b_dt.vals(), p.w_b.vals(),
                                  p.w_c.vals());
}

}  // namespace

TEST(ZohDiscretize, ScalarClosedForm) {
  SsmContinuous<double> s;
  s.state_size = 1;
  s.log_a = {0.0};  // A = -1
  s.b = {1.0};
  s.c = {1.0};
  auto d = zoh_discretize(s, 0.1);
  EXPECT_NEAR(d.a_bar[0], std::exp(-0.1), 1e-12);
  EXPECT_NEAR(d.a_bar[0], 0.904837, 1e-6);
  // (A_bar - 1)/A * B with A = -1: 1 - e^-0.1
  EXPECT_NEAR(d.b_bar[0], 1.0 - std::exp(-0.1), 1e-12);
  EXPECT_NEAR(d.b_bar[0], 0.095163, 1e-6);
}

TEST(ZohDiscretize, SeriesLimitForVanishingA) {
  SsmContinuous<double> s;
  s.state_size = 1;
  s.log_a = {-25.0};  // A ~ -1.4e-11, |delta*A| < 1e-8 guard triggers
  s.b = {1.0};
  s.c = {1.0};
  auto d = zoh_discretize(s, 0.1);
  EXPECT_DOUBLE_EQ(d.b_bar[0], 0.1);
}

TEST(ZohDiscretize, VanishingDeltaLimits) {
  SsmContinuous<double> s;
  s.state_size = 1;
  s.log_a = {0.5};
  s.b = {2.0};
  s.c = {1.0};
  auto d = zoh_discretize(s, 1e-12);
  EXPECT_NEAR(d.a_bar[0], 1.0, 1e-9);
  EXPECT_NEAR(d.b_bar[0], 0.0, 1e-9);
  EXPECT_THROW(zoh_discretize(s, 0.0), std::runtime_error);
  EXPECT_THROW(zoh_discretize(s, -0.1), std::runtime_error);
}

TEST(ZohDiscretize, StableSystemsContract) {
  Rng rng(31);
  for (int rep = 0; rep < 50; ++rep) {
    auto s = random_ssm(8, rng);
    auto d = zoh_discretize(s, rng.uniform(0.01, 2.0));
    for (double a : d.a_bar) EXPECT_LT(std::abs(a), 1.0);
    for (double a : s.a_diag()) EXPECT_LT(a, 0.0);
  }
}

TEST(Recurrence, HandOracle) {
  SsmDiscrete<double> p{{0.5}, {1.0}, {1.0}, 0.1};
  auto y = ssm_recurrence(p, {1, 1, 1});
  ASSERT_EQ(y.size(), 3u);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.5);
  EXPECT_DOUBLE_EQ(y[2], 1.75);
}

TEST(Recurrence, MemorylessAndZeroInput) {
  SsmDiscrete<double> p{{0.0}, {2.0}, {3.0}, 0.1};
  auto y = ssm_recurrence(p, {1, -2, 0.5});
  EXPECT_DOUBLE_EQ(y[0], 6.0);
  EXPECT_DOUBLE_EQ(y[1], -12.0);
  EXPECT_DOUBLE_EQ(y[2], 3.0);

  SsmDiscrete<double> q{{0.5, 0.25}, {1.0, 1.0}, {1.0, -1.0}, 0.1};
  auto z = ssm_recurrence(q, {0, 0, 0, 0});
  for (double v : z) EXPECT_DOUBLE_EQ(v, 0.0);

  auto e = ssm_recurrence(q, {});
  EXPECT_TRUE(e.empty());
}

TEST(ConvKernel, PowerSeriesOracle) {
  SsmDiscrete<double> p{{0.5}, {1.0}, {1.0}, 0.1};
  auto k = ssm_conv_kernel(p, 3);
  EXPECT_DOUBLE_EQ(k[0], 1.0);
  EXPECT_DOUBLE_EQ(k[1], 0.5);
  EXPECT_DOUBLE_EQ(k[2], 0.25);
  auto k1 = ssm_conv_kernel(p, 1);
  ASSERT_EQ(k1.size(), 1u);
  EXPECT_DOUBLE_EQ(k1[0], 1.0);  // C * B_bar
}

TEST(ConvKernel, ConvolutionEqualsRecurrence) {
  SsmDiscrete<double> p{{0.5}, {1.0}, {1.0}, 0.1};
  auto y = causal_conv_apply<double>({1, 1, 1}, ssm_conv_kernel(p, 3));
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.5);
  EXPECT_DOUBLE_EQ(y[2], 1.75);
}

// Eq-2-vs-Eq-3 route equivalence on random stable systems, 64-bit.
TEST(ConvKernel, KernelFormEquivalenceRandom) {
  Rng rng(32);
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    int n = 1 + rng.uniform_int(16);
    int L = 1 + rng.uniform_int(64);
    auto d = zoh_discretize(random_ssm(n, rng), rng.uniform(0.05, 1.0));
    std::vector<double> x(static_cast<size_t>(L));
    for (auto& v : x) v = rng.uniform(-1, 1);
    auto y1 = ssm_recurrence(d, x);
    auto y2 = causal_conv_apply(x, ssm_conv_kernel(d, L));
    for (int t = 0; t < L; ++t) worst = std::max(worst, std::abs(y1[t] - y2[t]));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(SelectiveScan, ConstantInputReducesToTimeInvariantRecurrence) {
  Rng rng(33);
  auto p = random_selective(3, 4, rng);
  int L = 6;
  Tensor<double> x = Tensor<double>::zeros({L, 3});
  std::vector<double> token{0.4, -0.7, 1.1};
  for (int t = 0; t < L; ++t)
    for (int d = 0; d < 3; ++d) x.param_data()[t * 3 + d] = token[d];
  auto y = selective_scan(p, x);

  // constant tokens make delta/B/C constant; per channel this is the
  // time-invariant recurrence with those constants
  for (int d = 0; d < 3; ++d) {
    double dpre = p.b_dt.vals()[d];
    for (int r = 0; r < p.dt_rank; ++r) {
      double h = 0;
      for (int dd = 0; dd < 3; ++dd)
        h += token[dd] * p.w_dt1.vals()[dd * p.dt_rank + r];
      dpre += h * p.w_dt2.vals()[r * 3 + d];
    }
    double delta = std::log1p(std::exp(dpre));
    SsmDiscrete<double> ti;
    ti.delta = delta;
    for (int n = 0; n < 4; ++n) {
      double bn = 0, cn = 0;
      for (int dd = 0; dd < 3; ++dd) {
        bn += token[dd] * p.w_b.vals()[dd * 4 + n];
        cn += token[dd] * p.w_c.vals()[dd * 4 + n];
      }
      double a = -std::exp(p.log_a.vals()[d * 4 + n]);
      ti.a_bar.push_back(std::exp(delta * a));
      ti.b_bar.push_back(zoh_input_coeff(a, delta) * bn);
      ti.c.push_back(cn);
    }
    std::vector<double> xc(static_cast<size_t>(L), token[d]);
    auto yd = ssm_recurrence(ti, xc);
    for (int t = 0; t < L; ++t)
      EXPECT_NEAR(y.vals()[t * 3 + d], yd[t], 1e-12);
  }
}

TEST(SelectiveScan, LengthOneClosedForm) {
  Rng rng(34);
  auto p = random_selective(2, 3, rng);
  Tensor<double> x = rand_tensor({1, 2}, rng);
  auto y = selective_scan(p, x);
  auto ref = run_reference(p, x);
  EXPECT_NEAR(y.vals()[0], ref[0], 1e-14);
  EXPECT_NEAR(y.vals()[1], ref[1], 1e-14);
  // y_1 = C_1 . (B_bar_1 x_1) per channel, hand-composed
  for (int d = 0; d < 2; ++d) {
    double dpre = p.b_dt.vals()[d];
    for (int r = 0; r < p.dt_rank; ++r) {
      double h = 0;
      for (int dd = 0; dd < 2; ++dd)
        h += x.vals()[dd] * p.w_dt1.vals()[dd * p.dt_rank + r];
      dpre += h * p.w_dt2.vals()[r * 2 + d];
    }
    double delta = std::log1p(std::exp(dpre));
    double acc = 0;
    for (int n = 0; n < 3; ++n) {
      double bn = 0, cn = 0;
      for (int dd = 0; dd < 2; ++dd) {
        bn += x.vals()[dd] * p.w_b.vals()[dd * 3 + n];
        cn += x.vals()[dd] * p.w_c.vals()[dd * 3 + n];
      }
      double a = -std::exp(p.log_a.vals()[d * 3 + n]);
      acc += cn * zoh_input_coeff(a, delta) * bn * x.vals()[d];
    }
    EXPECT_NEAR(y.vals()[d], acc, 1e-12);
  }
}

TEST(SelectiveScan, Float32MatchesFloat64Oracle) {
  Rng rng(35);
  auto pd = random_selective(4, 8, rng);
  SelectiveSsmParams<float> pf;
  pf.channels = 4;
  pf.state_size = 8;
  pf.dt_rank = pd.dt_rank;
  auto to_f = [](const Tensor<double>& t) {
    Tensor<float> out = Tensor<float>::zeros(t.shape());
    for (long long i = 0; i < t.size(); ++i)
      out.param_data()[static_cast<size_t>(i)] =
          float(t.vals()[static_cast<size_t>(i)]);
    return out;
  };
  pf.log_a = to_f(pd.log_a);
  pf.w_dt1 = to_f(pd.w_dt1);
  pf.w_dt2 = to_f(pd.w_dt2);
  pf.b_dt = to_f(pd.b_dt);
  pf.w_b = to_f(pd.w_b);
  pf.w_c = to_f(pd.w_c);

  Tensor<double> xd = rand_tensor({16, 4}, rng);
  Tensor<float> xf = to_f(xd);
  auto yf = selective_scan(pf, xf);
  auto ref = run_reference(pd, xd);
  for (int i = 0; i < 64; ++i) EXPECT_NEAR(double(yf.vals()[i]), ref[i], 1e-5);
}

TEST(SelectiveScan, Causality) {
  Rng rng(36);
  auto p = random_selective(3, 5, rng);
  Tensor<double> x = rand_tensor({12, 3}, rng);
  auto y1 = selective_scan(p, x);
  Tensor<double> x2 = Tensor<double>::from(x.shape(), x.vals());
  int t0 = 7;
  for (int d = 0; d < 3; ++d) x2.param_data()[t0 * 3 + d] += rng.uniform(0.5, 1.0);
  auto y2 = selective_scan(p, x2);
  for (int t = 0; t < t0; ++t)
    for (int d = 0; d < 3; ++d)
      EXPECT_EQ(y1.vals()[t * 3 + d], y2.vals()[t * 3 + d]);  // exact
  double diff = 0;
  for (int d = 0; d < 3; ++d)
    diff += std::abs(y1.vals()[t0 * 3 + d] - y2.vals()[t0 * 3 + d]);
  EXPECT_GT(diff, 0.0);
}

TEST(Recurrence, LinearityOfFixedParameterPath) {
  Rng rng(37);
  auto d = zoh_discretize(random_ssm(6, rng), 0.3);
  int L = 20;
  std::vector<double> x1(static_cast<size_t>(L)), x2(static_cast<size_t>(L)),
      mix(static_cast<size_t>(L));
  double alpha = 1.7, beta = -0.6;
  for (int t = 0; t < L; ++t) {
    x1[t] = rng.uniform(-1, 1);
    x2[t] = rng.uniform(-1, 1);
    mix[t] = alpha * x1[t] + beta * x2[t];
  }
  auto y1 = ssm_recurrence(d, x1), y2 = ssm_recurrence(d, x2),
       ym = ssm_recurrence(d, mix);
  for (int t = 0; t < L; ++t)
    EXPECT_NEAR(ym[t], alpha * y1[t] + beta * y2[t], 1e-6);
}

TEST(Recurrence, StabilityBound) {
  Rng rng(38);
  for (int rep = 0; rep < 20; ++rep) {
    auto d = zoh_discretize(random_ssm(8, rng), rng.uniform(0.05, 1.0));
    double bmax = 0, amax = 0;
    for (double v : d.b_bar) bmax = std::max(bmax, std::abs(v));
    for (double v : d.a_bar) amax = std::max(amax, std::abs(v));
    int L = 200;
    std::vector<double> h(8, 0.0);
    double xmax = 1.0, hbound = bmax * xmax / (1.0 - amax);
    for (int t = 0; t < L; ++t) {
      double x = rng.uniform(-1, 1);
      for (int n = 0; n < 8; ++n) {
        h[n] = d.a_bar[n] * h[n] + d.b_bar[n] * x;
        EXPECT_LE(std::abs(h[n]), hbound + 1e-12);
      }
    }
  }
}

TEST(SelectiveScan, SoftplusDeltaPositive) {
  Rng rng(39);
  auto p = random_selective(4, 4, rng);
  Tensor<double> x = rand_tensor({8, 4}, rng, -20, 20);
  for (int t = 0; t < 8; ++t)
    for (int d = 0; d < 4; ++d) {
      double dpre = p.b_dt.vals()[d];
      for (int r = 0; r < p.dt_rank; ++r) {
        double h = 0;
        for (int dd = 0; dd < 4; ++dd)
          h += x.vals()[t * 4 + dd] * p.w_dt1.vals()[dd * p.dt_rank + r];
        dpre += h * p.w_dt2.vals()[r * 4 + d];
      }
      EXPECT_GT(softplus_scalar(dpre), 0.0);
    }
}

TEST(ParallelScan, CombineIsAssociative) {
  Rng rng(40);
  double worst = 0;
  for (int rep = 0; rep < 200; ++rep) {
    ScanPair<double> a{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    ScanPair<double> b{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    ScanPair<double> c{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    auto left = scan_combine(scan_combine(c, b), a);
    auto right = scan_combine(c, scan_combine(b, a));
    worst = std::max(worst, std::abs(left.a - right.a));
    worst = std::max(worst, std::abs(left.b - right.b));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(ParallelScan, MatchesSequentialAcrossLengths) {
  Rng rng(41);
  for (int L : {1, 2, 7, 64, 1000}) {
    auto p = random_selective(3, 4, rng);
    Tensor<double> x = rand_tensor({L, 3}, rng);
    auto ys = selective_scan(p, x);
    auto yp = parallel_scan(p, x);
    double worst = 0;
    for (long long i = 0; i < ys.size(); ++i)
      worst = std::max(worst, std::abs(ys.vals()[static_cast<size_t>(i)] -
                                       yp.vals()[static_cast<size_t>(i)]));
    EXPECT_LE(worst, 1e-10) << "L=" << L;
  }
}

TEST(ParallelScan, ThreadedLanesMatchSingleThread) {
  Rng rng(42);
  auto p = random_selective(6, 4, rng);
  Tensor<double> x = rand_tensor({40, 6}, rng);
  auto y1 = parallel_scan(p, x, 1);
  auto y2 = parallel_scan(p, x, 3);
  EXPECT_EQ(y1.vals(), y2.vals());
}

TEST(SelectiveScan, GradientsPassFiniteDifferences) {
  Rng rng(43);
  auto p = random_selective(3, 4, rng);
  Tensor<double> x = rand_tensor({5, 3}, rng).set_needs_grad();
  Tensor<double> w = rand_tensor({5, 3}, rng);
  std::vector<Tensor<double>*> params{&x,      &p.log_a, &p.w_dt1, &p.w_dt2,
                                      &p.b_dt, &p.w_b,   &p.w_c};
  auto res = oracle::fd_check(
      params, [&] { return sum_all(mul(selective_scan(p, x), w)); }, 1e-5);
  EXPECT_LE(res.max_rel_err, 1e-6);
}

TEST(SelectiveScan, EmptySequence) {
  Rng rng(44);
  auto p = random_selective(3, 4, rng);
  Tensor<double> x = Tensor<double>::zeros({0, 3});
  auto y = selective_scan(p, x);
  EXPECT_EQ(y.size(), 0);
}
