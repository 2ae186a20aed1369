#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "quadscan/bench.hpp"
#include "quadscan/checkpoint.hpp"
#include "quadscan/selftest.hpp"
#include "quadscan/train.hpp"

using namespace quadscan;

TEST(Synthetic, DeterministicGivenSeed) {
  auto a = gen_synthetic(16, 99);
  auto b = gen_synthetic(16, 99);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].informative_quadrant, b[i].informative_quadrant);
    EXPECT_EQ(a[i].image.vals(), b[i].image.vals());  // bitwise
  }
  auto c = gen_synthetic(16, 100);
  bool any_differs = false;
  for (size_t i = 0; i < a.size(); ++i)
    if (c[i].image.vals() != a[i].image.vals()) any_differs = true;
  EXPECT_TRUE(any_differs);
  EXPECT_THROW(gen_synthetic(0, 1), std::runtime_error);
}

TEST(Synthetic, LabelsAndQuadrantFrequencies) {
  auto data = gen_synthetic(4000, 7);
  int label_count[4] = {}, quad_count[4] = {};
  for (const auto& s : data) {
    ASSERT_GE(s.label, 0);
    ASSERT_LT(s.label, 4);
    ASSERT_GE(s.informative_quadrant, 0);
    ASSERT_LT(s.informative_quadrant, 4);
    label_count[s.label]++;
    quad_count[s.informative_quadrant]++;
  }
  for (int k = 0; k < 4; ++k) {
    EXPECT_GE(quad_count[k] / 4000.0, 0.22);
    EXPECT_LE(quad_count[k] / 4000.0, 0.28);
    EXPECT_GE(label_count[k] / 4000.0, 0.22);
    EXPECT_LE(label_count[k] / 4000.0, 0.28);
  }
}

TEST(Synthetic, PatternConfinedToInformativeQuadrant) {
  auto data = gen_synthetic(64, 11);
  // the pattern adds +-amp, so per-pixel variance in the informative
  // quadrant is noise^2 + amp^2; elsewhere it is noise^2
  double var_in = 0, var_out = 0;
  long long n_in = 0, n_out = 0;
  for (const auto& s : data) {
    int qi = s.informative_quadrant / 2, qj = s.informative_quadrant % 2;
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j) {
        double v = s.image.vals()[static_cast<size_t>((i * 32 + j) * 3)];
        bool inside = (i / 16 == qi) && (j / 16 == qj);
        if (inside) {
          var_in += v * v;
          ++n_in;
        } else {
          var_out += v * v;
          ++n_out;
        }
      }
  }
  var_in /= double(n_in);
  var_out /= double(n_out);
  double noise2 = kSyntheticNoiseStd * kSyntheticNoiseStd;
  double amp2 = kSyntheticAmplitude * kSyntheticAmplitude;
  EXPECT_NEAR(var_out, noise2, 0.08);
  EXPECT_NEAR(var_in, noise2 + amp2, 0.12);
}

TEST(Train, ZeroLearningRateKeepsLossExactlyConstant) {
  VariantConfig cfg = VariantConfig::micro();
  cfg.seed = 3;
  cfg.drop_path_rate = 0.0;
  Model<float> m = build_variant<float>(cfg);
  auto data = gen_synthetic(1, 5);  // a single sample: identical batches
  TrainOptions opt;
  opt.steps = 6;
  opt.batch = 4;
  opt.lr = 0.0;
  opt.deterministic_forward = true;
  TrainReport rep = train(m, opt, data, data, 3);
  ASSERT_EQ(rep.step_losses.size(), 6u);
  for (double l : rep.step_losses) EXPECT_EQ(l, rep.step_losses[0]);
}

TEST(Train, ShortRunIsDeterministicAndFinite) {
  auto run = [] {
    VariantConfig cfg = VariantConfig::micro();
    cfg.seed = 21;
    Model<float> m = build_variant<float>(cfg);
    auto train_set = gen_synthetic(64, train_data_seed(21));
    auto eval_set = gen_synthetic(16, eval_data_seed(21));
    TrainOptions opt;
    opt.steps = 8;
    opt.batch = 8;
    TrainReport rep = train(m, opt, train_set, eval_set, 21);
    return std::make_pair(rep.step_losses, m);
  };
  auto [losses1, m1] = run();
  auto [losses2, m2] = run();
  EXPECT_EQ(losses1, losses2);  // bitwise-identical loss trajectory
  auto p1 = m1.named_parameters(), p2 = m2.named_parameters();
  for (size_t i = 0; i < p1.size(); ++i)
    EXPECT_EQ(p1[i].second->vals(), p2[i].second->vals()) << p1[i].first;
  for (double l : losses1) EXPECT_TRUE(std::isfinite(l));
}

TEST(Train, SgdOptimizerRunsAndRejectsUnknown) {
  VariantConfig cfg = VariantConfig::micro();
  cfg.seed = 22;
  Model<float> m = build_variant<float>(cfg);
  auto data = gen_synthetic(32, 9);
  TrainOptions opt;
  opt.steps = 3;
  opt.batch = 4;
  opt.optimizer = "sgd";
  opt.lr = 1e-3;
  TrainReport rep = train(m, opt, data, data, 22);
  EXPECT_EQ(rep.step_losses.size(), 3u);

  opt.optimizer = "adagrad";
  EXPECT_THROW(train(m, opt, data, data, 22), std::runtime_error);
}

TEST(Evaluate, AgreementCountsFirstQuadBlock) {
  VariantConfig cfg = VariantConfig::micro();
  cfg.seed = 30;
  Model<float> m = build_variant<float>(cfg);
  auto eval_set = gen_synthetic(8, 31);
  EvalResult r = evaluate(m, eval_set);
  EXPECT_EQ(r.first_block_quadrants.size(), eval_set.size());
  for (int q : r.first_block_quadrants) {
    EXPECT_GE(q, 0);
    EXPECT_LT(q, 4);
  }
  EXPECT_GE(r.agreement, 0.0);
  EXPECT_LE(r.agreement, 1.0);
}

TEST(Pgm, RoundTrip) {
  std::vector<unsigned char> px(6 * 4);
  for (size_t i = 0; i < px.size(); ++i) px[i] = (unsigned char)(i * 10);
  std::string path = testing::TempDir() + "/t.pgm";
  save_pgm(path, px, 6, 4);
  int w = 0, h = 0;
  auto back = load_pgm(path, w, h);
  EXPECT_EQ(w, 6);
  EXPECT_EQ(h, 4);
  EXPECT_EQ(back, px);
}

TEST(Bench, SmallLengthsSanity) {
  BenchResult res = bench_scan({64, 256}, 3);
  ASSERT_EQ(res.rows.size(), 2u);
  for (const auto& r : res.rows) {
    EXPECT_GT(r.sequential_ns, 0.0);
    EXPECT_GT(r.parallel_ns, 0.0);
    EXPECT_GT(r.attention_ns, 0.0);
  }
  EXPECT_TRUE(res.numerics_ok);
  EXPECT_THROW(bench_scan({256, 64}), std::runtime_error);
}

TEST(Selftest, PassesCleanAndFlagsInjectedFault) {
  std::ostringstream out;
  EXPECT_EQ(run_selftest(out, false), 0);
  EXPECT_NE(out.str().find("selftest: OK"), std::string::npos);

  std::ostringstream out2;
  EXPECT_NE(run_selftest(out2, true), 0);
  EXPECT_NE(out2.str().find("FAILING SUITE: permutation_cache"),
            std::string::npos);
}

TEST(Checkpoint, CorruptFileRejected) {
  std::string path = testing::TempDir() + "/bad.qckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "definitely not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  EXPECT_THROW(load_checkpoint(testing::TempDir() + "/missing.qckpt"),
               std::runtime_error);
}

TEST(ExportData, DecisionRecordsMatchBlockGeometry) {
  VariantConfig cfg = VariantConfig::micro();
  cfg.seed = 33;
  Model<float> m = build_variant<float>(cfg);
  Rng rng(34);
  Tensor<float> img = Tensor<float>::zeros({32, 32, 3});
  for (auto& v : img.param_data()) v = float(rng.uniform(-1, 1));
  std::vector<QuadDecision<float>> decisions;
  forward_classify(m, img, RunMode::eval, nullptr, &decisions);
  ASSERT_EQ(decisions.size(), 1u);  // micro: one QuadVSS block (stage 1)
  EXPECT_EQ(decisions[0].height, 8);
  EXPECT_EQ(decisions[0].width, 8);
  EXPECT_EQ(decisions[0].score_map.size(), 64u);
  EXPECT_GE(decisions[0].quadrant, 0);
  EXPECT_LT(decisions[0].quadrant, 4);
  for (float s : decisions[0].score_map) {
    EXPECT_GE(s, 0.0f);
    EXPECT_LE(s, 1.0f);
  }
  // deterministic export: same input, same decisions
  std::vector<QuadDecision<float>> d2;
  forward_classify(m, img, RunMode::eval, nullptr, &d2);
  EXPECT_EQ(d2[0].quadrant, decisions[0].quadrant);
  EXPECT_EQ(d2[0].score_map, decisions[0].score_map);
}
