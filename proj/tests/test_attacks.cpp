#include <gtest/gtest.h>

#include "corrobust/attacks.hpp"
#include "test_util.hpp"

using namespace corrobust;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.input_shape = {3, 8, 8};
  s.widths = {4, 8};
  s.blocks_per_stage = 1;
  s.num_classes = 3;
  return s;
}

TensorF random_labels(int64_t n, int64_t k, Rng& rng) {
  TensorF y({n});
  for (int64_t i = 0; i < n; ++i) y[i] = static_cast<float>(rng.uniform_int(k));
  return y;
}

TEST(Project, InsideBallAndBoxUnchanged) {
  TensorF x({2}, {0.5f, 0.5f});
  TensorF d({2}, {0.05f, -0.02f});
  auto out = project(d, x, ThreatModel(NormP::kL2, 0.1));
  EXPECT_TRUE(bit_equal(out, d));
  out = project(d, x, ThreatModel(NormP::kLinf, 0.06));
  EXPECT_TRUE(bit_equal(out, d));
}

TEST(Project, LinfClampsCoordinates) {
  TensorF x({2}, {0.5f, 0.5f});
  TensorF d({2}, {0.2f, -0.05f});
  auto out = project(d, x, ThreatModel(NormP::kLinf, 0.1));
  EXPECT_FLOAT_EQ(out[0], 0.1f);
  EXPECT_FLOAT_EQ(out[1], -0.05f);
}

TEST(Project, L2ScalesRadially) {
  TensorF x({2}, {0.1f, 0.1f});
  TensorF d({2}, {3.0f, 4.0f});
  auto out = project(d, x, ThreatModel(NormP::kL2, 1.0));
  EXPECT_NEAR(out[0], 0.6f, 1e-6);
  EXPECT_NEAR(out[1], 0.8f, 1e-6);
}

TEST(Project, BoxKeepsPixelsInRange) {
  TensorF x({3}, {0.95f, 0.02f, 0.5f});
  TensorF d({3}, {0.2f, -0.2f, 0.1f});
  auto out = project(d, x, ThreatModel(NormP::kLinf, 0.3));
  EXPECT_NEAR(out[0], 0.05f, 1e-6);   // clipped at 1
  EXPECT_NEAR(out[1], -0.02f, 1e-6);  // clipped at 0
  EXPECT_NEAR(out[2], 0.1f, 1e-6);
}

// Idempotence and feasibility over random batches; exact up to float
// rounding of the radial rescale and box arithmetic.
TEST(Project, IdempotentAndFeasibleProperty) {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    const ThreatModel tm(trial % 2 ? NormP::kL2 : NormP::kLinf, rng.uniform(0.01, 0.5));
    auto x = testutil::random_tensor<float>({4, 12}, rng, 0, 1);
    auto d = testutil::random_tensor<float>({4, 12}, rng, -2, 2);
    auto p1 = project(d, x, tm);
    auto p2 = project(p1, x, tm);
    EXPECT_TRUE(bit_equal(p1, p2));
    for (int64_t r = 0; r < 4; ++r) {
      double norm2 = 0, norm_inf = 0;
      for (int64_t i = 0; i < 12; ++i) {
        const double v = p1.at2(r, i);
        norm2 += v * v;
        norm_inf = std::max(norm_inf, std::abs(v));
        const double pix = x.at2(r, i) + v;
        EXPECT_GE(pix, -1e-6);
        EXPECT_LE(pix, 1.0 + 1e-6);
      }
      if (tm.p == NormP::kL2) {
        EXPECT_LE(std::sqrt(norm2), tm.eps * (1 + 1e-6));
      } else {
        EXPECT_LE(norm_inf, tm.eps * (1 + 1e-6));
      }
    }
  }
}

LossGradFn<float> fixed_gradient(TensorF g) {
  return [g](const TensorF&) { return LossGrad<float>{0.0, g}; };
}

TEST(Fgm, ZeroEpsGivesZeroDelta) {
  TensorF x({2}, {0.3f, 0.4f});
  auto d = fgm<float>(fixed_gradient(TensorF({2}, {1.0f, 2.0f})), x, 0.0);
  EXPECT_EQ(l2_norm(d), 0.0);
}

TEST(Fgm, NormalizesGradientDirection) {
  TensorF x({2}, {0.1f, 0.1f});
  auto d = fgm<float>(fixed_gradient(TensorF({2}, {3.0f, 4.0f})), x, 1.0);
  EXPECT_NEAR(d[0], 0.6f, 1e-6);
  EXPECT_NEAR(d[1], 0.8f, 1e-6);
}

TEST(Fgm, ZeroGradientGivesZeroDelta) {
  TensorF x({2}, {0.5f, 0.5f});
  auto d = fgm<float>(fixed_gradient(TensorF({2})), x, 0.5);
  EXPECT_EQ(l2_norm(d), 0.0);
}

// Quadratic loss 0.5*||x||^2 through the real graph path; the analytic
// gradient at x is x itself.
TEST(Fgm, QuadraticLossAnalyticOracle) {
  Graph<float> g;
  const int x = g.input("x", {-1});
  g.tap(x, "x");
  g.set_loss(g.half_squared_norm(x));
  Workspace<float> ws(g);
  LossGradFn<float> f = [&](const TensorF& xx) {
    ws.bind("x", xx);
    ws.forward();
    ws.backward();
    return LossGrad<float>{ws.loss(), ws.grad("x")};
  };
  // gradient (0.5, 0): normalized (1, 0), delta = (0.5, 0); box inactive
  auto d = fgm<float>(f, TensorF({2}, {0.5f, 0.0f}), 0.5);
  EXPECT_NEAR(d[0], 0.5f, 1e-6);
  EXPECT_NEAR(d[1], 0.0f, 1e-6);
  // at the box boundary the same step is clipped away
  auto d2 = fgm<float>(f, TensorF({2}, {1.0f, 0.0f}), 0.5);
  EXPECT_NEAR(d2[0], 0.0f, 1e-6);
}

TEST(Fgsm, SignUpdateWithZeroConvention) {
  TensorF x({2}, {0.5f, 0.5f});
  const float e = 1.0f / 255.0f;
  auto d = fgsm<float>(fixed_gradient(TensorF({2}, {3.0f, -4.0f})), x, e);
  EXPECT_FLOAT_EQ(d[0], e);
  EXPECT_FLOAT_EQ(d[1], -e);
  auto d2 = fgsm<float>(fixed_gradient(TensorF({2}, {0.0f, 5.0f})), x, 0.1);
  EXPECT_FLOAT_EQ(d2[0], 0.0f);  // sign(0) = 0
  EXPECT_FLOAT_EQ(d2[1], 0.1f);
}

TEST(Fgsm, BoxClipsSaturatedPixel) {
  TensorF x({2}, {1.0f, 0.5f});
  auto d = fgsm<float>(fixed_gradient(TensorF({2}, {2.0f, 2.0f})), x, 0.1);
  EXPECT_FLOAT_EQ(d[0], 0.0f);
  EXPECT_FLOAT_EQ(d[1], 0.1f);
}

TEST(Pgd, OneStepLinfZeroInitEqualsFgsmBitwise) {
  auto m = build_model<float>(tiny_spec(), 40);
  Rng rng(41);
  auto x = testutil::random_tensor<float>({4, 3, 8, 8}, rng, 0, 1);
  auto y = random_labels(4, 3, rng);
  const double eps = 8.0 / 255.0;

  auto d_fgsm = fgsm(m, x, y, eps);
  AttackConfig cfg;
  cfg.threat = ThreatModel(NormP::kLinf, eps);
  cfg.steps = 1;
  cfg.step_size = eps;
  cfg.init = AttackInit::kZero;
  auto d_pgd = pgd(m, x, y, cfg);
  EXPECT_TRUE(bit_equal(d_fgsm, d_pgd));
}

TEST(Pgd, ZeroRadiusGivesZeroDelta) {
  auto m = build_model<float>(tiny_spec(), 42);
  Rng rng(43);
  auto x = testutil::random_tensor<float>({2, 3, 8, 8}, rng, 0, 1);
  auto y = random_labels(2, 3, rng);
  AttackConfig cfg;
  cfg.threat = ThreatModel(NormP::kL2, 0.0);
  cfg.steps = 5;
  cfg.step_size = 0.1;
  auto d = pgd(m, x, y, cfg);
  EXPECT_EQ(l2_norm(d), 0.0);
}

TEST(Pgd, RandomInitStaysInsideBall) {
  Rng rng(44);
  for (const NormP p : {NormP::kL2, NormP::kLinf}) {
    const ThreatModel tm(p, 0.3);
    auto d = random_in_ball<float>({8, 20}, tm, rng);
    for (int64_t r = 0; r < 8; ++r) {
      double n2 = 0, ninf = 0;
      for (int64_t i = 0; i < 20; ++i) {
        n2 += static_cast<double>(d.at2(r, i)) * d.at2(r, i);
        ninf = std::max(ninf, std::abs(static_cast<double>(d.at2(r, i))));
      }
      if (p == NormP::kL2) {
        EXPECT_LE(std::sqrt(n2), tm.eps * (1 + 1e-6));
      } else {
        EXPECT_LE(ninf, tm.eps * (1 + 1e-6));
      }
    }
  }
}

TEST(Pgd, MultiStepAtLeastAsStrongAsFgsmMostly) {
  auto m = build_model<float>(tiny_spec(), 45);
  Rng rng(46);
  const double eps = 8.0 / 255.0;
  int pgd_wins = 0;
  const int batches = 20;
  for (int b = 0; b < batches; ++b) {
    auto x = testutil::random_tensor<float>({4, 3, 8, 8}, rng, 0, 1);
    auto y = random_labels(4, 3, rng);
    auto d1 = fgsm(m, x, y, eps);
    AttackConfig cfg;
    cfg.threat = ThreatModel(NormP::kLinf, eps);
    cfg.steps = 10;
    cfg.step_size = default_pgd_step(eps, 10);
    auto d10 = pgd(m, x, y, cfg);
    TensorF x1 = x, x10 = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
      x1[i] += d1[i];
      x10[i] += d10[i];
    }
    if (model_loss(m, x10, y) >= model_loss(m, x1, y) - 1e-6) ++pgd_wins;
  }
  EXPECT_GE(pgd_wins, batches * 7 / 10);
}

// FGM must raise the loss more than a random perturbation of the same l2
// norm, on average over many batches.
TEST(Fgm, BeatsRandomPerturbationOnAverage) {
  auto m = build_model<float>(tiny_spec(), 47);
  Rng rng(48);
  const double eps = 0.25;
  double fgm_gain = 0, rand_gain = 0;
  const int batches = 100;
  for (int b = 0; b < batches; ++b) {
    auto x = testutil::random_tensor<float>({4, 3, 8, 8}, rng, 0, 1);
    auto y = random_labels(4, 3, rng);
    const double base = model_loss(m, x, y);
    auto d = fgm(m, x, y, eps);
    auto r = project(random_in_ball<float>(x.shape(), ThreatModel(NormP::kL2, eps), rng), x,
                     ThreatModel(NormP::kL2, eps));
    TensorF xa = x, xr = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
      xa[i] += d[i];
      xr[i] += r[i];
    }
    fgm_gain += model_loss(m, xa, y) - base;
    rand_gain += model_loss(m, xr, y) - base;
  }
  EXPECT_GT(fgm_gain / batches, rand_gain / batches);
}

TEST(Fgm, NormBoundHolds) {
  auto m = build_model<float>(tiny_spec(), 49);
  Rng rng(50);
  const double eps = 0.2;
  auto x = testutil::random_tensor<float>({6, 3, 8, 8}, rng, 0.2, 0.8);
  auto y = random_labels(6, 3, rng);
  auto d = fgm(m, x, y, eps);
  const int64_t rowsize = d.numel() / 6;
  for (int64_t r = 0; r < 6; ++r) {
    double n2 = 0;
    for (int64_t i = 0; i < rowsize; ++i) {
      const double v = d[r * rowsize + i];
      n2 += v * v;
    }
    EXPECT_LE(std::sqrt(n2), eps * (1 + 1e-6));
    // interior pixels, non-zero gradient: the bound is tight
    EXPECT_NEAR(std::sqrt(n2), eps, eps * 1e-5);
  }
}

TEST(GaussianAugment, ZeroSigmaLeavesBatchUnchanged) {
  Rng rng(60);
  auto batch = testutil::random_tensor<float>({4, 12}, rng, 0, 1);
  GaussianAugConfig cfg;
  cfg.sigma = 0;
  Rng noise(61);
  EXPECT_TRUE(bit_equal(gaussian_augment(batch, cfg, noise), batch));
}

TEST(GaussianAugment, HalfModeAugmentsExactlyHalf) {
  Rng rng(62);
  for (const int64_t b : {7, 8, 9}) {
    auto batch = testutil::random_tensor<float>({b, 16}, rng, 0.3, 0.7);
    GaussianAugConfig cfg;
    cfg.sigma = 0.05;
    cfg.mode = GaussianMode::kHalf;
    Rng noise(63);
    auto out = gaussian_augment(batch, cfg, noise);
    int changed = 0;
    for (int64_t r = 0; r < b; ++r) {
      bool diff = false;
      for (int64_t i = 0; i < 16; ++i) {
        if (out.at2(r, i) != batch.at2(r, i)) diff = true;
      }
      changed += diff;
    }
    EXPECT_EQ(changed, b / 2) << "batch " << b;
  }
}

TEST(GaussianAugment, SphereModeHasExactRadius) {
  const int64_t d = 48;
  TensorF batch = TensorF::full({3, d}, 0.5f);
  GaussianAugConfig cfg;
  cfg.sigma = 0.005;  // small enough that the box clip never triggers
  cfg.sphere = true;
  Rng noise(64);
  auto out = gaussian_augment(batch, cfg, noise);
  const double radius = cfg.sigma * std::sqrt(static_cast<double>(d));
  for (int64_t r = 0; r < 3; ++r) {
    double n2 = 0;
    for (int64_t i = 0; i < d; ++i) {
      const double v = out.at2(r, i) - 0.5;
      n2 += v * v;
    }
    EXPECT_NEAR(std::sqrt(n2), radius, radius * 1e-5);
  }
}

TEST(GaussianAugment, NoiseNormConcentratesAtSigmaSqrtD) {
  const int64_t d = 3072;
  TensorF batch = TensorF::full({50, d}, 0.5f);
  GaussianAugConfig cfg;
  cfg.sigma = 0.1;
  Rng noise(65);
  double mean_norm = 0;
  for (int rep = 0; rep < 10; ++rep) {
    auto out = gaussian_augment(batch, cfg, noise);
    for (int64_t r = 0; r < 50; ++r) {
      double n2 = 0;
      for (int64_t i = 0; i < d; ++i) {
        const double v = out.at2(r, i) - 0.5;
        n2 += v * v;
      }
      mean_norm += std::sqrt(n2);
    }
  }
  mean_norm /= 500.0;
  EXPECT_NEAR(mean_norm, 0.1 * std::sqrt(3072.0), 0.02 * 5.54);
}

TEST(GaussianAugment, UniformSigmaDrawsPerSample) {
  Rng rng(66);
  auto batch = testutil::random_tensor<float>({6, 32}, rng, 0.4, 0.6);
  GaussianAugConfig cfg;
  cfg.sigma = 0.2;
  cfg.mode = GaussianMode::kUniformSigma;
  Rng noise(67);
  auto out = gaussian_augment(batch, cfg, noise);
  int changed = 0;
  for (int64_t r = 0; r < 6; ++r) {
    for (int64_t i = 0; i < 32; ++i) {
      if (out.at2(r, i) != batch.at2(r, i)) {
        ++changed;
        break;
      }
    }
  }
  EXPECT_EQ(changed, 6);
  Rng noise2(67);
  EXPECT_TRUE(bit_equal(gaussian_augment(batch, cfg, noise2), out));
}

}  // namespace
