#include <gtest/gtest.h>

#include <numeric>

#include "corrobust/model.hpp"
#include "test_util.hpp"

using namespace corrobust;

namespace {

ModelSpec small_spec() {
  ModelSpec s;
  s.input_shape = {3, 16, 16};
  s.widths = {4, 8, 16};
  s.blocks_per_stage = 1;
  s.num_classes = 4;
  return s;
}

TEST(BuildModel, DeterministicFromSeed) {
  auto a = build_model<float>(small_spec(), 123);
  auto b = build_model<float>(small_spec(), 123);
  auto ids = a.graph.parameter_ids();
  ASSERT_EQ(ids, b.graph.parameter_ids());
  for (int id : ids) {
    EXPECT_TRUE(bit_equal(a.graph.stored_value(id), b.graph.stored_value(id)))
        << a.graph.node(id).name;
  }
  auto c = build_model<float>(small_spec(), 124);
  bool any_diff = false;
  for (int id : ids) {
    if (!bit_equal(a.graph.stored_value(id), c.graph.stored_value(id))) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(BuildModel, ThreeStagesGiveFourInjectionPoints) {
  auto m = build_model<float>(small_spec(), 1);
  ASSERT_EQ(m.injection_points.size(), 4u);
  EXPECT_EQ(m.injection_points[0].layer, 1);
  EXPECT_EQ(m.injection_points[0].tap, "input");
  EXPECT_EQ(m.injection_points[0].dim, 3 * 16 * 16);
  EXPECT_EQ(m.injection_points[1].dim, 4 * 16 * 16);
  EXPECT_EQ(m.injection_points[2].dim, 8 * 8 * 8);
  EXPECT_EQ(m.injection_points[3].dim, 16 * 4 * 4);
  EXPECT_EQ(m.input_dim(), 768);
}

TEST(BuildModel, LogitsShapeFollowsNumClasses) {
  ModelSpec s = small_spec();
  s.num_classes = 10;
  auto m = build_model<float>(s, 2);
  Rng rng(3);
  auto x = testutil::random_tensor<float>({5, 3, 16, 16}, rng, 0, 1);
  auto p = predict(m, x);
  EXPECT_EQ(p.logits.shape(), (Shape{5, 10}));
  EXPECT_EQ(p.probabilities.shape(), (Shape{5, 10}));
}

TEST(BuildModel, InvalidSpecRejected) {
  ModelSpec s = small_spec();
  s.widths.clear();
  EXPECT_THROW(build_model<float>(s, 0), ConfigError);
  s = small_spec();
  s.input_shape = {3, 10, 10};  // not divisible by stage strides
  EXPECT_THROW(build_model<float>(s, 0), ConfigError);
  s = small_spec();
  s.num_classes = 1;
  EXPECT_THROW(build_model<float>(s, 0), ConfigError);
}

TEST(FeatureMaps, InputTapReturnsInput) {
  auto m = build_model<float>(small_spec(), 5);
  Rng rng(7);
  auto x = testutil::random_tensor<float>({2, 3, 16, 16}, rng, 0, 1);
  auto fm = feature_maps(m, x, {1});
  ASSERT_EQ(fm.count(1), 1u);
  EXPECT_TRUE(bit_equal(fm.at(1), x));
}

TEST(FeatureMaps, DeterministicAcrossCalls) {
  auto m = build_model<float>(small_spec(), 5);
  Rng rng(7);
  auto x = testutil::random_tensor<float>({2, 3, 16, 16}, rng, 0, 1);
  auto a = feature_maps(m, x, {2, 3, 4});
  auto b = feature_maps(m, x, {2, 3, 4});
  for (int l : {2, 3, 4}) EXPECT_TRUE(bit_equal(a.at(l), b.at(l))) << l;
}

TEST(FeatureMaps, UnknownLayerRejected) {
  auto m = build_model<float>(small_spec(), 5);
  Rng rng(7);
  auto x = testutil::random_tensor<float>({1, 3, 16, 16}, rng, 0, 1);
  EXPECT_THROW(feature_maps(m, x, {9}), ConfigError);
}

// Independent plain-loop forward of the tiny norm-free network, computed
// without the graph machinery.
struct RefNet {
  // all single-channel 3x3 kernels, 4x4 input, 2 classes
  std::vector<double> k_stem, k_b1, k_b2, fc_w, fc_b;

  static std::vector<double> conv3x3(const std::vector<double>& x, int hw,
                                     const std::vector<double>& k) {
    std::vector<double> out(hw * hw, 0.0);
    for (int i = 0; i < hw; ++i)
      for (int j = 0; j < hw; ++j) {
        double s = 0;
        for (int a = -1; a <= 1; ++a)
          for (int b = -1; b <= 1; ++b) {
            const int ii = i + a, jj = j + b;
            if (ii < 0 || ii >= hw || jj < 0 || jj >= hw) continue;
            s += x[ii * hw + jj] * k[(a + 1) * 3 + (b + 1)];
          }
        out[i * hw + j] = s;
      }
    return out;
  }

  static std::vector<double> relu(std::vector<double> x) {
    for (double& v : x) v = v > 0 ? v : 0;
    return x;
  }

  std::pair<double, double> forward(const std::vector<double>& img) const {
    auto x = conv3x3(img, 4, k_stem);
    auto pre = relu(x);
    auto h = relu(conv3x3(pre, 4, k_b1));
    h = conv3x3(h, 4, k_b2);
    for (size_t i = 0; i < h.size(); ++i) h[i] += x[i];  // identity shortcut
    h = relu(h);
    const double pooled = std::accumulate(h.begin(), h.end(), 0.0) / 16.0;
    return {pooled * fc_w[0] + fc_b[0], pooled * fc_w[1] + fc_b[1]};
  }
};

TEST(FeatureMaps, TinyNetMatchesHandRolledForward) {
  ModelSpec s;
  s.input_shape = {1, 4, 4};
  s.widths = {1};
  s.blocks_per_stage = 1;
  s.num_classes = 2;
  s.norm = NormKind::kNone;
  auto m = build_model<double>(s, 0);

  RefNet ref;
  ref.k_stem = {0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.1, -0.3};
  ref.k_b1 = {0.2, 0.1, 0.0, -0.1, 0.4, 0.2, 0.0, -0.2, 0.1};
  ref.k_b2 = {-0.1, 0.0, 0.2, 0.3, -0.4, 0.1, 0.05, 0.2, -0.15};
  ref.fc_w = {1.5, -0.7};
  ref.fc_b = {0.25, -0.5};

  auto set = [&](const std::string& name, const std::vector<double>& v) {
    Tensor<double>& p = m.graph.stored_value(m.graph.require(name));
    ASSERT_EQ(p.numel(), static_cast<int64_t>(v.size())) << name;
    for (size_t i = 0; i < v.size(); ++i) p[static_cast<int64_t>(i)] = v[i];
  };
  set("conv1.w", ref.k_stem);
  set("stage1.block0.conv1.w", ref.k_b1);
  set("stage1.block0.conv2.w", ref.k_b2);
  set("fc.w", ref.fc_w);
  set("fc.b", ref.fc_b);

  Rng rng(21);
  Tensor<double> x({1, 1, 4, 4});
  std::vector<double> img(16);
  for (int i = 0; i < 16; ++i) {
    img[i] = rng.uniform(0, 1);
    x[i] = img[i];
  }
  auto p = predict(m, x);
  auto [l0, l1] = ref.forward(img);
  EXPECT_NEAR(p.logits[0], l0, 1e-12);
  EXPECT_NEAR(p.logits[1], l1, 1e-12);
}

TEST(Predict, ProbabilityRowsSumToOne) {
  auto m = build_model<float>(small_spec(), 11);
  Rng rng(13);
  auto x = testutil::random_tensor<float>({8, 3, 16, 16}, rng, 0, 1);
  auto p = predict(m, x);
  for (int64_t i = 0; i < 8; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 4; ++j) {
      EXPECT_GE(p.probabilities.at2(i, j), 0.0f);
      s += p.probabilities.at2(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(Predict, EqualLogitsGiveUniformProbabilities) {
  TensorF logits = TensorF::full({3, 5}, 2.5f);
  auto probs = softmax_rows(logits);
  for (int64_t i = 0; i < probs.numel(); ++i) EXPECT_NEAR(probs[i], 0.2f, 1e-6);
}

TEST(Predict, PermutingHeadWeightsPermutesProbabilities) {
  auto m = build_model<float>(small_spec(), 17);
  Rng rng(19);
  auto x = testutil::random_tensor<float>({4, 3, 16, 16}, rng, 0, 1);
  auto base = predict(m, x);

  const std::vector<int64_t> perm = {2, 0, 3, 1};  // class j -> perm[j]
  auto m2 = build_model<float>(small_spec(), 17);
  TensorF& w = m2.graph.stored_value(m2.graph.require("fc.w"));
  TensorF& b = m2.graph.stored_value(m2.graph.require("fc.b"));
  const TensorF w_old = w;
  const TensorF b_old = b;
  for (int64_t r = 0; r < w.dim(0); ++r)
    for (int64_t j = 0; j < 4; ++j) w.at2(r, perm[j]) = w_old.at2(r, j);
  for (int64_t j = 0; j < 4; ++j) b[perm[j]] = b_old[j];

  auto permuted = predict(m2, x);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(permuted.probabilities.at2(i, perm[j]), base.probabilities.at2(i, j), 1e-6);
    }
}

TEST(InjectionPoints, ZeroDeltaLeavesForwardBitIdentical) {
  auto m = build_model<float>(small_spec(), 23);
  Rng rng(29);
  auto x = testutil::random_tensor<float>({3, 3, 16, 16}, rng, 0, 1);

  Workspace<float> ws(m.graph);
  bind_eval_batch(ws, x);
  ws.forward(RunMode::kEval);
  const TensorF base_logits = ws.value("logits");

  for (const auto& p : m.injection_points) {
    ws.inject(p.tap, TensorF(ws.value(p.tap).shape()));  // zeros
  }
  ws.forward(RunMode::kEval);
  EXPECT_TRUE(bit_equal(ws.value("logits"), base_logits));
}

TEST(InjectionPoints, DimMatchesTapShape) {
  auto m = build_model<float>(small_spec(), 31);
  Rng rng(37);
  auto x = testutil::random_tensor<float>({2, 3, 16, 16}, rng, 0, 1);
  Workspace<float> ws(m.graph);
  bind_eval_batch(ws, x);
  ws.forward(RunMode::kEval);
  for (const auto& p : m.injection_points) {
    EXPECT_EQ(ws.value(p.tap).numel() / 2, p.dim) << p.tap;
  }
}

}  // namespace
