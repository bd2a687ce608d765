#include <gtest/gtest.h>

#include <set>

#include "capsroute/gradcheck_suite.hpp"

using namespace capsroute;

namespace {

constexpr double kTolerance = 1e-4;

std::vector<std::string> op_names() {
  std::vector<std::string> names;
  for (const auto& c : gradcheck_suite()) {
    if (c.name != "model_total_loss") names.push_back(c.name);
  }
  return names;
}

}  // namespace

TEST(GradCheckSuite, CoversEveryOpOnce) {
  std::set<std::string> seen;
  for (const auto& c : gradcheck_suite()) EXPECT_TRUE(seen.insert(c.name).second) << c.name;
  for (const char* op : {"conv2d", "depthwise_conv2d", "normalize_batch", "normalize_instance", "matmul_batched",
                         "softmax", "relu", "exp", "scale", "add", "sigmoid", "linear", "squash", "lengths",
                         "primary_caps", "predict", "attention_scores", "coupling", "caps_dense", "margin_loss",
                         "reconstruction_loss", "model_total_loss"}) {
    EXPECT_TRUE(seen.count(op)) << op;
  }
}

class OpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradient, PassesFiniteDifferences) {
  for (const auto& c : gradcheck_suite()) {
    if (c.name != GetParam()) continue;
    for (std::uint64_t seed : {0u, 1u}) {
      SuiteOptions so;
      so.fd.seed = seed;
      const auto r = c.run(so);
      EXPECT_LE(r.max_rel_error, kTolerance) << "seed " << seed;
      EXPECT_GE(r.probe_count, 1u);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Ops, OpGradient, ::testing::ValuesIn(op_names()),
                         [](const auto& info) { return info.param; });

TEST(GradCheckSuite, CorruptedGradientIsCaught) {
  for (const auto& c : gradcheck_suite()) {
    if (c.name == "model_total_loss") continue;
    SuiteOptions so;
    so.corrupt = c.name;
    EXPECT_GT(c.run(so).max_rel_error, kTolerance) << c.name;
  }
}

TEST(GradCheck, ProbesAtLeastTwentyPerTensor) {
  std::mt19937_64 rng(1);
  const auto x = random_uniform<double>({6, 6}, rng);
  auto fwd = [](const TensorList& in) { return ops::elementwise(in[0], ops::Unary::exp); };
  auto bwd = [](const TensorList& in, const Tensor<double>& w) {
    return TensorList{ops::elementwise_backward(in[0], ops::elementwise(in[0], ops::Unary::exp), w, ops::Unary::exp)};
  };
  const auto r = check_tensor_op("exp", fwd, bwd, {x});
  EXPECT_EQ(r.probe_count, 20u);
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(GradCheck, KinkStraddlingProbesAreSkipped) {
  // |x| has a kink at 0; the coordinate at 1e-7 straddles it for step 1e-5
  const Tensor<double> x({3}, {0.5, 1e-7, -0.7});
  PiecewiseObjective obj = [](const TensorList& in) {
    PiecewiseValue v;
    for (double e : in[0].values()) {
      v.value += std::abs(e);
      v.pattern.push_back(e > 0);
    }
    return v;
  };
  const TensorList grads{Tensor<double>({3}, {1.0, 1.0, -1.0})};
  const auto r = finite_difference_check("abs", obj, grads, {x});
  EXPECT_EQ(r.kinks_skipped, 1u);
  EXPECT_EQ(r.probe_count, 2u);
  EXPECT_LE(r.max_rel_error, 1e-9);
}
