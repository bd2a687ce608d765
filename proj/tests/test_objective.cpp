#include <gtest/gtest.h>

#include "capsroute/gradcheck_suite.hpp"
#include "capsroute/objective.hpp"

using namespace capsroute;

namespace {

std::vector<double> flat(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

Tensor<double> row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>({1, n}, std::move(v));
}

ModelSpec tiny_spec() {
  ModelSpec s;
  s.name = "tiny";
  s.height = s.width = 8;
  s.conv = {{3, 4, 1, ops::NormMode::batch}, {3, 8, 2, ops::NormMode::instance}};
  s.primary = {4, 2};
  s.caps_dense = {{3, 4}};
  s.decoder = {true, {6}, 64};
  return s;
}

}  // namespace

TEST(MarginLoss, HandExamples) {
  const MarginConfig cfg;
  EXPECT_NEAR(margin_loss(row({0.9}), row({1}), cfg), 0.0, 1e-9);
  EXPECT_NEAR(margin_loss(row({0.3}), row({1}), cfg), 0.36, 1e-9);
  EXPECT_NEAR(margin_loss(row({0.8}), row({0}), cfg), 0.245, 1e-9);
  EXPECT_NEAR(margin_loss(row({0.3, 0.8}), row({1, 0}), cfg), 0.605, 1e-9);
}

TEST(MarginLoss, BatchMeanOfClassSums) {
  const MarginConfig cfg;
  Tensor<double> len({2, 2}, {0.3, 0.8, 0.9, 0.05}), tgt({2, 2}, {1, 0, 1, 0});
  EXPECT_NEAR(margin_loss(len, tgt, cfg), 0.605 / 2, 1e-12);
  EXPECT_THROW(margin_loss(len, row({1, 0}), cfg), DimensionError);
}

TEST(MarginLoss, ZeroIffAllMarginsMet) {
  const MarginConfig cfg;
  EXPECT_EQ(margin_loss(row({0.95, 0.1, 0.0}), row({1, 0, 0}), cfg), 0.0);
  EXPECT_GT(margin_loss(row({0.95, 0.11, 0.0}), row({1, 0, 0}), cfg), 0.0);
  EXPECT_GT(margin_loss(row({0.89, 0.1, 0.0}), row({1, 0, 0}), cfg), 0.0);
}

TEST(MarginConfig, Validation) {
  EXPECT_NO_THROW(MarginConfig{}.validate());
  EXPECT_THROW((MarginConfig{0.1, 0.9, 0.5, 0.392}.validate()), ConfigError);
  EXPECT_THROW((MarginConfig{0.9, 0.1, 0.0, 0.392}.validate()), ConfigError);
  EXPECT_THROW((MarginConfig{0.9, 0.1, 0.5, -1.0}.validate()), ConfigError);
}

TEST(MaskCapsules, LongestTargetAndTies) {
  Tensor<double> caps({1, 2, 2}, {1, 0, 0, 2});
  EXPECT_EQ(flat(mask_capsules(caps, MaskSelect::longest()).flat), (std::vector<double>{0, 0, 0, 2}));
  EXPECT_EQ(flat(mask_capsules(caps, MaskSelect::target({0})).flat), (std::vector<double>{1, 0, 0, 0}));
  Tensor<double> tie({1, 2, 2}, {0, 1, 1, 0});
  const auto m = mask_capsules(tie, MaskSelect::longest());
  EXPECT_EQ(m.selected[0], 0u);
  EXPECT_EQ(flat(m.flat), (std::vector<double>{0, 1, 0, 0}));
  EXPECT_THROW(mask_capsules(caps, MaskSelect::target({2})), ArgumentError);
}

TEST(ReconstructionLoss, Values) {
  Tensor<double> img({1, 4}, {0.0, 0.2, 0.5, 0.8});
  EXPECT_EQ(reconstruction_loss(img, img), 0.0);
  auto dec = img;
  for (auto& v : dec.values()) v += 0.1;
  EXPECT_NEAR(reconstruction_loss(dec, img), 0.01, 1e-12);
  EXPECT_THROW(reconstruction_loss(row({1, 2}), img), DimensionError);
}

TEST(TotalLoss, Composition) {
  MarginConfig cfg;
  EXPECT_NEAR(cfg.recon_weight, 0.0005 * 784, 1e-15);
  Tensor<double> img({1, 4}, {0.0, 0.2, 0.5, 0.8});
  auto dec = img;
  for (auto& v : dec.values()) v += 0.1;
  const auto len = row({0.3, 0.8}), tgt = row({1, 0});
  const auto l = total_loss(len, tgt, {dec}, {img}, cfg);
  EXPECT_NEAR(l.total, 0.60892, 1e-9);
  EXPECT_NEAR(l.margin, 0.605, 1e-9);
  EXPECT_NEAR(l.reconstruction, 0.01, 1e-12);
  EXPECT_NEAR(total_loss(len, tgt, {img}, {img}, cfg).total, l.margin, 1e-15);
  cfg.recon_weight = 0;
  EXPECT_NEAR(total_loss(len, tgt, {dec}, {img}, cfg).total, l.margin, 1e-15);
}

TEST(TotalLoss, MultiReconstructionHalvedWeight) {
  const auto spec = build_multimnist_spec();
  EXPECT_NEAR(spec.loss.recon_weight, 0.196, 1e-15);
  Tensor<double> img({1, 4}, {0.0, 0.2, 0.5, 0.8});
  auto dec = img;
  for (auto& v : dec.values()) v += 0.1;
  const auto l = total_loss(row({0.3, 0.8}), row({1, 0}), {dec, dec}, {img, img}, spec.loss);
  EXPECT_NEAR(l.total, 0.605 + 0.196 * 0.02, 1e-9);
}

TEST(Gradients, MarginLossAwayFromHinges) {
  const MarginConfig cfg;
  Tensor<double> len({2, 4}, {0.05, 0.3, 0.5, 0.95, 0.2, 0.12, 0.85, 0.6});
  Tensor<double> tgt({2, 4}, {0, 1, 0, 0, 0, 0, 1, 0});
  auto obj = [&](const TensorList& x) { return static_cast<long double>(margin_loss(x[0], tgt, cfg)); };
  EXPECT_LE(finite_difference_check("margin", obj, {margin_loss_grad(len, tgt, cfg)}, {len}).max_rel_error, 1e-5);
}

TEST(Gradients, TinyModelTotalLoss) {
  SuiteOptions so;
  so.fd.seed = 3;
  const auto rep = check_model_total_loss(tiny_spec(), so, "tiny_total_loss");
  EXPECT_LE(rep.max_rel_error, 1e-4) << "worst input " << rep.worst_input;
  EXPECT_GE(rep.probe_count, 20u);
}
