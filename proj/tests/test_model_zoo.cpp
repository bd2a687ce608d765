#include <gtest/gtest.h>

#include <random>

#include "capsroute/model.hpp"

using namespace capsroute;

namespace {

std::size_t row_params(const ParamCensus& c, const std::string& layer) {
  for (const auto& r : c.rows) {
    if (r.layer == layer) return r.params;
  }
  ADD_FAILURE() << "no census row " << layer;
  return 0;
}

Tensor<float> images(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_uniform<float>({n, h, w, 1}, rng, 0.0, 1.0);
}

}  // namespace

TEST(Census, MnistHeadline) {
  const auto c = count_params(build_mnist_spec());
  EXPECT_EQ(c.headline, 161824u);
  EXPECT_EQ(row_params(c, "conv1"), 832u);
  EXPECT_EQ(row_params(c, "caps1.W"), 20480u);
  EXPECT_EQ(row_params(c, "caps1.B"), 160u);
  EXPECT_EQ(c.decoder, 1411344u);
}

TEST(Census, MultiMnistInRange) {
  const auto c = count_params(build_multimnist_spec());
  EXPECT_EQ(c.headline, 156064u);
  EXPECT_GE(c.headline, 150000u);
  EXPECT_LE(c.headline, 158000u);
}

TEST(Census, MatchesInitializedScalars) {
  for (const auto& spec : {build_mnist_spec(), build_multimnist_spec()}) {
    const auto p = init_params<float>(spec, 1);
    EXPECT_EQ(p.scalar_count(), count_params(spec).total());
  }
}

TEST(ModelSpec, SpatialTrace) {
  const auto mnist = build_mnist_spec();
  EXPECT_EQ(mnist.feature_map(), (std::pair<std::size_t, std::size_t>{9, 9}));
  EXPECT_EQ(mnist.classes(), 10u);
  EXPECT_EQ(mnist.primary.n, 16u);
  EXPECT_EQ(mnist.primary.d, 8u);
  const auto multi = build_multimnist_spec();
  EXPECT_EQ(multi.height, 36u);
  EXPECT_EQ(multi.width, 36u);
  EXPECT_EQ(multi.feature_map(), (std::pair<std::size_t, std::size_t>{6, 6}));
}

TEST(ModelSpec, ValidationAndRoundTrip) {
  auto bad = build_mnist_spec();
  bad.primary = {16, 4};
  EXPECT_THROW(bad.validate(), ConfigError);
  for (const auto& spec : {build_mnist_spec(), build_multimnist_spec()}) {
    const auto text = serialize_spec(spec);
    EXPECT_EQ(serialize_spec(parse_spec(text)), text);
  }
}

TEST(Forward, LengthsBoundedAndDeterministic) {
  const auto spec = build_mnist_spec();
  const auto p = init_params<float>(spec, 2);
  const auto x = images(3, 28, 28, 3);
  const auto a = forward(spec, p, x);
  const auto b = forward(spec, p, x);
  EXPECT_EQ(a.lengths.shape(), (Shape{3, 10}));
  for (float v : a.lengths.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_EQ(a.lengths, b.lengths);
  ASSERT_EQ(a.reconstructions.size(), 1u);
  EXPECT_EQ(a.reconstructions[0].shape(), (Shape{3, 784}));
  EXPECT_THROW(forward(spec, p, images(1, 27, 28, 4)), DimensionError);
}

TEST(Forward, DecoderDoesNotChangeLengths) {
  const auto spec = build_mnist_spec();
  const auto p = init_params<float>(spec, 5);
  const auto x = images(2, 28, 28, 6);
  ForwardOptions no_decode;
  no_decode.decode = false;
  EXPECT_EQ(forward(spec, p, x).lengths, forward(spec, p, x, no_decode).lengths);
}

TEST(Forward, InstanceNormIsPerSample) {
  auto spec = build_mnist_spec();
  for (auto& c : spec.conv) c.norm = ops::NormMode::instance;
  const auto p = init_params<float>(spec, 7);
  const auto one = images(1, 28, 28, 8);
  Tensor<float> two({2, 28, 28, 1});
  for (std::size_t i = 0; i < two.size(); ++i) two[i] = one[i % one.size()];
  ForwardOptions train;
  train.training = true;
  const auto a = forward(spec, p, one, train);
  const auto b = forward(spec, p, two, train);
  for (std::size_t i = 0; i < b.lengths.size(); ++i) EXPECT_NEAR(b.lengths[i], a.lengths[i % 10], 1e-5);
}

TEST(Forward, SingleRoutingPass) {
  const auto spec = build_mnist_spec();
  const auto p = init_params<float>(spec, 9);
  const auto r = forward(spec, p, images(2, 28, 28, 10));
  EXPECT_EQ(r.trace.A.shape(), (Shape{2, 16, 16, 10}));
  EXPECT_EQ(r.trace.C.shape(), (Shape{2, 16, 10}));
  EXPECT_EQ(r.trace.U_hat.shape(), (Shape{2, 16, 10, 16}));
}

TEST(Init, SeededAndFinite) {
  const auto spec = build_mnist_spec();
  const auto a = init_params<float>(spec, 3), b = init_params<float>(spec, 3), c = init_params<float>(spec, 4);
  EXPECT_TRUE(a.all_finite());
  EXPECT_EQ(a.get("conv1.kernel"), b.get("conv1.kernel"));
  EXPECT_NE(a.get("conv1.kernel"), c.get("conv1.kernel"));
  for (float v : a.get("caps1.B").values()) EXPECT_EQ(v, 0.0f);
}
