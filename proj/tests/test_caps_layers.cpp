#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "capsroute/caps.hpp"

using namespace capsroute;
using namespace capsroute::caps;

namespace {

Tensor<double> rnd(Shape s, std::mt19937_64& rng, double sd = 1.0) { return random_normal<double>(std::move(s), rng, sd); }

double norm(const Tensor<double>& t, std::size_t offset, std::size_t d) {
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) s += t[offset + i] * t[offset + i];
  return std::sqrt(s);
}

}  // namespace

TEST(Squash, HandValues) {
  const auto z = squash(Tensor<double>({1, 1, 3}));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  const auto e1 = squash(Tensor<double>({1, 1, 2}, {1, 0}));
  EXPECT_NEAR(e1[0], 0.632120558829, 1e-11);
  EXPECT_EQ(e1[1], 0.0);
  const auto s = squash(Tensor<double>({1, 1, 2}, {3, 4}));
  EXPECT_NEAR(s[0], 0.595957231801, 1e-11);
  EXPECT_NEAR(s[1], 0.794609642401, 1e-11);
  EXPECT_NEAR(norm(s, 0, 2), 0.993262053001, 1e-11);
}

TEST(Squash, DirectionAndMonotoneNorm) {
  std::mt19937_64 rng(3);
  double prev_in = 0, prev_out = -1;
  for (int i = 1; i <= 200; ++i) {
    auto s = rnd({1, 1, 8}, rng);
    const double target = 0.05 * i;
    const double n0 = norm(s, 0, 8);
    for (auto& v : s.values()) v *= target / n0;
    const auto q = squash(s);
    const double nq = norm(q, 0, 8);
    double dot = 0;
    for (std::size_t k = 0; k < 8; ++k) dot += s[k] * q[k];
    EXPECT_GE(dot / (target * nq), 1 - 1e-9);
    EXPECT_LT(nq, 1.0);
    EXPECT_NEAR(nq, 1 - std::exp(-target), 1e-12);
    EXPECT_GT(target, prev_in);
    EXPECT_GT(nq, prev_out);
    prev_in = target;
    prev_out = nq;
  }
}

TEST(PrimaryCaps, ShapeAndReshapeOrder) {
  std::mt19937_64 rng(4);
  const auto fm = rnd({2, 9, 9, 128}, rng);
  const auto out = primary_caps(fm, rnd({9, 9, 128}, rng), rnd({128}, rng), 16, 8);
  EXPECT_EQ(out.caps.shape(), (Shape{2, 16, 8}));
  // channel c -> capsule c / d, component c % d, and back
  Tensor<double> pre({1, 1, 1, 6});
  for (std::size_t c = 0; c < 6; ++c) pre[c] = static_cast<double>(c);
  const auto caps3 = pre.reshaped({1, 3, 2});
  EXPECT_EQ(caps3.at(0, 2, 1), 5.0);
  EXPECT_EQ(caps3.at(0, 1, 0), 2.0);
  EXPECT_EQ(caps_to_channels(caps3), pre);
}

TEST(PrimaryCaps, ZeroInputZeroCapsules) {
  std::mt19937_64 rng(5);
  const auto out = primary_caps(Tensor<double>({1, 3, 3, 4}), rnd({3, 3, 4}, rng), Tensor<double>({4}), 2, 2);
  for (double v : out.caps.values()) EXPECT_EQ(v, 0.0);
}

TEST(PrimaryCaps, ConfigErrors) {
  std::mt19937_64 rng(6);
  EXPECT_THROW(primary_caps(rnd({1, 3, 3, 6}, rng), rnd({3, 3, 6}, rng), rnd({6}, rng), 4, 2), ConfigError);
  EXPECT_THROW(primary_caps(rnd({1, 3, 3, 4}, rng), rnd({2, 2, 4}, rng), rnd({4}, rng), 2, 2), ConfigError);
}

TEST(Predict, IdentityAndScalar) {
  std::mt19937_64 rng(7);
  const auto u = rnd({2, 3, 4}, rng);
  Tensor<double> W({3, 2, 4, 4});
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t d = 0; d < 4; ++d) W.at(j, k, d, d) = 1;
  const auto U = predict(u, W);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(U.at(i, j, k, d), u.at(i, j, d));
  EXPECT_DOUBLE_EQ(predict(Tensor<double>({1, 1, 1}, {2}), Tensor<double>({1, 1, 1, 1}, {3}))[0], 6.0);
  EXPECT_THROW(predict(u, Tensor<double>({3, 2, 5, 4})), DimensionError);
}

TEST(Attention, HandInstances) {
  // both predictions for upper capsule 0 equal 1
  const auto A = attention_scores(Tensor<double>({1, 2, 1, 1}, {1, 1}), 1);
  for (double v : A.values()) EXPECT_DOUBLE_EQ(v, 1.0);
  // orthogonal predictions
  const auto B = attention_scores(Tensor<double>({1, 2, 1, 2}, {1, 0, 0, 1}), 1);
  EXPECT_EQ(B.at(0, 0, 1, 0), 0.0);
  EXPECT_EQ(B.at(0, 1, 0, 0), 0.0);
}

TEST(Attention, ScaledByLowerDimension) {
  const auto A = attention_scores(Tensor<double>({1, 1, 1, 2}, {3, 4}), 4);
  EXPECT_DOUBLE_EQ(A[0], 25.0 / 2.0);
}

TEST(Coupling, HandInstance) {
  // upper 0: both lower capsules predict 1 (agree); upper 1: 1 and -1 (disagree)
  Tensor<double> U({1, 2, 2, 1}, {1, 1, 1, -1});
  const auto A = attention_scores(U, 1);
  const auto C = coupling(A);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_NEAR(C.at(0, j, 0), 0.880797077978, 1e-11);
    EXPECT_NEAR(C.at(0, j, 1), 0.119202922022, 1e-11);
    EXPECT_GT(C.at(0, j, 0), C.at(0, j, 1));
  }
}

TEST(Coupling, UniformAndSingleton) {
  const auto C = coupling(Tensor<double>({1, 3, 3, 4}, 0.7));
  for (double v : C.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  std::mt19937_64 rng(8);
  const auto C1 = coupling(rnd({2, 3, 3, 1}, rng));
  for (double v : C1.values()) EXPECT_DOUBLE_EQ(v, 1.0);
  Tensor<double> bad({1, 2, 2, 2});
  bad[3] = std::nan("");
  EXPECT_THROW(coupling(bad), NumericError);
}

TEST(CapsDense, SingleLowerCapsule) {
  std::mt19937_64 rng(9);
  const auto u = rnd({1, 1, 3}, rng);
  CapsDenseParams<double> p{rnd({1, 4, 3, 2}, rng), rnd({1, 4}, rng)};
  const auto out = caps_dense_forward(u, p);
  const auto U = predict(u, p.W);
  // C is a softmax of the squared prediction norms over upper capsules
  std::vector<double> e(4);
  double z = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double a = (U.at(0, 0, k, 0) * U.at(0, 0, k, 0) + U.at(0, 0, k, 1) * U.at(0, 0, k, 1)) / std::sqrt(3.0);
    z += e[k] = std::exp(a);
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const double c = e[k] / z;
    EXPECT_NEAR(out.trace.C.at(0, 0, k), c, 1e-12);
    for (std::size_t d = 0; d < 2; ++d) EXPECT_NEAR(out.pre_squash.at(0, k, d), U.at(0, 0, k, d) * (c + p.B.at(0, k)), 1e-12);
  }
}

TEST(CapsDense, IdenticalPredictionsUniformCoupling) {
  // identity W, identical inputs: every prediction is v and C = 1/n_l1
  const std::size_t nl = 3, nu = 2, d = 2;
  Tensor<double> u({1, nl, d});
  for (std::size_t j = 0; j < nl; ++j) {
    u.at(0, j, 0) = 0.3;
    u.at(0, j, 1) = -0.2;
  }
  Tensor<double> W({nl, nu, d, d});
  for (std::size_t j = 0; j < nl; ++j)
    for (std::size_t k = 0; k < nu; ++k)
      for (std::size_t q = 0; q < d; ++q) W.at(j, k, q, q) = 1;
  const auto out = caps_dense_forward(u, CapsDenseParams<double>{W, Tensor<double>({nl, nu})});
  for (std::size_t k = 0; k < nu; ++k) {
    EXPECT_NEAR(out.pre_squash.at(0, k, 0), 0.3 * nl / nu, 1e-12);
    EXPECT_NEAR(out.pre_squash.at(0, k, 1), -0.2 * nl / nu, 1e-12);
  }
}

TEST(CapsDense, RandomInvariants) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> ext(1, 16);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t N = 2, nl = ext(rng), nu = ext(rng), dl = ext(rng), du = ext(rng);
    const auto u = squash(rnd({N, nl, dl}, rng));
    CapsDenseParams<double> p{rnd({nl, nu, dl, du}, rng, 0.5), rnd({nl, nu}, rng, 0.1)};
    const auto out = caps_dense_forward(u, p);
    const auto& A = out.trace.A;
    const auto& C = out.trace.C;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = 0; k < nu; ++k)
        for (std::size_t a = 0; a < nl; ++a)
          for (std::size_t b = 0; b < nl; ++b) ASSERT_NEAR(A.at(i, a, b, k), A.at(i, b, a, k), 1e-6);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < nl; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < nu; ++k) {
          ASSERT_GE(C.at(i, j, k), 0.0);
          ASSERT_LE(C.at(i, j, k), 1.0);
          s += C.at(i, j, k);
        }
        ASSERT_NEAR(s, 1.0, 1e-6);
      }
    for (std::size_t v = 0; v < N * nu; ++v) ASSERT_LT(norm(out.caps, v * du, du), 1.0);
  }
}

TEST(CapsDense, PermutationEquivariance) {
  std::mt19937_64 rng(11);
  const std::size_t nl = 5, nu = 3, dl = 4, du = 6;
  const auto u = squash(rnd({2, nl, dl}, rng));
  CapsDenseParams<double> p{rnd({nl, nu, dl, du}, rng, 0.5), rnd({nl, nu}, rng, 0.1)};
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor<double> up(u.shape());
  CapsDenseParams<double> pp{Tensor<double>(p.W.shape()), Tensor<double>(p.B.shape())};
  for (std::size_t j = 0; j < nl; ++j) {
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t d = 0; d < dl; ++d) up.at(i, j, d) = u.at(i, perm[j], d);
    for (std::size_t k = 0; k < nu; ++k) {
      pp.B.at(j, k) = p.B.at(perm[j], k);
      for (std::size_t a = 0; a < dl; ++a)
        for (std::size_t b = 0; b < du; ++b) pp.W.at(j, k, a, b) = p.W.at(perm[j], k, a, b);
    }
  }
  const auto o1 = caps_dense_forward(u, p);
  const auto o2 = caps_dense_forward(up, pp);
  EXPECT_LE(max_abs_diff(o1.caps, o2.caps), 1e-6);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < nl; ++j)
      for (std::size_t k = 0; k < nu; ++k) EXPECT_NEAR(o2.trace.C.at(i, j, k), o1.trace.C.at(i, perm[j], k), 1e-12);
}

TEST(CapsDense, ErrorsPropagate) {
  std::mt19937_64 rng(12);
  EXPECT_THROW(caps_dense_forward(rnd({1, 2, 3}, rng), CapsDenseParams<double>{rnd({2, 2, 3, 2}, rng), rnd({2, 3}, rng)}),
               DimensionError);
}
