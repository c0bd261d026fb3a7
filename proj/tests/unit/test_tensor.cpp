#include <gtest/gtest.h>

#include <cmath>

#include "nodetl/tensor.hpp"
#include "support/oracles.hpp"

namespace nodetl {
namespace {

TEST(Tensor, ConstructorRejectsLengthMismatch) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
}

TEST(Matmul, IdentityTimesMatrix) {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m), m);
}

TEST(Matmul, RowTimesColumn) {
  const Tensor r = matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(r[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] and [2x3]"), std::string::npos);
  }
}

TEST(Matmul, MatchesTripleLoopOnRandomShapes) {
  Rng rng(11);
  {
    const Tensor a = testing::random_tensor({5, 7}, rng), b = testing::random_tensor({7, 3}, rng);
    const auto ref = testing::naive_matmul(a.values(), b.values(), 5, 7, 3);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
  }
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(16), k = 1 + rng.below(16), n = 1 + rng.below(16);
    const Tensor a = testing::random_tensor({m, k}, rng), b = testing::random_tensor({k, n}, rng);
    const auto ref = testing::naive_matmul(a.values(), b.values(), m, k, n);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_LE(std::abs(c[i] - ref[i]), 1e-12 * std::max(1.0, std::abs(ref[i])));
    }
  }
}

TEST(MapTanh, KnownValues) {
  EXPECT_EQ(map_tanh(Tensor::vector({0, 0, 0})), Tensor::vector({0, 0, 0}));
  EXPECT_NEAR(map_tanh(Tensor::vector({1e6}))[0], 1.0, 1e-15);
  // 40-digit reference: tanh(0.5) = 0.46211715726000975850...
  EXPECT_NEAR(map_tanh(Tensor::vector({0.5}))[0], 0.4621171572600097585, 1e-15);
}

TEST(MapTanh, OutputBounded) {
  Rng rng(3);
  const Tensor x = testing::random_tensor({200}, rng, -50.0, 50.0);
  for (double v : map_tanh(x).values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Softmax, SymmetricAndShiftInvariant) {
  const Tensor a = softmax(Tensor::vector({0, 0}));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  const Tensor b = softmax(Tensor::vector({1000, 1000, 1000}));
  for (double v : b.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, MatchesExtendedPrecision) {
  const Tensor p = softmax(Tensor::vector({1, 2, 3}));
  EXPECT_NEAR(p[0], 0.09003057317038045800, 1e-15);
  EXPECT_NEAR(p[1], 0.24472847105479765247, 1e-15);
  EXPECT_NEAR(p[2], 0.66524095577482188953, 1e-15);
}

TEST(Softmax, SumsToOneForRandomLogits) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    const Tensor p = softmax(testing::random_tensor({n}, rng, -500.0, 500.0));
    double s = 0.0;
    for (double v : p.values()) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, Values) {
  EXPECT_LE(cross_entropy(Tensor::vector({1, 0}), 0), 1e-11);
  EXPECT_GE(cross_entropy(Tensor::vector({1, 0}), 0), 0.0);
  EXPECT_NEAR(cross_entropy(Tensor::vector({0.5, 0.5}), 1), 0.69314718055994530942, 1e-11);
  EXPECT_NEAR(cross_entropy(Tensor::vector({0.2, 0.3, 0.5}), 0), 1.6094379124341003746, 1e-11);
}

TEST(CrossEntropy, LabelOutOfRange) {
  EXPECT_THROW(cross_entropy(Tensor::vector({0.5, 0.5}), 2), IndexError);
}

}  // namespace
}  // namespace nodetl
