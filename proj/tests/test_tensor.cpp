#include <gtest/gtest.h>

#include <cmath>

#include "muslcat/gradcheck.hpp"
#include "muslcat/layers.hpp"
#include "muslcat/tensor.hpp"
#include "test_util.hpp"

using namespace muslcat;
using muslcat::testing::random_tensor;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const Tensor m = random_tensor({3, 4}, 1);
  EXPECT_EQ(matmul(eye, m), m);
}

TEST(Matmul, HandArithmetic) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{1}, {1}});
  EXPECT_EQ(matmul(a, b), Tensor::matrix({{3}, {7}}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  const Tensor a = random_tensor({4, 5}, 2);
  const Tensor b = random_tensor({5, 6}, 3);
  EXPECT_LT(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);

  for (std::size_t m = 1; m <= 8; ++m)
    for (std::size_t k = 1; k <= 8; k += 3)
      for (std::size_t n = 1; n <= 8; n += 2) {
        const Tensor x = random_tensor({m, k}, 100 + m * 64 + k * 8 + n);
        const Tensor y = random_tensor({k, n}, 999 + m * 64 + k * 8 + n);
        EXPECT_LT(max_abs_diff(matmul(x, y), naive_matmul(x, y)), 1e-12);
      }
}

TEST(Matmul, BatchedOverLeadingExtents) {
  const Tensor a = random_tensor({2, 3, 4, 5}, 4);
  const Tensor b = random_tensor({2, 3, 5, 2}, 5);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 4, 2}));
  for (std::size_t i = 0; i < 6; ++i) {
    const Tensor ai({4, 5}, std::vector<double>(a.data() + i * 20, a.data() + (i + 1) * 20));
    const Tensor bi({5, 2}, std::vector<double>(b.data() + i * 10, b.data() + (i + 1) * 10));
    const Tensor ci = naive_matmul(ai, bi);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(c[i * 8 + j], ci[j], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 5}));
    FAIL() << "expected throw";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4, 5)"), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformLogits) {
  const Tensor y = softmax_rows(Tensor({1, 3}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, RowsSumToOneAndAreShiftInvariant) {
  const Tensor x = random_tensor({7, 11}, 6, 5.0);
  const Tensor y = softmax_rows(x);
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 11; ++j) {
      EXPECT_GE(y[r * 11 + j], 0.0);
      s += y[r * 11 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  Tensor shifted = x;
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t j = 0; j < 11; ++j) shifted[r * 11 + j] += 3.5 * static_cast<double>(r) - 40.0;
  EXPECT_LT(max_abs_diff(softmax_rows(shifted), y), 1e-12);
}

TEST(Softmax, LargeLogitsStayFinite) {
  const Tensor y = softmax_rows(Tensor::matrix({{1000.0, 0.0, -1000.0}}));
  EXPECT_TRUE(all_finite(y));
  EXPECT_NEAR(y[0], 1.0, 1e-15);
}

TEST(Softmax, BackwardPassesGradCheck) {
  DifferentiableOp op{"softmax_rows", [](const Tensor& x) { return softmax_rows(x); },
                      [](const Tensor& x, const Tensor& dy) {
                        return softmax_rows_backward(softmax_rows(x), dy);
                      }};
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto r = finite_diff_check(op, random_tensor({2 + s, 3 + 2 * s}, 40 + s));
    EXPECT_TRUE(r.pass) << r.detail;
  }
}

TEST(FiniteDiff, LinearLayer) {
  Rng rng(11);
  Dense dense(3, 4, rng);
  DifferentiableOp op{"dense", [&](const Tensor& x) { return dense.forward(x, Mode::kEval); },
                      [&](const Tensor& x, const Tensor& dy) {
                        dense.forward(x, Mode::kEval);
                        return dense.backward(dy);
                      }};
  const auto r = finite_diff_check(op, random_tensor({2, 3}, 12), 1e-5, 1e-4);
  EXPECT_TRUE(r.pass) << r.detail;
  EXPECT_EQ(r.checked, 6u);
}

TEST(FiniteDiff, ReluAwayFromKink) {
  ReLU relu;
  DifferentiableOp op{"relu", [&](const Tensor& x) { return relu.forward(x, Mode::kEval); },
                      [&](const Tensor& x, const Tensor& dy) {
                        relu.forward(x, Mode::kEval);
                        return relu.backward(dy);
                      }};
  const auto r = finite_diff_check(op, muslcat::testing::random_away_from_zero({3, 5}, 13, 0.1));
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(FiniteDiff, ConstantFunctionHasZeroError) {
  DifferentiableOp op{"constant", [](const Tensor&) { return Tensor::ones({2, 2}); },
                      [](const Tensor& x, const Tensor&) { return Tensor(x.shape()); }};
  const auto r = finite_diff_check(op, random_tensor({4}, 14));
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(FiniteDiff, WrongGradientFails) {
  DifferentiableOp op{"square", [](const Tensor& x) { return mul(x, x); },
                      [](const Tensor& x, const Tensor& dy) { return mul(x, dy); }};
  const auto r = finite_diff_check(op, random_tensor({5}, 15));
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.pass, r.max_rel_error <= r.tolerance);
}

TEST(FiniteDiff, NonFiniteGradientReportsLocation) {
  DifferentiableOp op{"bad", [](const Tensor& x) { return x; },
                      [](const Tensor& x, const Tensor&) {
                        Tensor g(x.shape(), 1.0);
                        g[2] = std::nan("");
                        return g;
                      }};
  const auto r = finite_diff_check(op, random_tensor({4}, 16));
  EXPECT_FALSE(r.pass);
  EXPECT_NE(r.detail.find("input[2]"), std::string::npos) << r.detail;
}

TEST(TensorOps, ConcatAndSliceInvertEachOther) {
  const Tensor a = random_tensor({2, 3, 4}, 17);
  const Tensor b = random_tensor({2, 3, 2}, 18);
  const Tensor c = concat({&a, &b}, 2);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 6}));
  EXPECT_EQ(slice(c, 2, 0, 4), a);
  EXPECT_EQ(slice(c, 2, 4, 6), b);
  const Tensor d = concat({&a, &a}, 1);
  EXPECT_EQ(slice(d, 1, 3, 6), a);
}

TEST(TensorOps, CheckFiniteNamesLocation) {
  Tensor t({2, 2});
  t[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(check_finite(t, "here"), std::domain_error);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), std::invalid_argument);
}
