#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "patchlens/error.hpp"
#include "patchlens/ops.hpp"
#include "patchlens/tensor.hpp"

namespace patchlens {
namespace {

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  const Tensor<float> t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
}

TEST(Tensor, FactoriesAndItem) {
  EXPECT_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
  const auto z = Tensor<float>::zeros({4});
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
  const auto f = Tensor<float>::full({2, 2}, 3.0f);
  for (float v : f.data()) EXPECT_EQ(v, 3.0f);
  EXPECT_THROW(f.item(), UsageError);
}

TEST(Tensor, CopiesAliasAndDetachCopies) {
  Tensor<float> a({2}, {1.0f, 2.0f}, true);
  Tensor<float> alias = a;
  alias.mutable_data()[0] = 5.0f;
  EXPECT_EQ(a.data()[0], 5.0f);
  Tensor<float> d = a.detach();
  d.mutable_data()[1] = 9.0f;
  EXPECT_EQ(a.data()[1], 2.0f);
  EXPECT_FALSE(d.requires_grad());
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> x({2, 3, 2}, std::vector<double>(12, 0.7), true);
  backward(sum(x));
  ASSERT_TRUE(x.has_grad());
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor<double> x({3}, {1, 2, 3}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), UsageError);
}

TEST(Backward, RepeatedCallsAccumulateLeafGrads) {
  Tensor<double> a({2, 2}, {0.3, -1.2, 0.5, 2.0}, true);
  Tensor<double> b({2, 2}, {1.5, 0.1, -0.4, 0.9}, true);
  const auto loss = sum(matmul(a, b));
  backward(loss);
  const std::vector<double> once(a.grad().begin(), a.grad().end());
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(a.grad()[i], 2.0 * once[i]);
  a.zero_grad();
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(a.grad()[i], once[i]);
}

TEST(Backward, SharedSubexpressionGetsBothPaths) {
  Tensor<double> x({1}, {3.0}, true);
  const auto y = add(x, x);  // dy/dx = 2
  backward(sum(add(y, y)));  // d/dx = 4
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(NoGrad, SuppressesTape) {
  Tensor<float> x({2}, {1.0f, 2.0f}, true);
  Tensor<float> y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = scale(x, 3.0f);
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(CheckedMode, SurfacesNonFiniteValues) {
  const float inf = std::numeric_limits<float>::infinity();
  Tensor<float> x({2}, {1.0f, inf});
  EXPECT_NO_THROW(scale(x, 1.0f));
  CheckedModeGuard on(true);
  EXPECT_THROW(scale(x, 1.0f), NumericError);
  Tensor<float> big({1}, {3e38f});
  EXPECT_THROW(scale(big, 10.0f), NumericError);
}

}  // namespace
}  // namespace patchlens
