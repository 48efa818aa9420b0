#include <gtest/gtest.h>

#include <cmath>

#include "patchlens/adam.hpp"
#include "patchlens/error.hpp"
#include "patchlens/ops.hpp"

namespace patchlens {
namespace {

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
  Tensor<float> w({3}, {1.0f, -2.0f, 0.5f}, true);
  w.mutable_grad();  // explicit zeros
  std::vector<Tensor<float>> params{w};
  auto state = AdamState<float>::for_params(params);
  adam_step<float>(params, state, {});
  EXPECT_EQ(state.t, 1);
  EXPECT_EQ(w.data()[0], 1.0f);
  EXPECT_EQ(w.data()[1], -2.0f);
  EXPECT_EQ(w.data()[2], 0.5f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {1e-3, 0.5, -7.0}) {
    Tensor<double> w({1}, {0.0}, true);
    w.mutable_grad()[0] = g;
    std::vector<Tensor<double>> params{w};
    auto state = AdamState<double>::for_params(params);
    adam_step<double>(params, state, AdamOptions{0.01});
    EXPECT_NEAR(w.data()[0], -0.01 * (g > 0 ? 1 : -1), 1e-6) << "g=" << g;
  }
}

TEST(Adam, QuadraticConvergesAndMatchesScalarRecursion) {
  Tensor<double> w({1}, {1.0}, true);
  Adam<double> opt({w}, AdamOptions{0.1});
  double ref = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    opt.zero_grad();
    backward(sum(matmul(reshape(w, {1, 1}), reshape(w, {1, 1}))));  // f = w^2
    opt.step();
    const double g = 2.0 * ref;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    ref -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  }
  EXPECT_EQ(opt.state().t, 100);
  EXPECT_NEAR(w.data()[0], ref, 1e-12);
  EXPECT_LT(std::abs(w.data()[0]), 0.1);
}

TEST(Adam, ShapeMismatchIsDimensionError) {
  Tensor<float> a({2}, {1.0f, 2.0f}, true);
  Tensor<float> b({3}, {1.0f, 2.0f, 3.0f}, true);
  std::vector<Tensor<float>> one{a};
  auto state = AdamState<float>::for_params(one);
  std::vector<Tensor<float>> other{b};
  EXPECT_THROW(adam_step<float>(other, state, {}), DimensionError);
  std::vector<Tensor<float>> two{a, b};
  EXPECT_THROW(adam_step<float>(two, state, {}), DimensionError);
}

TEST(Adam, DefaultsAreStandard) {
  const AdamOptions o;
  EXPECT_EQ(o.lr, 3e-4);
  EXPECT_EQ(o.beta1, 0.9);
  EXPECT_EQ(o.beta2, 0.999);
  EXPECT_EQ(o.eps, 1e-8);
}

}  // namespace
}  // namespace patchlens
