#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "patchlens/tensor.hpp"

namespace patchlens::testing {

struct GradMismatch {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Relative error with an absolute floor so near-zero derivatives compare
/// on an absolute scale.
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares reverse-mode gradients of `f` with central differences for every
/// element of every input. Returns the worst relative error.
inline double max_grad_error(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                             double h = 1e-5, GradMismatch* worst = nullptr) {
  for (auto& in : inputs) in.zero_grad();
  backward(f());
  double max_err = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto data = inputs[i].mutable_data();
    const std::vector<double> analytic(inputs[i].grad().begin(), inputs[i].grad().end());
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + h;
      const double up = f().item();
      data[j] = saved - h;
      const double down = f().item();
      data[j] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = rel_error(analytic[j], numeric);
      if (err > max_err) {
        max_err = err;
        if (worst) *worst = {i, j, analytic[j], numeric};
      }
    }
  }
  return max_err;
}

}  // namespace patchlens::testing
