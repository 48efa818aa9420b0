#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "patchlens/tensor.hpp"

namespace patchlens {

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers, one pair per parameter, plus the step count.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t t = 0;

  static AdamState for_params(std::span<const Tensor<T>> params);
};

/// One bias-corrected Adam update. A parameter without a gradient buffer is
/// treated as having a zero gradient. Gradients are left untouched.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamOptions& options);

/// Convenience wrapper owning the parameter list and its state.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamOptions options);

  void step() { adam_step<T>(params_, state_, options_); }
  void zero_grad();

  const AdamState<T>& state() const { return state_; }
  AdamState<T>& state() { return state_; }
  const AdamOptions& options() const { return options_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamOptions options_;
  AdamState<T> state_;
};

extern template struct AdamState<float>;
extern template struct AdamState<double>;
extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace patchlens
