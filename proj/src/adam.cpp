#include "patchlens/adam.hpp"

#include <cmath>
#include <string>

#include "patchlens/error.hpp"

namespace patchlens {

template <typename T>
AdamState<T> AdamState<T>::for_params(std::span<const Tensor<T>> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.numel(), T{0});
    state.v.emplace_back(p.numel(), T{0});
  }
  return state;
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamOptions& options) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: moment buffers of parameter " + std::to_string(i) +
                           " do not match shape " + shape_str(params[i].shape()));
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(options.beta1);
  const T b2 = static_cast<T>(options.beta2);
  const T step = static_cast<T>(options.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(options.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) {
      // Zero gradient: moments decay, parameter still moves by the decayed
      // first moment.
      auto w = p.mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        state.m[i][j] = b1 * state.m[i][j];
        state.v[i][j] = b2 * state.v[i][j];
        w[j] -= step * state.m[i][j] / (std::sqrt(state.v[i][j]) * inv_sqrt_bc2 + eps);
      }
      continue;
    }
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      w[j] -= step * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamOptions options)
    : params_(std::move(params)),
      options_(options),
      state_(AdamState<T>::for_params(params_)) {}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template struct AdamState<float>;
template struct AdamState<double>;
template class Adam<float>;
template class Adam<double>;
template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&, const AdamOptions&);
template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&, const AdamOptions&);

}  // namespace patchlens
