#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace patchlens {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Checked mode scans every op output for NaN/Inf and throws NumericError.
// Process-wide, off by default.
bool checked_mode();
void set_checked_mode(bool enabled);

class CheckedModeGuard {
 public:
  explicit CheckedModeGuard(bool enabled = true);
  ~CheckedModeGuard();
  CheckedModeGuard(const CheckedModeGuard&) = delete;
  CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

 private:
  bool previous_;
};

// Tape recording is per thread. Inside a NoGradGuard scope ops produce plain
// values with no backward edges.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Tensor storage is 64-byte aligned. Eigen's vectorized kernels peel off an
// unaligned head before their packet loop, so the summation order (and the
// last bits of a result) would otherwise depend on where malloc put a buffer.
inline constexpr std::size_t kTensorAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kTensorAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kTensorAlignment}); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until first written
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

/// Shared handle to a dense row-major array plus its place on the gradient
/// tape. Copies alias the same node.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;
  Tensor(Shape shape, Buffer<T> data, bool requires_grad = false);
  Tensor(Shape shape, std::span<const T> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}
  Tensor(Shape shape, const std::vector<T>& data, bool requires_grad = false)
      : Tensor(std::move(shape), std::span<const T>(data), requires_grad) {}
  Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data), requires_grad) {}
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access for optimizers and initializers; must not be used on
  // tensors whose value was already consumed by a recorded op.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Value copy with no tape history and requires_grad = false.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls until zero_grad(); interior gradients are recomputed on every call.
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);

}  // namespace patchlens
