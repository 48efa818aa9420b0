#pragma once

#include <cstdint>
#include <functional>
#include <json.hpp>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "patchlens/image.hpp"
#include "patchlens/tensor.hpp"

namespace patchlens {

inline constexpr int kNumClasses = 10;
inline constexpr double kLayerNormEps = 1e-6;

/// Architecture of the counting ViT. The defaults are the desk-scale model:
/// a 32 px image cut into an 8x8 grid of 4 px patches, 12 pre-norm blocks.
struct ViTConfig {
  int image_px = 32;
  int patch_px = 4;
  int n_layers = 12;
  int n_heads = 4;
  int d_model = 128;
  int d_mlp = 512;
  int n_classes = kNumClasses;
  std::uint64_t seed = 0;

  int grid_side() const { return image_px / patch_px; }
  int n_patches() const { return grid_side() * grid_side(); }
  int n_tokens() const { return n_patches() + 1; }
  int patch_dim() const { return patch_px * patch_px; }

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  /// True when the two configs describe the same architecture (seed ignored).
  bool same_architecture(const ViTConfig& other) const;

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

nlohmann::json to_json(const ViTConfig& config);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
ViTConfig vit_config_from_json(const nlohmann::json& j);

template <typename T>
struct BlockParams {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;
};

/// All trainable weights. Linear maps are stored [in x out] so a layer is
/// x * W + b on row vectors.
template <typename T>
struct ViTParams {
  ViTConfig config;
  Tensor<T> patch_w, patch_b;  // [patch_dim x d_model], [d_model]
  Tensor<T> cls;               // [d_model]
  Tensor<T> pos;               // [n_tokens x d_model]
  std::vector<BlockParams<T>> blocks;
  Tensor<T> lnf_gamma, lnf_beta;
  Tensor<T> head_w, head_b;  // [d_model x n_classes], [n_classes]

  /// Parameters in canonical (checkpoint manifest) order.
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
  std::vector<Tensor<T>> list() const;
  std::size_t parameter_count() const;

  /// Deep copy with fresh tape-free leaves.
  ViTParams clone() const;

  template <typename U>
  ViTParams<U> cast() const;
};

/// Seeded init: truncated normal (sigma 0.02) for embeddings and projections,
/// zeros for biases and layer-norm betas, ones for layer-norm gammas.
template <typename T>
ViTParams<T> init_params(const ViTConfig& config);

/// Residual-stream snapshot of one forward pass. state(l, i) is token i
/// entering block l; l == n_layers is the state after the last block, before
/// the final layer norm. Token 0 is CLS, tokens 1.. are patches row-major.
template <typename T>
class ActivationCache {
 public:
  ActivationCache() = default;
  explicit ActivationCache(const ViTConfig& config);

  const ViTConfig& config() const { return config_; }
  std::size_t n_layers() const { return static_cast<std::size_t>(config_.n_layers); }
  std::size_t n_tokens() const { return static_cast<std::size_t>(config_.n_tokens()); }
  std::size_t d_model() const { return static_cast<std::size_t>(config_.d_model); }

  bool has_layer(std::size_t layer) const { return layer < present_.size() && present_[layer]; }
  bool complete() const;

  /// All tokens at one boundary, [n_tokens x d_model] row-major.
  std::span<const T> layer(std::size_t layer) const;
  std::span<const T> state(std::size_t layer, std::size_t token) const;

  void store_layer(std::size_t layer, std::span<const T> values);

 private:
  ViTConfig config_{};
  std::vector<std::vector<T>> states_;
  std::vector<bool> present_;
};

/// Overwrite `tokens` at boundary `layer` with the values in `source`.
template <typename T>
struct PatchEdit {
  int layer = 0;
  std::vector<int> tokens;
  std::shared_ptr<const ActivationCache<T>> source;
};

template <typename T>
struct PatchPlan {
  std::vector<PatchEdit<T>> edits;

  static PatchPlan single_layer(int layer, std::vector<int> tokens,
                                std::shared_ptr<const ActivationCache<T>> source);
  /// Throws PlanError if any edit is out of range or its source cache does
  /// not match `config` or lacks the edited layer.
  void validate(const ViTConfig& config) const;
};

/// Row-major flattening of the non-overlapping patch_px x patch_px blocks:
/// row p is the block at (p / grid_side, p % grid_side).
template <typename T>
Tensor<T> patchify(const Image& image, const ViTConfig& config);

/// Called with the residual stream ([batch*n_tokens x d_model]) at every
/// boundary 0..n_layers. The hook may replace the tensor.
template <typename T>
using BoundaryHook = std::function<void(std::size_t layer, Tensor<T>& residual)>;

/// Batched forward over stacked patch matrices ([batch*n_patches x
/// patch_dim]); returns logits [batch x n_classes].
template <typename T>
Tensor<T> forward_batch(const ViTParams<T>& params, const Tensor<T>& patches, std::size_t batch,
                        const BoundaryHook<T>& hook = {});

/// Stacks images into the matrix forward_batch expects.
template <typename T>
Tensor<T> stack_patches(std::span<const Image* const> images, const ViTConfig& config);

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [n_classes]
  std::optional<ActivationCache<T>> cache;
};

template <typename T>
ForwardResult<T> forward(const ViTParams<T>& params, const Image& image, bool capture);

/// forward() with the plan's edits applied at their layer boundaries. Runs
/// without recording a tape.
template <typename T>
ForwardResult<T> forward_patched(const ViTParams<T>& params, const Image& target,
                                 const PatchPlan<T>& plan, bool capture);

/// logits[class_a - 1] - logits[class_b - 1]; classes are 1-based counts.
template <typename T>
T logit_diff(std::span<const T> logits, int class_a, int class_b);

/// 1-based predicted count; ties go to the lowest class.
template <typename T>
int predicted_count(std::span<const T> logits);

}  // namespace patchlens
