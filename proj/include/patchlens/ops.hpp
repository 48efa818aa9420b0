#pragma once

#include <span>

#include "patchlens/tensor.hpp"

namespace patchlens {

// Differentiable ops. Shapes are checked eagerly and mismatches raise
// DimensionError naming the offending shapes. Every op records a backward
// rule when grad mode is on and any input requires grad.

/// [m x k] * [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise sum of two tensors of identical shape.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Adds a [n] bias to every row of an [m x n] matrix.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

/// x * w + bias with x [m x k], w [k x n], bias [n]; one node instead of
/// matmul followed by add_bias.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// x * factor, elementwise.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Same data viewed under a new shape with equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gamma + beta,
/// with the biased variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

/// Softmax along `axis` (negative counts from the end), max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

/// Tanh-approximated GELU:
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
T gelu_scalar(T x);

template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Mean over the batch of -log softmax(logits)[label]. labels[i] in [0, C).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Multi-head scaled dot-product attention over `batch` independent
/// sequences of `tokens` rows each. q, k, v: [batch*tokens x d]; head h uses
/// columns [h*d/heads, (h+1)*d/heads). No masking.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t batch, std::size_t tokens, std::size_t heads);

/// Builds the token sequence for each image: row 0 is `cls`, rows 1..P are
/// the image's patch embeddings; `pos` [P+1 x d] is added to every sequence.
/// patch_emb: [batch*P x d] -> [batch*(P+1) x d].
template <typename T>
Tensor<T> embed_tokens(const Tensor<T>& patch_emb, const Tensor<T>& cls, const Tensor<T>& pos,
                       std::size_t batch);

/// Selects rows of an [n x d] matrix.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

}  // namespace patchlens
