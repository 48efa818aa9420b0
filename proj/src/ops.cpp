#include "patchlens/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "patchlens/error.hpp"

namespace patchlens {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
using Node = TensorNode<T>;

template <typename T>
void check_finite(const char* op, std::span<const T> data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw NumericError(std::string(op) + " produced a non-finite value at element " +
                         std::to_string(i));
    }
  }
}

// Wraps an op output. The backward rule and parent edges are attached only
// when grad mode is on and some input requires grad.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  if (checked_mode()) check_finite<T>(op, data);
  Tensor<T> out(std::move(shape), std::move(data));
  auto& node = *out.node();
  node.op = op;
  node.is_leaf = false;
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto* in : inputs) needs_grad = needs_grad || in->requires_grad();
  }
  if (needs_grad) {
    node.requires_grad = true;
    for (const auto* in : inputs) node.parents.push_back(in->node());
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

void require_rank(const char* op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " input, got shape " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Buffer<T> out(static_cast<std::size_t>(m * n));
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  Node<T>* an = a.node().get();
  Node<T>* bn = b.node().get();
  return make_result<T>("matmul", {a.dim(0), b.dim(1)}, std::move(out), {&a, &b},
                        [an, bn, m, k, n](Node<T>& self) {
                          ConstMatMap<T> dc(self.grad.data(), m, n);
                          if (an->requires_grad) {
                            MatMap<T>(an->ensure_grad().data(), m, k).noalias() +=
                                dc * ConstMatMap<T>(bn->data.data(), k, n).transpose();
                          }
                          if (bn->requires_grad) {
                            MatMap<T>(bn->ensure_grad().data(), k, n).noalias() +=
                                ConstMatMap<T>(an->data.data(), m, k).transpose() * dc;
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Buffer<T> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  Node<T>* an = a.node().get();
  Node<T>* bn = b.node().get();
  return make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
    for (Node<T>* p : {an, bn}) {
      if (!p->requires_grad) continue;
      auto g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank("add_bias", x.shape(), 2);
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  Buffer<T> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += bd[c];
  }
  Node<T>* xn = x.node().get();
  Node<T>* bn = bias.node().get();
  return make_result<T>("add_bias", x.shape(), std::move(out), {&x, &bias},
                        [xn, bn, rows, cols](Node<T>& self) {
                          if (xn->requires_grad) {
                            auto g = xn->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (bn->requires_grad) {
                            auto g = bn->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const T* row = self.grad.data() + r * cols;
                              for (std::size_t c = 0; c < cols; ++c) g[c] += row[c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || bias.rank() != 1 ||
      bias.dim(0) != w.dim(1)) {
    throw DimensionError("linear: cannot apply weight " + shape_str(w.shape()) + " and bias " +
                         shape_str(bias.shape()) + " to " + shape_str(x.shape()));
  }
  const auto m = static_cast<Eigen::Index>(x.dim(0));
  const auto k = static_cast<Eigen::Index>(x.dim(1));
  const auto n = static_cast<Eigen::Index>(w.dim(1));
  using RowVec = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;
  Buffer<T> out(static_cast<std::size_t>(m * n));
  MatMap<T> o(out.data(), m, n);
  o.noalias() = ConstMatMap<T>(x.data().data(), m, k) * ConstMatMap<T>(w.data().data(), k, n);
  o.rowwise() += RowVec(bias.data().data(), n);
  Node<T>* xn = x.node().get();
  Node<T>* wn = w.node().get();
  Node<T>* bn = bias.node().get();
  return make_result<T>("linear", {x.dim(0), w.dim(1)}, std::move(out), {&x, &w, &bias},
                        [xn, wn, bn, m, k, n](Node<T>& self) {
                          ConstMatMap<T> dy(self.grad.data(), m, n);
                          if (xn->requires_grad) {
                            MatMap<T>(xn->ensure_grad().data(), m, k).noalias() +=
                                dy * ConstMatMap<T>(wn->data.data(), k, n).transpose();
                          }
                          if (wn->requires_grad) {
                            MatMap<T>(wn->ensure_grad().data(), k, n).noalias() +=
                                ConstMatMap<T>(xn->data.data(), m, k).transpose() * dy;
                          }
                          if (bn->requires_grad) {
                            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn->ensure_grad().data(), n) +=
                                dy.colwise().sum();
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Buffer<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  Node<T>* xn = x.node().get();
  return make_result<T>("scale", x.shape(), std::move(out), {&x}, [xn, factor](Node<T>& self) {
    auto g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Node<T>* xn = x.node().get();
  return make_result<T>("reshape", std::move(shape), Buffer<T>(x.data().begin(), x.data().end()),
                        {&x}, [xn](Node<T>& self) {
                          auto g = xn->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  Node<T>* xn = x.node().get();
  return make_result<T>("sum", {}, {total}, {&x}, [xn](Node<T>& self) {
    const T g0 = self.grad[0];
    for (T& g : xn->ensure_grad()) g += g0;
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
  }
  if (!(eps > T{0})) throw InputError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  Buffer<T> out(x.numel());
  Buffer<T> xhat(x.numel());
  Buffer<T> rstd(rows);
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * d;
    T mean{0};
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    rstd[r] = inv;
    T* xh = xhat.data() + r * d;
    T* o = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (in[c] - mean) * inv;
      o[c] = xh[c] * gd[c] + bd[c];
    }
  }
  Node<T>* xn = x.node().get();
  Node<T>* gn = gamma.node().get();
  Node<T>* bn = beta.node().get();
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const T* dy = self.grad.data();
        if (gn->requires_grad || bn->requires_grad) {
          auto dg = gn->requires_grad ? gn->ensure_grad() : std::span<T>{};
          auto db = bn->requires_grad ? bn->ensure_grad() : std::span<T>{};
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
              if (!dg.empty()) dg[c] += dy[r * d + c] * xhat[r * d + c];
              if (!db.empty()) db[c] += dy[r * d + c];
            }
          }
        }
        if (xn->requires_grad) {
          auto dx = xn->ensure_grad();
          const T* g = gn->data.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* dyr = dy + r * d;
            const T* xh = xhat.data() + r * d;
            T mean_dxh{0};
            T mean_dxh_xh{0};
            for (std::size_t c = 0; c < d; ++c) {
              const T dxh = dyr[c] * g[c];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh[c];
            }
            mean_dxh /= static_cast<T>(d);
            mean_dxh_xh /= static_cast<T>(d);
            T* dxr = dx.data() + r * d;
            for (std::size_t c = 0; c < d; ++c) {
              dxr[c] += rstd[r] * (dyr[c] * g[c] - mean_dxh - xh[c] * mean_dxh_xh);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto rank = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(static_cast<std::size_t>(i));
  for (int i = ax + 1; i < rank; ++i) inner *= x.dim(static_cast<std::size_t>(i));
  const std::size_t len = x.dim(static_cast<std::size_t>(ax));
  Buffer<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      T total{0};
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  Node<T>* xn = x.node().get();
  return make_result<T>("softmax", x.shape(), std::move(out), {&x},
                        [xn, outer, inner, len](Node<T>& self) {
                          auto dx = xn->ensure_grad();
                          const T* y = self.data.data();
                          const T* dy = self.grad.data();
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = o * len * inner + in;
                              T dot{0};
                              for (std::size_t j = 0; j < len; ++j) {
                                dot += dy[base + j * inner] * y[base + j * inner];
                              }
                              for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t idx = base + j * inner;
                                dx[idx] += y[idx] * (dy[idx] - dot);
                              }
                            }
                          }
                        });
}

template <typename T>
T gelu_scalar(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  return T{0.5} * x * (T{1} + std::tanh(c * (x + T{0.044715} * x * x * x)));
}

// The tensor version evaluates tanh through Eigen's vectorized kernel, which
// may differ from gelu_scalar in the last ulp.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using ArrMap = Eigen::Map<Arr>;
  using ConstArrMap = Eigen::Map<const Arr>;
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T a = T{0.044715};
  const auto n = static_cast<Eigen::Index>(x.numel());
  Buffer<T> out(x.numel());
  {
    ConstArrMap v(x.data().data(), n);
    ArrMap(out.data(), n) = T{0.5} * v * (T{1} + (c * (v + a * v.cube())).tanh());
  }
  Node<T>* xn = x.node().get();
  return make_result<T>("gelu", x.shape(), std::move(out), {&x}, [xn, c, a, n](Node<T>& self) {
    ConstArrMap v(xn->data.data(), n);
    ConstArrMap gy(self.grad.data(), n);
    const Arr t = (c * (v + a * v.cube())).tanh();
    ArrMap(xn->ensure_grad().data(), n) +=
        gy * (T{0.5} * (T{1} + t) + T{0.5} * v * (T{1} - t.square()) * c * (T{1} + T{3} * a * v.square()));
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
  }
  if (batch == 0) throw InputError("cross_entropy: empty batch");
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InputError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  Buffer<T> probs(logits.numel());
  const auto ld = logits.data();
  T loss{0};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = ld.data() + b * classes;
    T mx = *std::max_element(row, row + classes);
    T total{0};
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - mx);
      total += probs[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= total;
    loss += mx + std::log(total) - row[labels[b]];
  }
  loss /= static_cast<T>(batch);
  Node<T>* ln = logits.node().get();
  std::vector<int> label_copy(labels.begin(), labels.end());
  return make_result<T>(
      "cross_entropy", {}, {loss}, {&logits},
      [ln, batch, classes, probs = std::move(probs), label_copy = std::move(label_copy)](
          Node<T>& self) {
        const T g = self.grad[0] / static_cast<T>(batch);
        auto dl = ln->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < classes; ++c) {
            const T onehot = static_cast<int>(c) == label_copy[b] ? T{1} : T{0};
            dl[b * classes + c] += g * (probs[b * classes + c] - onehot);
          }
        }
      });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t batch, std::size_t tokens, std::size_t heads) {
  require_rank("attention", q.shape(), 2);
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " must match");
  }
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * tokens || heads == 0 || d % heads != 0) {
    throw DimensionError("attention: shape " + shape_str(q.shape()) + " incompatible with " +
                         std::to_string(batch) + " sequences of " + std::to_string(tokens) +
                         " tokens and " + std::to_string(heads) + " heads");
  }
  const auto t = static_cast<Eigen::Index>(tokens);
  const auto dh = static_cast<Eigen::Index>(d / heads);
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  Buffer<T> out(q.numel());
  Buffer<T> probs(batch * heads * tokens * tokens);
  RowMat<T> scores(t, t);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * tokens * d + h * static_cast<std::size_t>(dh);
      ConstStridedMap<T> qh(q.data().data() + off, t, dh, stride);
      ConstStridedMap<T> kh(k.data().data() + off, t, dh, stride);
      ConstStridedMap<T> vh(v.data().data() + off, t, dh, stride);
      scores.noalias() = (qh * kh.transpose()) * inv_sqrt;
      MatMap<T> p(probs.data() + (b * heads + h) * tokens * tokens, t, t);
      p = (scores.colwise() - scores.rowwise().maxCoeff()).array().exp().matrix();
      p.array().colwise() /= p.rowwise().sum().array();
      StridedMap<T>(out.data() + off, t, dh, stride).noalias() = p * vh;
    }
  }
  Node<T>* qn = q.node().get();
  Node<T>* kn = k.node().get();
  Node<T>* vn = v.node().get();
  return make_result<T>(
      "attention", q.shape(), std::move(out), {&q, &k, &v},
      [qn, kn, vn, batch, heads, tokens, d, t, dh, inv_sqrt,
       probs = std::move(probs)](Node<T>& self) {
        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
        T* dq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
        T* dk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
        T* dv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
        RowMat<T> dp(t, t);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * tokens * d + h * static_cast<std::size_t>(dh);
            ConstStridedMap<T> qh(qn->data.data() + off, t, dh, stride);
            ConstStridedMap<T> kh(kn->data.data() + off, t, dh, stride);
            ConstStridedMap<T> vh(vn->data.data() + off, t, dh, stride);
            ConstStridedMap<T> doh(self.grad.data() + off, t, dh, stride);
            ConstMatMap<T> p(probs.data() + (b * heads + h) * tokens * tokens, t, t);
            if (dv) StridedMap<T>(dv + off, t, dh, stride).noalias() += p.transpose() * doh;
            if (!dq && !dk) continue;
            dp.noalias() = doh * vh.transpose();
            const auto dots = (dp.cwiseProduct(p)).rowwise().sum().eval();
            dp = (p.array() * (dp.colwise() - dots).array() * inv_sqrt).matrix();
            if (dq) StridedMap<T>(dq + off, t, dh, stride).noalias() += dp * kh;
            if (dk) StridedMap<T>(dk + off, t, dh, stride).noalias() += dp.transpose() * qh;
          }
        }
      });
}

template <typename T>
Tensor<T> embed_tokens(const Tensor<T>& patch_emb, const Tensor<T>& cls, const Tensor<T>& pos,
                       std::size_t batch) {
  require_rank("embed_tokens", patch_emb.shape(), 2);
  require_rank("embed_tokens", pos.shape(), 2);
  const std::size_t d = patch_emb.dim(1);
  if (batch == 0 || patch_emb.dim(0) % batch != 0) {
    throw DimensionError("embed_tokens: " + shape_str(patch_emb.shape()) +
                         " does not split into " + std::to_string(batch) + " images");
  }
  const std::size_t patches = patch_emb.dim(0) / batch;
  const std::size_t tokens = patches + 1;
  if (cls.shape() != Shape{d} || pos.dim(0) != tokens || pos.dim(1) != d) {
    throw DimensionError("embed_tokens: cls " + shape_str(cls.shape()) + " / pos " +
                         shape_str(pos.shape()) + " inconsistent with patch embeddings " +
                         shape_str(patch_emb.shape()));
  }
  Buffer<T> out(batch * tokens * d);
  const T* pe = patch_emb.data().data();
  const T* cv = cls.data().data();
  const T* pv = pos.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* seq = out.data() + b * tokens * d;
    for (std::size_t c = 0; c < d; ++c) seq[c] = cv[c] + pv[c];
    for (std::size_t p = 0; p < patches; ++p) {
      const T* src = pe + (b * patches + p) * d;
      const T* pp = pv + (p + 1) * d;
      T* dst = seq + (p + 1) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] = src[c] + pp[c];
    }
  }
  Node<T>* en = patch_emb.node().get();
  Node<T>* cn = cls.node().get();
  Node<T>* pn = pos.node().get();
  return make_result<T>(
      "embed_tokens", {batch * tokens, d}, std::move(out), {&patch_emb, &cls, &pos},
      [en, cn, pn, batch, patches, tokens, d](Node<T>& self) {
        T* de = en->requires_grad ? en->ensure_grad().data() : nullptr;
        T* dc = cn->requires_grad ? cn->ensure_grad().data() : nullptr;
        T* dpos = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* g = self.grad.data() + b * tokens * d;
          for (std::size_t c = 0; c < d; ++c) {
            if (dc) dc[c] += g[c];
          }
          if (de) {
            for (std::size_t p = 0; p < patches; ++p) {
              T* dst = de + (b * patches + p) * d;
              const T* src = g + (p + 1) * d;
              for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
            }
          }
          if (dpos) {
            for (std::size_t i = 0; i < tokens * d; ++i) dpos[i] += g[i];
          }
        }
      });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  require_rank("gather_rows", x.shape(), 2);
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  Buffer<T> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                           shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + rows[i] * d, d, out.data() + i * d);
  }
  Node<T>* xn = x.node().get();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result<T>("gather_rows", {rows.size(), d}, std::move(out), {&x},
                        [xn, d, idx = std::move(idx)](Node<T>& self) {
                          auto dx = xn->ensure_grad();
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            for (std::size_t c = 0; c < d; ++c) {
                              dx[idx[i] * d + c] += self.grad[i * d + c];
                            }
                          }
                        });
}

#define PATCHLENS_INSTANTIATE_OPS(T)                                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> softmax(const Tensor<T>&, int);                                             \
  template T gelu_scalar(T);                                                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                               std::size_t, std::size_t, std::size_t);                           \
  template Tensor<T> embed_tokens(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                  std::size_t);                                                  \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);

PATCHLENS_INSTANTIATE_OPS(float)
PATCHLENS_INSTANTIATE_OPS(double)

}  // namespace patchlens
