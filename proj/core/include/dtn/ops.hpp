#pragma once

// Differentiable primitives. Every op validates shapes eagerly (no implicit
// broadcasting except the explicit scalar and row-vector forms) and registers
// a backward rule when recording is active.

#include <cstddef>
#include <span>
#include <vector>

#include "dtn/tensor.hpp"

namespace dtn {

// Linear algebra
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// Elementwise, same shape
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// a[..., c] + bias[c] for every leading index; the only vector broadcast.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& bias);

// Scalar-with-tensor
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);

// Activations and pointwise maps
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
/// Exact GELU, x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T>
Tensor<T> log(const Tensor<T>& a);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);

// Reductions to a single-element tensor of shape [1]
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

// Layout
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
/// Copies the half-open range [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Gathers rows (leading index) in the given order; repeats allowed.
template <typename T>
Tensor<T> index_rows(const Tensor<T>& a, std::span<const std::size_t> rows);

/// Same-padded, stride-1 convolution on an HxWxC map.
/// weight is [k x k x Cin x Cout] with odd k; bias is [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Normalizes over the last axis, then applies gamma/beta of that extent.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// Loss primitives, each reducing to a [1] tensor.

/// sum_i w_i * BCE(sigmoid(logit_i), target_i), evaluated in log-sum-exp form.
template <typename T>
Tensor<T> bce_with_logits_sum(const Tensor<T>& logits, std::span<const T> targets,
                              std::span<const T> weights);

/// sum_r -log softmax(logits[r])[label_r] over an R x C logit matrix.
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const std::size_t> labels);

/// sum_i w_i * smoothL1_beta(pred_i - target_i).
template <typename T>
Tensor<T> smooth_l1_sum(const Tensor<T>& pred, std::span<const T> target,
                        std::span<const T> weights, T beta);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

namespace kernels {

/// c[MxN] += a[MxK] * b[KxN]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
/// c[KxN] += a[MxK]^T * b[MxN]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
/// c[MxK] += a[MxN] * b[KxN]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k);

}  // namespace kernels

}  // namespace dtn
