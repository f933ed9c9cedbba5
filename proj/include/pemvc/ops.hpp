#pragma once

// Differentiable primitives. Shapes must match exactly except where noted:
// add_bias / linear broadcast a [cols] bias over rows, and layer_norm applies a
// per-position affine along its axis. Every other mismatch throws ShapeError
// naming both shapes.

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "pemvc/tensor.hpp"

namespace pemvc::nn {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// x[rows, cols] + b[cols]
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

/// [n, k] x [k, m] -> [n, m]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);

/// Full reductions return a scalar; the axis variants drop that axis.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> sum(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a, std::size_t axis);

template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);

/// Normalizes along `axis` then applies gamma/beta of shape [a.shape[axis]].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t axis, T eps = T(1e-5));

/// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& a);

/// x[n, in] * W[in, out] + b[out]
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// softmax(scale * Q K^T) V with Q[n, d], K[m, d], V[m, dv]. No masking.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               T scale_factor);

/// Inverted dropout. p == 0 returns the input unchanged.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, T p, std::mt19937_64& rng);

/// Mean squared error over positions where mask != 0 (all positions when no
/// mask). Throws DomainError when nothing is valid.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target,
                   const std::optional<Tensor<T>>& mask = std::nullopt);

/// Sum of squared errors over masked positions divided by `denominator`.
/// Lets a batch be processed one sample at a time while the accumulated
/// gradient equals that of the batch-level masked MSE.
template <typename T>
Tensor<T> masked_sse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask,
                     T denominator);

/// Inverse of overlapping patching: per-patch values [n_patches, patch_len]
/// are scattered to positions start = i * stride and averaged by coverage
/// count, producing [length, 1]. Every position must be covered.
template <typename T>
Tensor<T> overlap_average(const Tensor<T>& patches, std::size_t length, std::size_t stride);

}  // namespace pemvc::nn
