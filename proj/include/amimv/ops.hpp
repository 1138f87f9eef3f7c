#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "amimv/tape.hpp"
#include "amimv/tensor.hpp"

// Differentiable tensor operations. Every function here records itself on the
// active tape when gradients are enabled and any input requires a gradient.
// Binary operations require matching dtypes.
namespace amimv::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

/// x[N, F, ...] + bias[F], broadcast over every axis except axis 1.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

/// Reductions over every element; result has shape [].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum over the trailing axis: [..., n] -> [...].
Tensor sum_last(const Tensor& x);

/// [m, k] x [k, n] -> [m, n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// 2-D transpose.
Tensor transpose(const Tensor& a);

/// Cross-correlation of input[N, C, H, W] with kernel[F, C, kh, kw], zero
/// padded. Output extents are floor((H + 2p - kh) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding);

/// Non-overlapping average pooling (stride equals the window); trailing
/// rows/columns that do not fill a window are dropped.
Tensor avg_pool2d(const Tensor& input, std::size_t kernel_h, std::size_t kernel_w);
inline Tensor avg_pool2d(const Tensor& input, std::size_t kernel) {
  return avg_pool2d(input, kernel, kernel);
}

/// Group normalization of x[N, C, ...] with per-channel affine gamma, beta.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::size_t groups, double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
inline Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

/// Selects rows (entries along axis 0) by index; repeats allowed.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
/// Rows [begin, begin + count).
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);

/// Scales each trailing-axis slice by 1 / max(norm, epsilon).
Tensor l2_normalize(const Tensor& x, double epsilon = 1e-12);

/// Max-shifted log-sum-exp over the trailing axis: [..., n] -> [...].
Tensor logsumexp(const Tensor& x);

}  // namespace amimv::ops
