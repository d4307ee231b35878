#pragma once

// Differentiable primitives. Shapes must conform exactly; the only
// broadcasting is through the explicit expand() and bias_add() ops.

#include <cstdint>
#include <span>
#include <vector>

#include "uetrack/tensor.hpp"

namespace uetrack {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Gradient is zero outside [lo, hi].
Tensor clamp(const Tensor& x, double lo, double hi);

/// Adds `bias` (shape [N]) to every length-N row of `x` (last axis N).
Tensor bias_add(const Tensor& x, const Tensor& bias);

/// Explicit broadcast: prepends leading axes and/or repeats size-1 axes.
Tensor expand(const Tensor& x, const Shape& shape);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

// Layout.
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Half-open range [start, end) along `axis`.
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t end);
/// Rows of the flattened [N, ...] view picked by `indices` (axis 0).
Tensor index_select(const Tensor& x, std::span<const std::int64_t> indices);
/// Inverse of index_select: out[indices[i]] += src[i]; out has `rows` rows.
Tensor index_scatter(const Tensor& src, std::span<const std::int64_t> indices, std::int64_t rows);

/// Batched matrix product over the last two axes. A rank-2 operand is shared
/// across the other operand's batch axes; otherwise batch axes must match.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

/// Normalizes over the last axis; gamma/beta have shape [last].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// NHWC convolution. weight [kh, kw, C_in, C_out], bias [C_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding = 0);

/// Non-overlapping average pooling with window `kernel` along `axis`.
Tensor avg_pool1d(const Tensor& x, int kernel, int axis);

/// Forward value is exactly `hard`; the gradient is passed straight to `soft`.
Tensor straight_through(const Tensor& hard, const Tensor& soft);

}  // namespace uetrack
