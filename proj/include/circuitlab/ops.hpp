#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "circuitlab/tensor.hpp"

namespace circuitlab {

/// Flat index list shared between an op and its adjoint. Entries of -1 mean
/// "no source" for gather (yields 0) and "drop" for scatter_add.
using IndexList = std::shared_ptr<const std::vector<std::int32_t>>;

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float offset);
Tensor square(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
/// max(a, floor); the gradient is zero wherever the floor is active.
Tensor clamp_min(const Tensor& a, float floor);
/// a * c for a constant per-element factor (the adjoint of itself).
Tensor mul_const(const Tensor& a, std::shared_ptr<const std::vector<float>> factor);

// Reductions and re-indexing.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor gather(const Tensor& a, IndexList index, Shape out_shape);
Tensor scatter_add(const Tensor& a, IndexList index, Shape out_shape);
/// [N,C,H,W] -> [N,1,H,W]
Tensor select_channel(const Tensor& a, int channel);
/// [N,C,H,W] -> [C], summing over N, H, W.
Tensor channel_sum(const Tensor& a);
/// [C] -> shape (rank 4, dim 1 == C), broadcasting along N, H, W.
Tensor channel_expand(const Tensor& a, const Shape& shape);
/// [A, ...] -> [A], mean over all trailing axes.
Tensor row_mean(const Tensor& a);
/// 1-D gather.
Tensor index_select(const Tensor& a, const std::vector<int>& index);

// Layers.

/// Cross-correlation with zero padding. `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding);
/// Adjoint of conv2d with respect to its input (a transposed convolution).
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         int stride, int padding);
/// Adjoint of conv2d with respect to its kernel.
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          int stride, int padding);
/// Windows must tile exactly. Gradient goes to the first maximal element of
/// each window in row-major order.
Tensor maxpool2d(const Tensor& input, int window, int stride);
/// [N,D] x [O,D] + [O] -> [N,O]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Mean over rows of -sum_k target[k] * log_softmax(logits)[k]. Targets are
/// rows of a probability distribution. Once-differentiable.
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& target_probs);

/// Row-wise softmax of a [N,K] tensor as plain values (no graph).
Tensor softmax_rows(const Tensor& logits);

}  // namespace circuitlab
