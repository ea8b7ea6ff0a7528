#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "ck/tensor.hpp"

namespace ck {

// Elementwise arithmetic. Operands of add/sub/mul must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor pow_scalar(const Tensor& x, double exponent);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

// Reductions and shape plumbing.
Tensor sum(const Tensor& x);               // -> [1]
Tensor mean(const Tensor& x);              // -> [1]
Tensor expand(const Tensor& scalar, const Shape& shape);
Tensor reshape(const Tensor& x, const Shape& shape);
/// Sums everything except `axis`; result has shape [x.dim(axis)].
Tensor reduce_to_axis(const Tensor& x, std::size_t axis);
/// Adjoint of reduce_to_axis: repeats v (length shape[axis]) along all other axes.
Tensor broadcast_axis(const Tensor& v, const Shape& shape, std::size_t axis);

// Dense layers.
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& x);                // 2-D only

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// x: [N,C,H,W], w: [O,C,kH,kW] -> [N,O,oH,oW]
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dOptions opt = {});
/// Gradient of conv2d with respect to its input, as a differentiable op.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& input_shape, Conv2dOptions opt);
/// Gradient of conv2d with respect to its weight, as a differentiable op.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape, Conv2dOptions opt);

/// Non-overlapping or strided max pooling over [N,C,H,W].
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

/// out[i] = x[index[i]]; the index map is a constant of the op.
Tensor gather(const Tensor& x, std::vector<std::size_t> index, const Shape& out_shape);
/// out[index[i]] += x[i]; adjoint of gather.
Tensor scatter_add(const Tensor& x, std::vector<std::size_t> index, const Shape& out_shape);

/// Forward applies `fn` elementwise; backward passes the incoming gradient
/// through unchanged (straight-through estimator).
Tensor ste_apply(const Tensor& x, const std::function<double(double)>& fn);

/// Mean cross-entropy of row-wise softmax(logits) against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

} // namespace ck
