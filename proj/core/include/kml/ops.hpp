#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kml/tensor.hpp"

// Differentiable primitives. Every backward is expressed through these same
// ops, so gradients can be differentiated again.
namespace kml {

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
// Rounds to the target precision; gradient passes straight through.
Tensor cast(const Tensor& a, Precision precision);

// Whole-tensor reduction to rank 0 and its adjoint.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor expand(const Tensor& scalar, const Shape& shape);

Tensor reshape(const Tensor& a, Shape shape);

// 1-D window [offset, offset + length) and its adjoint (zero padding).
Tensor slice(const Tensor& a, std::size_t offset, std::size_t length);
Tensor pad(const Tensor& a, std::size_t offset, std::size_t total);

// Matrices.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor sum_rows(const Tensor& a);                             // [R,C] -> [C]
Tensor broadcast_rows(const Tensor& v, std::size_t rows);     // [C] -> [R,C]
Tensor sum_cols(const Tensor& a);                             // [R,C] -> [R]
Tensor broadcast_cols(const Tensor& v, std::size_t cols);     // [R] -> [R,C]
Tensor log_softmax(const Tensor& logits);                     // row-wise

// Feature maps [N,C,H,W].
Tensor channel_sum(const Tensor& a);                          // -> [C]
Tensor channel_broadcast(const Tensor& v, const Shape& shape);
Tensor spatial_sum(const Tensor& a);                          // -> [N,C]
Tensor spatial_expand(const Tensor& a, std::size_t height, std::size_t width);

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, ConvGeometry geom);

// Cross-correlation without bias: x[N,Ci,H,W] * w[Co,Ci,k,k] -> [N,Co,Ho,Wo].
Tensor conv2d(const Tensor& input, const Tensor& kernel, ConvGeometry geom);
// Adjoints of conv2d w.r.t. its input and its kernel.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         ConvGeometry geom);
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          ConvGeometry geom);

// ---- composites -----------------------------------------------------------

// y = conv(x, w) + b per output channel.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, ConvGeometry geom);
// x[N,I] W[O,I] b[O] -> [N,O].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor add_channel_bias(const Tensor& maps, const Tensor& bias);
Tensor channel_scale(const Tensor& maps, const Tensor& factors);
// Global spatial mean [N,C,H,W] -> [N,C].
Tensor average_pool(const Tensor& maps);
// Mean over rows [R,C] -> [C].
Tensor mean_rows(const Tensor& a);
// u[a] (x) v[b] -> [a,b].
Tensor outer(const Tensor& u, const Tensor& v);
// W[O,I] v[I] -> [O].
Tensor matvec(const Tensor& w, const Tensor& v);
// Squared Euclidean distances between rows: [Q,F], [P,F] -> [Q,P].
Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b);
// Mean cross-entropy of row-wise softmax against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor mse(const Tensor& prediction, const Tensor& target);
// theta - lr * g; never mutates theta.
Tensor sgd_step(const Tensor& theta, const Tensor& grad, double lr);

}  // namespace kml
