#include "kml/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kernels.hpp"

namespace kml {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(a.shape()));
}

template <typename F>
std::vector<double> map_values(const Tensor& a, F f) {
  auto in = a.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return out;
}

template <typename F>
std::vector<double> zip_values(const Tensor& a, const Tensor& b, F f) {
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
  return out;
}

Precision prec(const Tensor& a) { return a.precision(); }
Precision prec(const Tensor& a, const Tensor& b) {
  return (a.precision() == Precision::f32 || b.precision() == Precision::f32) ? Precision::f32
                                                                              : Precision::f64;
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return make_result(a.shape(), zip_values(a, b, [](double x, double y) { return x + y; }),
                     prec(a, b), {a, b},
                     [](const Tensor& g) { return std::vector<Tensor>{g, g}; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return make_result(a.shape(), zip_values(a, b, [](double x, double y) { return x - y; }),
                     prec(a, b), {a, b},
                     [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return make_result(a.shape(), zip_values(a, b, [](double x, double y) { return x * y; }),
                     prec(a, b), {a, b},
                     [a, b](const Tensor& g) {
                       return std::vector<Tensor>{mul(g, b), mul(g, a)};
                     },
                     "mul");
}

Tensor scale(const Tensor& a, double factor) {
  return make_result(a.shape(), map_values(a, [factor](double x) { return x * factor; }), prec(a),
                     {a},
                     [factor](const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; },
                     "scale");
}

Tensor add_scalar(const Tensor& a, double offset) {
  return make_result(a.shape(), map_values(a, [offset](double x) { return x + offset; }), prec(a),
                     {a}, [](const Tensor& g) { return std::vector<Tensor>{g}; }, "add_scalar");
}

Tensor neg(const Tensor& a) {
  return make_result(a.shape(), map_values(a, [](double x) { return -x; }), prec(a), {a},
                     [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; }, "neg");
}

Tensor relu(const Tensor& a) {
  // NaN passes through so divergence stays visible downstream.
  auto out = map_values(a, [](double x) { return x > 0.0 || std::isnan(x) ? x : 0.0; });
  return make_result(a.shape(), std::move(out), prec(a), {a},
                     [a](const Tensor& g) {
                       Tensor mask = Tensor::from_values(
                           a.shape(), map_values(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; }),
                           a.precision());
                       return std::vector<Tensor>{mul(g, mask)};
                     },
                     "relu");
}

Tensor exp(const Tensor& a) {
  return make_result(a.shape(), map_values(a, [](double x) { return std::exp(x); }), prec(a), {a},
                     [a](const Tensor& g) { return std::vector<Tensor>{mul(g, exp(a))}; }, "exp");
}

Tensor cast(const Tensor& a, Precision precision) {
  const Precision from = a.precision();
  return make_result(a.shape(), std::vector<double>(a.values().begin(), a.values().end()),
                     precision, {a},
                     [from](const Tensor& g) { return std::vector<Tensor>{cast(g, from)}; },
                     "cast");
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto v = a.values();
  auto total = kernels::dispatch(prec(a), [&](auto tag) {
    using T = decltype(tag);
    T acc = 0;
    for (double x : v) acc += static_cast<T>(x);
    return std::vector<T>{acc};
  });
  Shape shape = a.shape();
  return make_result({}, std::move(total), prec(a), {a},
                     [shape](const Tensor& g) { return std::vector<Tensor>{expand(g, shape)}; },
                     "sum");
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor expand(const Tensor& scalar, const Shape& shape) {
  require(scalar.numel() == 1, "expand: source must hold one element");
  return make_result(shape, std::vector<double>(shape_numel(shape), scalar.values()[0]),
                     prec(scalar), {scalar},
                     [src = scalar.shape()](const Tensor& g) {
                       return std::vector<Tensor>{reshape(sum(g), src)};
                     },
                     "expand");
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes size");
  if (shape == a.shape()) return a;
  return make_result(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()),
                     prec(a), {a},
                     [src = a.shape()](const Tensor& g) {
                       return std::vector<Tensor>{reshape(g, src)};
                     },
                     "reshape");
}

Tensor slice(const Tensor& a, std::size_t offset, std::size_t length) {
  require_rank(a, 1, "slice");
  require(length > 0 && offset + length <= a.numel(), "slice: window out of range");
  auto v = a.values();
  std::vector<double> out(v.begin() + offset, v.begin() + offset + length);
  const std::size_t total = a.numel();
  return make_result({length}, std::move(out), prec(a), {a},
                     [offset, total](const Tensor& g) {
                       return std::vector<Tensor>{pad(g, offset, total)};
                     },
                     "slice");
}

Tensor pad(const Tensor& a, std::size_t offset, std::size_t total) {
  require_rank(a, 1, "pad");
  require(offset + a.numel() <= total, "pad: window out of range");
  std::vector<double> out(total, 0.0);
  std::copy(a.values().begin(), a.values().end(), out.begin() + offset);
  const std::size_t length = a.numel();
  return make_result({total}, std::move(out), prec(a), {a},
                     [offset, length](const Tensor& g) {
                       return std::vector<Tensor>{slice(g, offset, length)};
                     },
                     "pad");
}

// ---- matrices ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
  const Precision p = prec(a, b);
  auto out = kernels::dispatch(p, [&](auto tag) {
    using T = decltype(tag);
    auto av = kernels::narrow<T>(a.values());
    auto bv = kernels::narrow<T>(b.values());
    std::vector<T> c(m * n, T(0));
    kernels::matmul(av.data(), bv.data(), c.data(), m, k, n);
    return c;
  });
  return make_result({m, n}, std::move(out), p, {a, b},
                     [a, b](const Tensor& g) {
                       return std::vector<Tensor>{matmul(g, transpose(b)),
                                                  matmul(transpose(a), g)};
                     },
                     "matmul");
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  auto v = a.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return make_result({c, r}, std::move(out), prec(a), {a},
                     [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; },
                     "transpose");
}

Tensor sum_rows(const Tensor& a) {
  require_rank(a, 2, "sum_rows");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  auto v = a.values();
  auto out = kernels::dispatch(prec(a), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> acc(c, T(0));
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) acc[j] += static_cast<T>(v[i * c + j]);
    return acc;
  });
  return make_result({c}, std::move(out), prec(a), {a},
                     [r](const Tensor& g) { return std::vector<Tensor>{broadcast_rows(g, r)}; },
                     "sum_rows");
}

Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  require_rank(v, 1, "broadcast_rows");
  const std::size_t c = v.numel();
  std::vector<double> out(rows * c);
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(v.values().begin(), v.values().end(), out.begin() + i * c);
  return make_result({rows, c}, std::move(out), prec(v), {v},
                     [](const Tensor& g) { return std::vector<Tensor>{sum_rows(g)}; },
                     "broadcast_rows");
}

Tensor sum_cols(const Tensor& a) {
  require_rank(a, 2, "sum_cols");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  auto v = a.values();
  auto out = kernels::dispatch(prec(a), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> acc(r, T(0));
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) acc[i] += static_cast<T>(v[i * c + j]);
    return acc;
  });
  return make_result({r}, std::move(out), prec(a), {a},
                     [c](const Tensor& g) { return std::vector<Tensor>{broadcast_cols(g, c)}; },
                     "sum_cols");
}

Tensor broadcast_cols(const Tensor& v, std::size_t cols) {
  require_rank(v, 1, "broadcast_cols");
  const std::size_t r = v.numel();
  std::vector<double> out(r * cols);
  for (std::size_t i = 0; i < r; ++i) std::fill_n(out.begin() + i * cols, cols, v.values()[i]);
  return make_result({r, cols}, std::move(out), prec(v), {v},
                     [](const Tensor& g) { return std::vector<Tensor>{sum_cols(g)}; },
                     "broadcast_cols");
}

Tensor log_softmax(const Tensor& logits) {
  require_rank(logits, 2, "log_softmax");
  const std::size_t r = logits.shape()[0], c = logits.shape()[1];
  auto v = logits.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = v.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lz;
  }
  return make_result({r, c}, std::move(out), prec(logits), {logits},
                     [logits, c](const Tensor& g) {
                       Tensor probs = exp(log_softmax(logits));
                       return std::vector<Tensor>{
                           sub(g, mul(probs, broadcast_cols(sum_cols(g), c)))};
                     },
                     "log_softmax");
}

// ---- feature maps ------------------------------------------------------------

Tensor channel_sum(const Tensor& a) {
  require_rank(a, 4, "channel_sum");
  const auto& s = a.shape();
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  auto v = a.values();
  auto out = kernels::dispatch(prec(a), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> acc(c, T(0));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = v.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc[ch] += static_cast<T>(p[i]);
      }
    return acc;
  });
  Shape shape = s;
  return make_result({c}, std::move(out), prec(a), {a},
                     [shape](const Tensor& g) {
                       return std::vector<Tensor>{channel_broadcast(g, shape)};
                     },
                     "channel_sum");
}

Tensor channel_broadcast(const Tensor& v, const Shape& shape) {
  require_rank(v, 1, "channel_broadcast");
  require(shape.size() == 4 && shape[1] == v.numel(),
          "channel_broadcast: " + shape_str(v.shape()) + " onto " + shape_str(shape));
  const std::size_t n = shape[0], c = shape[1], hw = shape[2] * shape[3];
  std::vector<double> out(n * c * hw);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::fill_n(out.begin() + (b * c + ch) * hw, hw, v.values()[ch]);
  return make_result(shape, std::move(out), prec(v), {v},
                     [](const Tensor& g) { return std::vector<Tensor>{channel_sum(g)}; },
                     "channel_broadcast");
}

Tensor spatial_sum(const Tensor& a) {
  require_rank(a, 4, "spatial_sum");
  const auto& s = a.shape();
  const std::size_t nc = s[0] * s[1], hw = s[2] * s[3];
  auto v = a.values();
  auto out = kernels::dispatch(prec(a), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> acc(nc, T(0));
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t j = 0; j < hw; ++j) acc[i] += static_cast<T>(v[i * hw + j]);
    return acc;
  });
  const std::size_t h = s[2], w = s[3];
  return make_result({s[0], s[1]}, std::move(out), prec(a), {a},
                     [h, w](const Tensor& g) {
                       return std::vector<Tensor>{spatial_expand(g, h, w)};
                     },
                     "spatial_sum");
}

Tensor spatial_expand(const Tensor& a, std::size_t height, std::size_t width) {
  require_rank(a, 2, "spatial_expand");
  const std::size_t nc = a.numel(), hw = height * width;
  std::vector<double> out(nc * hw);
  for (std::size_t i = 0; i < nc; ++i) std::fill_n(out.begin() + i * hw, hw, a.values()[i]);
  return make_result({a.shape()[0], a.shape()[1], height, width}, std::move(out), prec(a), {a},
                     [](const Tensor& g) { return std::vector<Tensor>{spatial_sum(g)}; },
                     "spatial_expand");
}

// ---- convolution ---------------------------------------------------------------

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, ConvGeometry geom) {
  require(geom.stride > 0, "conv: stride must be positive");
  const std::size_t padded = input + 2 * geom.padding;
  require(padded >= kernel, "conv: kernel " + std::to_string(kernel) +
                                " larger than padded input " + std::to_string(padded));
  return (padded - kernel) / geom.stride + 1;
}

namespace {

kernels::ConvDims conv_dims(const Shape& x, const Shape& w, ConvGeometry geom) {
  require(x.size() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x));
  require(w.size() == 4 && w[2] == w[3], "conv2d: kernel must be [Co,Ci,k,k], got " + shape_str(w));
  require(x[1] == w[1], "conv2d: input channels " + std::to_string(x[1]) +
                            " do not match kernel " + shape_str(w));
  kernels::ConvDims d{};
  d.batch = x[0];
  d.in_channels = x[1];
  d.height = x[2];
  d.width = x[3];
  d.out_channels = w[0];
  d.kernel = w[2];
  d.stride = geom.stride;
  d.padding = geom.padding;
  d.out_height = conv_output_extent(x[2], w[2], geom);
  d.out_width = conv_output_extent(x[3], w[3], geom);
  return d;
}

Shape output_shape(const kernels::ConvDims& d) {
  return {d.batch, d.out_channels, d.out_height, d.out_width};
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, ConvGeometry geom) {
  const auto d = conv_dims(input.shape(), kernel.shape(), geom);
  const Precision p = prec(input, kernel);
  auto out = kernels::dispatch(p, [&](auto tag) {
    using T = decltype(tag);
    auto x = kernels::narrow<T>(input.values());
    auto w = kernels::narrow<T>(kernel.values());
    std::vector<T> y(d.batch * d.out_channels * d.out_height * d.out_width, T(0));
    kernels::conv_forward(x.data(), w.data(), y.data(), d);
    return y;
  });
  return make_result(output_shape(d), std::move(out), p, {input, kernel},
                     [input, kernel, geom](const Tensor& g) {
                       return std::vector<Tensor>{
                           conv2d_input_grad(g, kernel, input.shape(), geom),
                           conv2d_weight_grad(input, g, kernel.shape(), geom)};
                     },
                     "conv2d");
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         ConvGeometry geom) {
  const auto d = conv_dims(input_shape, kernel.shape(), geom);
  require(grad_out.shape() == output_shape(d),
          "conv2d_input_grad: gradient shape " + shape_str(grad_out.shape()));
  const Precision p = prec(grad_out, kernel);
  auto out = kernels::dispatch(p, [&](auto tag) {
    using T = decltype(tag);
    auto gy = kernels::narrow<T>(grad_out.values());
    auto w = kernels::narrow<T>(kernel.values());
    std::vector<T> gx(shape_numel(input_shape), T(0));
    kernels::conv_input_grad(gy.data(), w.data(), gx.data(), d);
    return gx;
  });
  return make_result(input_shape, std::move(out), p, {grad_out, kernel},
                     [grad_out, kernel, geom](const Tensor& g) {
                       return std::vector<Tensor>{
                           conv2d(g, kernel, geom),
                           conv2d_weight_grad(g, grad_out, kernel.shape(), geom)};
                     },
                     "conv2d_input_grad");
}

Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          ConvGeometry geom) {
  const auto d = conv_dims(input.shape(), kernel_shape, geom);
  require(grad_out.shape() == output_shape(d),
          "conv2d_weight_grad: gradient shape " + shape_str(grad_out.shape()));
  const Precision p = prec(input, grad_out);
  auto out = kernels::dispatch(p, [&](auto tag) {
    using T = decltype(tag);
    auto x = kernels::narrow<T>(input.values());
    auto gy = kernels::narrow<T>(grad_out.values());
    std::vector<T> gw(shape_numel(kernel_shape), T(0));
    kernels::conv_weight_grad(x.data(), gy.data(), gw.data(), d);
    return gw;
  });
  return make_result(kernel_shape, std::move(out), p, {input, grad_out},
                     [input, grad_out, geom](const Tensor& g) {
                       return std::vector<Tensor>{
                           conv2d_input_grad(grad_out, g, input.shape(), geom),
                           conv2d(input, g, geom)};
                     },
                     "conv2d_weight_grad");
}

// ---- composites ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, ConvGeometry geom) {
  require(bias.rank() == 1 && bias.numel() == kernel.shape()[0],
          "conv2d: bias " + shape_str(bias.shape()) + " does not match kernel " +
              shape_str(kernel.shape()));
  return add_channel_bias(conv2d(input, kernel, geom), bias);
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "dense");
  require_rank(weight, 2, "dense");
  require(bias.rank() == 1 && bias.numel() == weight.shape()[0],
          "dense: bias " + shape_str(bias.shape()) + " does not match weight " +
              shape_str(weight.shape()));
  return add(matmul(input, transpose(weight)), broadcast_rows(bias, input.shape()[0]));
}

Tensor add_channel_bias(const Tensor& maps, const Tensor& bias) {
  return add(maps, channel_broadcast(bias, maps.shape()));
}

Tensor channel_scale(const Tensor& maps, const Tensor& factors) {
  return mul(maps, channel_broadcast(factors, maps.shape()));
}

Tensor average_pool(const Tensor& maps) {
  require_rank(maps, 4, "average_pool");
  return scale(spatial_sum(maps), 1.0 / static_cast<double>(maps.shape()[2] * maps.shape()[3]));
}

Tensor mean_rows(const Tensor& a) {
  require_rank(a, 2, "mean_rows");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.shape()[0]));
}

Tensor outer(const Tensor& u, const Tensor& v) {
  require_rank(u, 1, "outer");
  require_rank(v, 1, "outer");
  return matmul(reshape(u, {u.numel(), 1}), reshape(v, {1, v.numel()}));
}

Tensor matvec(const Tensor& w, const Tensor& v) {
  require_rank(w, 2, "matvec");
  require_rank(v, 1, "matvec");
  return reshape(matmul(w, reshape(v, {v.numel(), 1})), {w.shape()[0]});
}

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "pairwise_sq_dist");
  require_rank(b, 2, "pairwise_sq_dist");
  require(a.shape()[1] == b.shape()[1], "pairwise_sq_dist: feature widths differ");
  const std::size_t q = a.shape()[0], p = b.shape()[0];
  Tensor aa = broadcast_cols(sum_cols(mul(a, a)), p);
  Tensor bb = broadcast_rows(sum_cols(mul(b, b)), q);
  return sub(add(aa, bb), scale(matmul(a, transpose(b)), 2.0));
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t r = logits.shape()[0], c = logits.shape()[1];
  require(labels.size() == r, "softmax_cross_entropy: label count does not match rows");
  std::vector<double> onehot(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c,
            "softmax_cross_entropy: label out of range");
    onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Tensor target = Tensor::from_values({r, c}, std::move(onehot), logits.precision());
  return scale(sum(mul(log_softmax(logits), target)), -1.0 / static_cast<double>(r));
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "mse");
  Tensor d = sub(prediction, target);
  return mean(mul(d, d));
}

Tensor sgd_step(const Tensor& theta, const Tensor& grad, double lr) {
  require_same_shape(theta, grad, "sgd_step");
  // x * 1 is exact for every x, including signed zeros.
  if (lr == 0.0) return scale(theta, 1.0);
  return sub(theta, scale(grad, lr));
}

}  // namespace kml
