#pragma once

// Raw loops behind the tensor ops. Templated on the accumulation type so the
// f32 path really accumulates in float.

#include <cstddef>
#include <span>
#include <vector>

#include "kml/tensor.hpp"

namespace kml::kernels {

struct ConvDims {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel, out_height, out_width;
  std::size_t stride, padding;
};

// Range of output positions o with 0 <= o*stride + tap - padding < extent.
inline void valid_range(std::size_t tap, std::size_t extent, std::size_t out_extent,
                        std::size_t stride, std::size_t padding, std::size_t& lo,
                        std::size_t& hi) {
  const long t = static_cast<long>(tap) - static_cast<long>(padding);
  const long s = static_cast<long>(stride);
  long first = 0;
  if (t < 0) first = (-t + s - 1) / s;
  long last = (static_cast<long>(extent) - 1 - t);
  last = last < 0 ? -1 : last / s;
  if (last > static_cast<long>(out_extent) - 1) last = static_cast<long>(out_extent) - 1;
  lo = static_cast<std::size_t>(first);
  hi = last < first ? lo : static_cast<std::size_t>(last + 1);
}

template <typename T>
void conv_forward(const T* x, const T* w, T* y, const ConvDims& d) {
  const std::size_t k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t co = 0; co < d.out_channels; ++co) {
      T* yp = y + (n * d.out_channels + co) * d.out_height * d.out_width;
      for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
        const T* xp = x + (n * d.in_channels + ci) * d.height * d.width;
        const T* wp = w + (co * d.in_channels + ci) * k * k;
        for (std::size_t kh = 0; kh < k; ++kh) {
          std::size_t oh_lo, oh_hi;
          valid_range(kh, d.height, d.out_height, d.stride, d.padding, oh_lo, oh_hi);
          for (std::size_t kw = 0; kw < k; ++kw) {
            std::size_t ow_lo, ow_hi;
            valid_range(kw, d.width, d.out_width, d.stride, d.padding, ow_lo, ow_hi);
            const T wv = wp[kh * k + kw];
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const std::size_t row = (oh * d.stride + kh - d.padding) * d.width + kw - d.padding;
              T* yr = yp + oh * d.out_width;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) yr[ow] += wv * xp[row + ow * d.stride];
            }
          }
        }
      }
    }
}

template <typename T>
void conv_input_grad(const T* gy, const T* w, T* gx, const ConvDims& d) {
  const std::size_t k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
      T* gxp = gx + (n * d.in_channels + ci) * d.height * d.width;
      for (std::size_t co = 0; co < d.out_channels; ++co) {
        const T* gyp = gy + (n * d.out_channels + co) * d.out_height * d.out_width;
        const T* wp = w + (co * d.in_channels + ci) * k * k;
        for (std::size_t kh = 0; kh < k; ++kh) {
          std::size_t oh_lo, oh_hi;
          valid_range(kh, d.height, d.out_height, d.stride, d.padding, oh_lo, oh_hi);
          for (std::size_t kw = 0; kw < k; ++kw) {
            std::size_t ow_lo, ow_hi;
            valid_range(kw, d.width, d.out_width, d.stride, d.padding, ow_lo, ow_hi);
            const T wv = wp[kh * k + kw];
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const std::size_t row = (oh * d.stride + kh - d.padding) * d.width + kw - d.padding;
              const T* yr = gyp + oh * d.out_width;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) gxp[row + ow * d.stride] += wv * yr[ow];
            }
          }
        }
      }
    }
}

template <typename T>
void conv_weight_grad(const T* x, const T* gy, T* gw, const ConvDims& d) {
  const std::size_t k = d.kernel;
  for (std::size_t co = 0; co < d.out_channels; ++co)
    for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
      T* gwp = gw + (co * d.in_channels + ci) * k * k;
      for (std::size_t kh = 0; kh < k; ++kh) {
        std::size_t oh_lo, oh_hi;
        valid_range(kh, d.height, d.out_height, d.stride, d.padding, oh_lo, oh_hi);
        for (std::size_t kw = 0; kw < k; ++kw) {
          std::size_t ow_lo, ow_hi;
          valid_range(kw, d.width, d.out_width, d.stride, d.padding, ow_lo, ow_hi);
          T acc = 0;
          for (std::size_t n = 0; n < d.batch; ++n) {
            const T* xp = x + (n * d.in_channels + ci) * d.height * d.width;
            const T* gyp = gy + (n * d.out_channels + co) * d.out_height * d.out_width;
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const std::size_t row = (oh * d.stride + kh - d.padding) * d.width + kw - d.padding;
              const T* yr = gyp + oh * d.out_width;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) acc += yr[ow] * xp[row + ow * d.stride];
            }
          }
          gwp[kh * k + kw] = acc;
        }
      }
    }
}

// C[m,n] = A[m,k] B[k,n]
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* cr = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

template <typename T>
std::vector<T> narrow(std::span<const double> v) {
  return std::vector<T>(v.begin(), v.end());
}

template <typename T>
std::vector<double> widen(const std::vector<T>& v) {
  return std::vector<double>(v.begin(), v.end());
}

// Runs fn<T>() with T = float or double by precision; fn returns vector<T>.
template <typename Fn>
std::vector<double> dispatch(Precision precision, Fn&& fn) {
  if (precision == Precision::f32) return widen(fn(float{}));
  return fn(double{});
}

}  // namespace kml::kernels
