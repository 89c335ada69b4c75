#pragma once

#include <cstddef>

#include "mobileone/tensor.hpp"

// Raw convolution kernels. The `kernels` namespace holds the OpenMP-parallel
// versions used by the library; `reference` holds straightforward serial loops
// kept as the test oracle and the benchmark baseline. Both compute every output
// element with the same fixed summation order inside one thread, so results do
// not depend on the worker count.

namespace mobileone {

struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  std::size_t out_h = 0;
  std::size_t out_w = 0;

  static ConvGeometry make(const Shape4& input, std::size_t out_channels, std::size_t kernel,
                           std::size_t stride, std::size_t padding, std::size_t groups);

  std::size_t in_per_group() const noexcept { return in_channels / groups; }
  std::size_t out_per_group() const noexcept { return out_channels / groups; }
  Shape4 output_shape() const noexcept { return {batch, out_channels, out_h, out_w}; }
  std::size_t macs() const noexcept {
    return batch * out_channels * out_h * out_w * in_per_group() * kernel * kernel;
  }
};

/// Worker count used by the parallel kernels (OpenMP max threads, or 1 without OpenMP).
int num_threads();
void set_num_threads(int n);

namespace kernels {

/// y = conv(x, w) + bias; `bias` may be null.
template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g);

/// dx = conv^T(dy, w); dx is overwritten.
template <typename T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, const ConvGeometry& g);

/// dw = correlation of dy with x; dw is overwritten.
template <typename T>
void conv2d_backward_weight(const T* dy, const T* x, T* dw, const ConvGeometry& g);

}  // namespace kernels

namespace reference {

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g);

template <typename T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, const ConvGeometry& g);

template <typename T>
void conv2d_backward_weight(const T* dy, const T* x, T* dw, const ConvGeometry& g);

}  // namespace reference

}  // namespace mobileone
