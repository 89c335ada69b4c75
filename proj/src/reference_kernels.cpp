#include <cstddef>

#include "mobileone/kernels.hpp"

// Serial, index-by-index convolution loops. No tiling, no hoisted bounds.

namespace mobileone::reference {

namespace {

using index_t = std::ptrdiff_t;

template <typename T>
T tap(const T* x, const ConvGeometry& g, index_t n, index_t ci, index_t ih, index_t iw) {
  if (ih < 0 || iw < 0 || ih >= static_cast<index_t>(g.in_h) ||
      iw >= static_cast<index_t>(g.in_w)) {
    return T{0};
  }
  return x[((n * static_cast<index_t>(g.in_channels) + ci) * static_cast<index_t>(g.in_h) + ih) *
               static_cast<index_t>(g.in_w) +
           iw];
}

}  // namespace

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g) {
  const index_t cin_pg = static_cast<index_t>(g.in_per_group());
  const index_t cout_pg = static_cast<index_t>(g.out_per_group());
  const index_t k = static_cast<index_t>(g.kernel);
  const index_t s = static_cast<index_t>(g.stride);
  const index_t p = static_cast<index_t>(g.padding);
  for (index_t n = 0; n < static_cast<index_t>(g.batch); ++n) {
    for (index_t co = 0; co < static_cast<index_t>(g.out_channels); ++co) {
      const index_t grp = co / cout_pg;
      for (index_t oh = 0; oh < static_cast<index_t>(g.out_h); ++oh) {
        for (index_t ow = 0; ow < static_cast<index_t>(g.out_w); ++ow) {
          T acc = bias ? bias[co] : T{0};
          for (index_t cil = 0; cil < cin_pg; ++cil) {
            for (index_t kh = 0; kh < k; ++kh) {
              for (index_t kw = 0; kw < k; ++kw) {
                acc += w[((co * cin_pg + cil) * k + kh) * k + kw] *
                       tap(x, g, n, grp * cin_pg + cil, oh * s + kh - p, ow * s + kw - p);
              }
            }
          }
          y[((n * static_cast<index_t>(g.out_channels) + co) * static_cast<index_t>(g.out_h) +
             oh) *
                static_cast<index_t>(g.out_w) +
            ow] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, const ConvGeometry& g) {
  const index_t cin_pg = static_cast<index_t>(g.in_per_group());
  const index_t cout_pg = static_cast<index_t>(g.out_per_group());
  const index_t k = static_cast<index_t>(g.kernel);
  const index_t s = static_cast<index_t>(g.stride);
  const index_t p = static_cast<index_t>(g.padding);
  const index_t in_h = static_cast<index_t>(g.in_h);
  const index_t in_w = static_cast<index_t>(g.in_w);
  const std::size_t total = g.batch * g.in_channels * g.in_h * g.in_w;
  for (std::size_t i = 0; i < total; ++i) dx[i] = T{0};
  // Scatter every output gradient back through the taps that produced it.
  for (index_t n = 0; n < static_cast<index_t>(g.batch); ++n) {
    for (index_t co = 0; co < static_cast<index_t>(g.out_channels); ++co) {
      const index_t grp = co / cout_pg;
      for (index_t oh = 0; oh < static_cast<index_t>(g.out_h); ++oh) {
        for (index_t ow = 0; ow < static_cast<index_t>(g.out_w); ++ow) {
          const T gy =
              dy[((n * static_cast<index_t>(g.out_channels) + co) * static_cast<index_t>(g.out_h) +
                  oh) *
                     static_cast<index_t>(g.out_w) +
                 ow];
          for (index_t cil = 0; cil < cin_pg; ++cil) {
            for (index_t kh = 0; kh < k; ++kh) {
              for (index_t kw = 0; kw < k; ++kw) {
                const index_t ih = oh * s + kh - p;
                const index_t iw = ow * s + kw - p;
                if (ih < 0 || iw < 0 || ih >= in_h || iw >= in_w) continue;
                const index_t ci = grp * cin_pg + cil;
                dx[((n * static_cast<index_t>(g.in_channels) + ci) * in_h + ih) * in_w + iw] +=
                    w[((co * cin_pg + cil) * k + kh) * k + kw] * gy;
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const T* dy, const T* x, T* dw, const ConvGeometry& g) {
  const index_t cin_pg = static_cast<index_t>(g.in_per_group());
  const index_t cout_pg = static_cast<index_t>(g.out_per_group());
  const index_t k = static_cast<index_t>(g.kernel);
  const index_t s = static_cast<index_t>(g.stride);
  const index_t p = static_cast<index_t>(g.padding);
  for (index_t co = 0; co < static_cast<index_t>(g.out_channels); ++co) {
    const index_t grp = co / cout_pg;
    for (index_t cil = 0; cil < cin_pg; ++cil) {
      for (index_t kh = 0; kh < k; ++kh) {
        for (index_t kw = 0; kw < k; ++kw) {
          T acc{0};
          for (index_t n = 0; n < static_cast<index_t>(g.batch); ++n) {
            for (index_t oh = 0; oh < static_cast<index_t>(g.out_h); ++oh) {
              for (index_t ow = 0; ow < static_cast<index_t>(g.out_w); ++ow) {
                const T gy = dy[((n * static_cast<index_t>(g.out_channels) + co) *
                                     static_cast<index_t>(g.out_h) +
                                 oh) *
                                    static_cast<index_t>(g.out_w) +
                                ow];
                acc += gy * tap(x, g, n, grp * cin_pg + cil, oh * s + kh - p, ow * s + kw - p);
              }
            }
          }
          dw[((co * cin_pg + cil) * k + kh) * k + kw] = acc;
        }
      }
    }
  }
}

template void conv2d_forward<float>(const float*, const float*, const float*, float*,
                                    const ConvGeometry&);
template void conv2d_forward<double>(const double*, const double*, const double*, double*,
                                     const ConvGeometry&);
template void conv2d_backward_input<float>(const float*, const float*, float*, const ConvGeometry&);
template void conv2d_backward_input<double>(const double*, const double*, double*,
                                            const ConvGeometry&);
template void conv2d_backward_weight<float>(const float*, const float*, float*,
                                            const ConvGeometry&);
template void conv2d_backward_weight<double>(const double*, const double*, double*,
                                             const ConvGeometry&);

}  // namespace mobileone::reference
