#include "mobileone/kernels.hpp"

#include <algorithm>
#include <cstddef>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mobileone/error.hpp"

namespace mobileone {

using index_t = std::ptrdiff_t;

ConvGeometry ConvGeometry::make(const Shape4& input, std::size_t out_channels, std::size_t kernel,
                                std::size_t stride, std::size_t padding, std::size_t groups) {
  if (groups == 0 || stride == 0 || kernel == 0) {
    throw ConfigError("conv2d: groups, stride and kernel must be positive");
  }
  if (input.c % groups != 0) {
    throw ConfigError("conv2d: input channels " + std::to_string(input.c) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (out_channels % groups != 0) {
    throw ConfigError("conv2d: output channels " + std::to_string(out_channels) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (input.h + 2 * padding < kernel) {
    throw ShapeError("conv2d", "padded height", kernel, input.h + 2 * padding);
  }
  if (input.w + 2 * padding < kernel) {
    throw ShapeError("conv2d", "padded width", kernel, input.w + 2 * padding);
  }
  ConvGeometry g;
  g.batch = input.n;
  g.in_channels = input.c;
  g.in_h = input.h;
  g.in_w = input.w;
  g.out_channels = out_channels;
  g.kernel = kernel;
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  g.out_h = (input.h + 2 * padding - kernel) / stride + 1;
  g.out_w = (input.w + 2 * padding - kernel) / stride + 1;
  return g;
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

namespace {

// Valid output-column range [lo, hi) for a kernel column offset, i.e. the
// columns whose input tap ow*stride + kw - pad lands inside [0, in_w).
struct ColumnRange {
  index_t lo;
  index_t hi;
};

inline ColumnRange valid_columns(const ConvGeometry& g, index_t kw) {
  const index_t s = static_cast<index_t>(g.stride);
  const index_t p = static_cast<index_t>(g.padding);
  const index_t in_w = static_cast<index_t>(g.in_w);
  const index_t out_w = static_cast<index_t>(g.out_w);
  index_t lo = 0;
  if (p > kw) lo = (p - kw + s - 1) / s;
  index_t hi = (in_w - 1 + p - kw) >= 0 ? (in_w - 1 + p - kw) / s + 1 : 0;
  hi = std::min(hi, out_w);
  return {lo, std::max(lo, hi)};
}

}  // namespace

namespace kernels {

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g) {
  const index_t planes = static_cast<index_t>(g.batch * g.out_channels);
  const index_t in_hw = static_cast<index_t>(g.in_h * g.in_w);
  const index_t out_hw = static_cast<index_t>(g.out_h * g.out_w);
  const index_t k = static_cast<index_t>(g.kernel);
  const index_t s = static_cast<index_t>(g.stride);
  const index_t p = static_cast<index_t>(g.padding);
  const index_t in_h = static_cast<index_t>(g.in_h);
  const index_t in_w = static_cast<index_t>(g.in_w);
  const index_t out_h = static_cast<index_t>(g.out_h);
  const index_t out_w = static_cast<index_t>(g.out_w);
  const index_t cin_pg = static_cast<index_t>(g.in_per_group());
  const index_t cout_pg = static_cast<index_t>(g.out_per_group());
  const index_t cout = static_cast<index_t>(g.out_channels);
  const index_t cin = static_cast<index_t>(g.in_channels);
  const bool pointwise = k == 1 && s == 1 && p == 0;

#pragma omp parallel for schedule(static)
  for (index_t plane = 0; plane < planes; ++plane) {
    const index_t n = plane / cout;
    const index_t co = plane % cout;
    const index_t grp = co / cout_pg;
    T* out = y + plane * out_hw;
    std::fill(out, out + out_hw, bias ? bias[co] : T{0});

    for (index_t cil = 0; cil < cin_pg; ++cil) {
      const T* in = x + (n * cin + grp * cin_pg + cil) * in_hw;
      const T* wk = w + (co * cin_pg + cil) * k * k;
      if (pointwise) {
        const T wv = wk[0];
        for (index_t i = 0; i < out_hw; ++i) out[i] += wv * in[i];
        continue;
      }
      for (index_t kh = 0; kh < k; ++kh) {
        for (index_t kw = 0; kw < k; ++kw) {
          const T wv = wk[kh * k + kw];
          const ColumnRange cols = valid_columns(g, kw);
          for (index_t oh = 0; oh < out_h; ++oh) {
            const index_t ih = oh * s + kh - p;
            if (ih < 0 || ih >= in_h) continue;
            T* orow = out + oh * out_w;
            const index_t base = ih * in_w + kw - p;
            if (s == 1) {
              for (index_t ow = cols.lo; ow < cols.hi; ++ow) orow[ow] += wv * in[base + ow];
            } else {
              for (index_t ow = cols.lo; ow < cols.hi; ++ow) orow[ow] += wv * in[base + ow * s];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, const ConvGeometry& g) {
  const index_t planes = static_cast<index_t>(g.batch * g.in_channels);
  const index_t in_hw = static_cast<index_t>(g.in_h * g.in_w);
  const index_t out_hw = static_cast<index_t>(g.out_h * g.out_w);
  const index_t k = static_cast<index_t>(g.kernel);
  const index_t s = static_cast<index_t>(g.stride);
  const index_t p = static_cast<index_t>(g.padding);
  const index_t in_h = static_cast<index_t>(g.in_h);
  const index_t in_w = static_cast<index_t>(g.in_w);
  const index_t out_h = static_cast<index_t>(g.out_h);
  const index_t out_w = static_cast<index_t>(g.out_w);
  const index_t cin_pg = static_cast<index_t>(g.in_per_group());
  const index_t cout_pg = static_cast<index_t>(g.out_per_group());
  const index_t cout = static_cast<index_t>(g.out_channels);
  const index_t cin = static_cast<index_t>(g.in_channels);

#pragma omp parallel for schedule(static)
  for (index_t plane = 0; plane < planes; ++plane) {
    const index_t n = plane / cin;
    const index_t ci = plane % cin;
    const index_t grp = ci / cin_pg;
    const index_t cil = ci % cin_pg;
    T* dxp = dx + plane * in_hw;
    std::fill(dxp, dxp + in_hw, T{0});
    for (index_t co = grp * cout_pg; co < (grp + 1) * cout_pg; ++co) {
      const T* dyp = dy + (n * cout + co) * out_hw;
      const T* wk = w + (co * cin_pg + cil) * k * k;
      for (index_t kh = 0; kh < k; ++kh) {
        for (index_t kw = 0; kw < k; ++kw) {
          const T wv = wk[kh * k + kw];
          const ColumnRange cols = valid_columns(g, kw);
          for (index_t oh = 0; oh < out_h; ++oh) {
            const index_t ih = oh * s + kh - p;
            if (ih < 0 || ih >= in_h) continue;
            const index_t base = ih * in_w + kw - p;
            const T* yrow = dyp + oh * out_w;
            for (index_t ow = cols.lo; ow < cols.hi; ++ow) dxp[base + ow * s] += wv * yrow[ow];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const T* dy, const T* x, T* dw, const ConvGeometry& g) {
  const index_t in_hw = static_cast<index_t>(g.in_h * g.in_w);
  const index_t out_hw = static_cast<index_t>(g.out_h * g.out_w);
  const index_t k = static_cast<index_t>(g.kernel);
  const index_t s = static_cast<index_t>(g.stride);
  const index_t p = static_cast<index_t>(g.padding);
  const index_t in_h = static_cast<index_t>(g.in_h);
  const index_t in_w = static_cast<index_t>(g.in_w);
  const index_t out_h = static_cast<index_t>(g.out_h);
  const index_t out_w = static_cast<index_t>(g.out_w);
  const index_t cin_pg = static_cast<index_t>(g.in_per_group());
  const index_t cout_pg = static_cast<index_t>(g.out_per_group());
  const index_t cout = static_cast<index_t>(g.out_channels);
  const index_t cin = static_cast<index_t>(g.in_channels);
  const index_t batch = static_cast<index_t>(g.batch);

#pragma omp parallel for schedule(static)
  for (index_t co = 0; co < cout; ++co) {
    const index_t grp = co / cout_pg;
    for (index_t cil = 0; cil < cin_pg; ++cil) {
      T* wk = dw + (co * cin_pg + cil) * k * k;
      for (index_t kh = 0; kh < k; ++kh) {
        for (index_t kw = 0; kw < k; ++kw) {
          const ColumnRange cols = valid_columns(g, kw);
          T acc{0};
          for (index_t n = 0; n < batch; ++n) {
            const T* dyp = dy + (n * cout + co) * out_hw;
            const T* in = x + (n * cin + grp * cin_pg + cil) * in_hw;
            for (index_t oh = 0; oh < out_h; ++oh) {
              const index_t ih = oh * s + kh - p;
              if (ih < 0 || ih >= in_h) continue;
              const index_t base = ih * in_w + kw - p;
              const T* yrow = dyp + oh * out_w;
              for (index_t ow = cols.lo; ow < cols.hi; ++ow) acc += yrow[ow] * in[base + ow * s];
            }
          }
          wk[kh * k + kw] = acc;
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

}  // namespace kernels
}  // namespace mobileone
