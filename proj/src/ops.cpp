#include "mobileone/ops.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "mobileone/kernels.hpp"

namespace mobileone {

std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " + std::to_string(s.h) +
         ", " + std::to_string(s.w) + ")";
}

template <typename T>
void ConvSpec<T>::validate() const {
  if (groups == 0 || stride == 0) throw ConfigError("ConvSpec: stride and groups must be positive");
  if (weight.h() != weight.w()) throw ShapeError("ConvSpec", "kernel width", weight.h(), weight.w());
  if (weight.h() == 0 || weight.n() == 0 || weight.c() == 0) {
    throw ConfigError("ConvSpec: empty weight " + to_string(weight.shape()));
  }
  if (weight.n() % groups != 0) {
    throw ConfigError("ConvSpec: C_out " + std::to_string(weight.n()) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (has_bias() && bias.size() != weight.n()) {
    throw ShapeError("ConvSpec", "bias length", weight.n(), bias.size());
  }
}

template <typename T>
std::size_t ConvSpec<T>::out_extent(std::size_t in) const {
  if (in + 2 * padding < kernel()) throw ShapeError("ConvSpec", "padded extent", kernel(), in + 2 * padding);
  return (in + 2 * padding - kernel()) / stride + 1;
}

template <typename T>
BNParams<T> BNParams<T>::identity(std::size_t channels, T eps) {
  BNParams bn;
  bn.mu.assign(channels, T{0});
  bn.sigma.assign(channels, T{1});
  bn.gamma.assign(channels, T{1});
  bn.beta.assign(channels, T{0});
  bn.eps = eps;
  return bn;
}

template <typename T>
T BNParams<T>::scale(std::size_t c) const {
  return gamma[c] / std::sqrt(sigma[c] * sigma[c] + eps);
}

template <typename T>
void BNParams<T>::validate() const {
  const std::size_t c = gamma.size();
  if (mu.size() != c) throw ShapeError("BNParams", "mu length", c, mu.size());
  if (sigma.size() != c) throw ShapeError("BNParams", "sigma length", c, sigma.size());
  if (beta.size() != c) throw ShapeError("BNParams", "beta length", c, beta.size());
  if (!(eps >= T{0})) throw ConfigError("BNParams: eps must be non-negative");
  for (std::size_t i = 0; i < c; ++i) {
    if (!(sigma[i] >= T{0}) || !(sigma[i] * sigma[i] + eps > T{0})) {
      throw ConfigError("BNParams: channel " + std::to_string(i) +
                        " has nonpositive sigma^2 + eps");
    }
  }
}

template <typename T>
void SEParams<T>::validate() const {
  reduce.validate();
  expand.validate();
  if (reduce.kernel() != 1 || expand.kernel() != 1) throw ConfigError("SEParams: convs must be 1x1");
  if (reduce.out_channels() != expand.in_channels()) {
    throw ShapeError("SEParams", "squeeze width", reduce.out_channels(), expand.in_channels());
  }
  if (expand.out_channels() != reduce.in_channels()) {
    throw ShapeError("SEParams", "channels", reduce.in_channels(), expand.out_channels());
  }
}

template <typename T>
void Linear<T>::validate() const {
  if (weight.size() != in_features * out_features) {
    throw ShapeError("Linear", "weight size", in_features * out_features, weight.size());
  }
  if (bias.size() != out_features) throw ShapeError("Linear", "bias length", out_features, bias.size());
}

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const ConvSpec<T>& spec) {
  spec.validate();
  if (x.c() != spec.in_channels()) throw ShapeError("conv2d", "input channels", spec.in_channels(), x.c());
  const ConvGeometry g = ConvGeometry::make(x.shape(), spec.out_channels(), spec.kernel(),
                                            spec.stride, spec.padding, spec.groups);
  Tensor4<T> y(g.output_shape());
  kernels::conv2d_forward(x.data().data(), spec.weight.data().data(),
                          spec.has_bias() ? spec.bias.data() : nullptr, y.data().data(), g);
  return y;
}

template <typename T>
Tensor4<T> batchnorm_infer(const Tensor4<T>& x, const BNParams<T>& bn) {
  bn.validate();
  if (x.c() != bn.channels()) throw ShapeError("batchnorm_infer", "channels", bn.channels(), x.c());
  Tensor4<T> y(x.shape());
  const std::size_t hw = x.shape().plane();
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T s = bn.scale(c);
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) out[i] = (in[i] - bn.mu[c]) * s + bn.beta[c];
    }
  }
  return y;
}

template <typename T>
BNTrainResult<T> batchnorm_train(const Tensor4<T>& x, const BNParams<T>& bn, T momentum) {
  bn.validate();
  if (x.c() != bn.channels()) throw ShapeError("batchnorm_train", "channels", bn.channels(), x.c());
  const std::size_t hw = x.shape().plane();
  const std::size_t count = x.n() * hw;
  if (count < 2) throw ShapeError("batchnorm_train", "elements per channel (minimum)", 2, count);

  BNTrainResult<T> r{Tensor4<T>(x.shape()), bn, {Tensor4<T>(x.shape()), std::vector<T>(x.c())}};
  for (std::size_t c = 0; c < x.c(); ++c) {
    T mean{0};
    for (std::size_t n = 0; n < x.n(); ++n) {
      const T* in = x.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) mean += in[i];
    }
    mean /= static_cast<T>(count);
    T sq{0};
    for (std::size_t n = 0; n < x.n(); ++n) {
      const T* in = x.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) sq += (in[i] - mean) * (in[i] - mean);
    }
    const T var = sq / static_cast<T>(count);
    const T inv_std = T{1} / std::sqrt(var + bn.eps);
    r.cache.inv_std[c] = inv_std;
    for (std::size_t n = 0; n < x.n(); ++n) {
      const T* in = x.plane(n, c);
      T* xh = r.cache.x_hat.plane(n, c);
      T* out = r.y.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        xh[i] = (in[i] - mean) * inv_std;
        out[i] = bn.gamma[c] * xh[i] + bn.beta[c];
      }
    }
    const T unbiased = sq / static_cast<T>(count - 1);
    const T running_var = (T{1} - momentum) * bn.sigma[c] * bn.sigma[c] + momentum * unbiased;
    r.running.mu[c] = (T{1} - momentum) * bn.mu[c] + momentum * mean;
    r.running.sigma[c] = momentum == T{0} ? bn.sigma[c] : std::sqrt(running_var);
  }
  return r;
}

template <typename T>
T sigmoid(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
Tensor4<T> relu(Tensor4<T> x) {
  for (T& v : x.data()) v = v > T{0} ? v : T{0};
  return x;
}

template <typename T>
Tensor4<T> gelu(Tensor4<T> x) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  for (T& v : x.data()) v = T(0.5) * v * (T{1} + std::tanh(k * (v + T(0.044715) * v * v * v)));
  return x;
}

template <typename T>
Tensor4<T> silu(Tensor4<T> x) {
  for (T& v : x.data()) v = v * sigmoid(v);
  return x;
}

template <typename T>
Tensor4<T> global_avgpool(const Tensor4<T>& x) {
  Tensor4<T> y({x.n(), x.c(), 1, 1});
  const std::size_t hw = x.shape().plane();
  if (hw == 0) throw ShapeError("global_avgpool", "spatial size", 1, 0);
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T* in = x.plane(n, c);
      T acc{0};
      for (std::size_t i = 0; i < hw; ++i) acc += in[i];
      y(n, c, 0, 0) = acc / static_cast<T>(hw);
    }
  }
  return y;
}

template <typename T>
Tensor4<T> se_gate(const Tensor4<T>& x, const SEParams<T>& se) {
  se.validate();
  if (x.c() != se.channels()) throw ShapeError("se_block", "channels", se.channels(), x.c());
  Tensor4<T> gate = conv2d(relu(conv2d(global_avgpool(x), se.reduce)), se.expand);
  for (T& v : gate.data()) v = sigmoid(v);
  return gate;
}

template <typename T>
Tensor4<T> se_block(const Tensor4<T>& x, const SEParams<T>& se) {
  const Tensor4<T> gate = se_gate(x, se);
  Tensor4<T> y = x;
  const std::size_t hw = x.shape().plane();
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T g = gate(n, c, 0, 0);
      T* out = y.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) out[i] *= g;
    }
  }
  return y;
}

template <typename T>
Tensor4<T> linear(const Tensor4<T>& x, const Linear<T>& fc) {
  fc.validate();
  const std::size_t features = x.c() * x.h() * x.w();
  if (features != fc.in_features) throw ShapeError("linear", "in_features", fc.in_features, features);
  Tensor4<T> y({x.n(), fc.out_features, 1, 1});
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* in = x.data().data() + n * features;
    for (std::size_t o = 0; o < fc.out_features; ++o) {
      const T* wrow = fc.weight.data() + o * features;
      T acc = fc.bias[o];
      for (std::size_t f = 0; f < features; ++f) acc += wrow[f] * in[f];
      y(n, o, 0, 0) = acc;
    }
  }
  return y;
}

template <typename T>
void add_inplace(Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("add", "element count", a.size(), b.size());
  T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

#define MOBILEONE_INSTANTIATE_OPS(T)                                                    \
  template struct ConvSpec<T>;                                                          \
  template struct BNParams<T>;                                                          \
  template struct SEParams<T>;                                                          \
  template struct Linear<T>;                                                            \
  template Tensor4<T> conv2d(const Tensor4<T>&, const ConvSpec<T>&);                    \
  template Tensor4<T> batchnorm_infer(const Tensor4<T>&, const BNParams<T>&);           \
  template BNTrainResult<T> batchnorm_train(const Tensor4<T>&, const BNParams<T>&, T);  \
  template T sigmoid(T);                                                                \
  template Tensor4<T> relu(Tensor4<T>);                                                 \
  template Tensor4<T> gelu(Tensor4<T>);                                                 \
  template Tensor4<T> silu(Tensor4<T>);                                                 \
  template Tensor4<T> global_avgpool(const Tensor4<T>&);                                \
  template Tensor4<T> se_gate(const Tensor4<T>&, const SEParams<T>&);                   \
  template Tensor4<T> se_block(const Tensor4<T>&, const SEParams<T>&);                  \
  template Tensor4<T> linear(const Tensor4<T>&, const Linear<T>&);                      \
  template void add_inplace(Tensor4<T>&, const Tensor4<T>&);

MOBILEONE_INSTANTIATE_OPS(float)
MOBILEONE_INSTANTIATE_OPS(double)

#undef MOBILEONE_INSTANTIATE_OPS

}  // namespace mobileone
