// Reverse-mode adjoints for a train-mode model. Gradients are accumulated into
// a zeroed copy of the model, so every parameter's gradient lives at the same
// position (and under the same visit_tensors name) as the parameter itself.

#include <algorithm>
#include <cmath>

#include "mobileone/kernels.hpp"
#include "mobileone/train.hpp"

namespace mobileone {

namespace {

template <typename T>
void zero_all(Model<T>& m) {
  visit_tensors(m, [](const std::string&, auto values, const auto&, TensorRole) {
    std::fill(values.begin(), values.end(), T{0});
  });
}

template <typename T>
Tensor4<T> conv_backward(const ConvSpec<T>& c, const Tensor4<T>& x, const Tensor4<T>& dy, ConvSpec<T>& gc) {
  const ConvGeometry g = ConvGeometry::make(x.shape(), c.out_channels(), c.kernel(), c.stride, c.padding, c.groups);
  Tensor4<T> dx(x.shape());
  kernels::conv2d_backward_input(dy.data().data(), c.weight.data().data(), dx.data().data(), g);
  Tensor4<T> dw(c.weight.shape());
  kernels::conv2d_backward_weight(dy.data().data(), x.data().data(), dw.data().data(), g);
  add_inplace(gc.weight, dw);
  if (c.has_bias()) {
    const std::size_t hw = dy.shape().plane();
    for (std::size_t n = 0; n < dy.n(); ++n) {
      for (std::size_t o = 0; o < dy.c(); ++o) {
        const T* d = dy.plane(n, o);
        T s{0};
        for (std::size_t i = 0; i < hw; ++i) s += d[i];
        gc.bias[o] += s;
      }
    }
  }
  return dx;
}

// y = gamma * x_hat + beta with batch statistics:
// dx = gamma * inv_std / M * (M dy - sum(dy) - x_hat * sum(dy * x_hat)).
template <typename T>
Tensor4<T> bn_backward(const BNParams<T>& bn, const BNCache<T>& cache, const Tensor4<T>& dy, BNParams<T>& gbn) {
  const std::size_t hw = dy.shape().plane();
  const T m = static_cast<T>(dy.n() * hw);
  Tensor4<T> dx(dy.shape());
  for (std::size_t c = 0; c < dy.c(); ++c) {
    T sum_dy{0}, sum_dy_xh{0};
    for (std::size_t n = 0; n < dy.n(); ++n) {
      const T* d = dy.plane(n, c);
      const T* xh = cache.x_hat.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += d[i];
        sum_dy_xh += d[i] * xh[i];
      }
    }
    gbn.gamma[c] += sum_dy_xh;
    gbn.beta[c] += sum_dy;
    const T k = bn.gamma[c] * cache.inv_std[c] / m;
    for (std::size_t n = 0; n < dy.n(); ++n) {
      const T* d = dy.plane(n, c);
      const T* xh = cache.x_hat.plane(n, c);
      T* out = dx.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) out[i] = k * (m * d[i] - sum_dy - xh[i] * sum_dy_xh);
    }
  }
  return dx;
}

// out = s * sigmoid(expand(relu(reduce(avgpool(s))))).
template <typename T>
Tensor4<T> se_backward(const SEParams<T>& se, const StageCache<T>& cache, const Tensor4<T>& dout, SEParams<T>& gse) {
  const Tensor4<T>& s = cache.branch_sum;
  const std::size_t hw = s.shape().plane();
  const std::size_t channels = s.c();
  const std::size_t squeezed = se.reduce.out_channels();
  Tensor4<T> ds(s.shape());
  for (std::size_t n = 0; n < s.n(); ++n) {
    std::vector<T> da(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      const T gate = cache.se_gate(n, c, 0, 0);
      const T* d = dout.plane(n, c);
      const T* sv = s.plane(n, c);
      T* out = ds.plane(n, c);
      T dgate{0};
      for (std::size_t i = 0; i < hw; ++i) {
        out[i] = d[i] * gate;
        dgate += d[i] * sv[i];
      }
      da[c] = dgate * gate * (T{1} - gate);
    }
    std::vector<T> dh(squeezed, T{0});
    for (std::size_t c = 0; c < channels; ++c) {
      gse.expand.bias[c] += da[c];
      for (std::size_t o = 0; o < squeezed; ++o) {
        const T r = cache.se_reduced(n, o, 0, 0);
        gse.expand.weight(c, o, 0, 0) += da[c] * (r > T{0} ? r : T{0});
        dh[o] += da[c] * se.expand.weight(c, o, 0, 0);
      }
    }
    std::vector<T> dp(channels, T{0});
    for (std::size_t o = 0; o < squeezed; ++o) {
      const T dr = cache.se_reduced(n, o, 0, 0) > T{0} ? dh[o] : T{0};
      gse.reduce.bias[o] += dr;
      for (std::size_t c = 0; c < channels; ++c) {
        gse.reduce.weight(o, c, 0, 0) += dr * cache.se_pooled(n, c, 0, 0);
        dp[c] += dr * se.reduce.weight(o, c, 0, 0);
      }
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const T add = dp[c] / static_cast<T>(hw);
      T* out = ds.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) out[i] += add;
    }
  }
  return ds;
}

template <typename T>
Tensor4<T> stage_backward(const TrainStage<T>& st, const StageCache<T>& cache, const Tensor4<T>& dy,
                          TrainStage<T>& g) {
  Tensor4<T> d = dy;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(cache.pre_activation.data()[i] > T{0})) d.data()[i] = T{0};
  }
  if (st.se) d = se_backward(*st.se, cache, d, *g.se);
  Tensor4<T> dx(cache.input.shape());
  for (std::size_t b = 0; b < st.branches.size(); ++b) {
    const Tensor4<T> dz = bn_backward(st.branches[b].bn, cache.branch_bn[b], d, g.branches[b].bn);
    add_inplace(dx, conv_backward(st.branches[b].conv, cache.input, dz, g.branches[b].conv));
  }
  if (st.scale) {
    const Tensor4<T> dz = bn_backward(st.scale->bn, *cache.scale_bn, d, g.scale->bn);
    add_inplace(dx, conv_backward(st.scale->conv, cache.input, dz, g.scale->conv));
  }
  if (st.skip) add_inplace(dx, bn_backward(*st.skip, *cache.skip_bn, d, *g.skip));
  return dx;
}

template <typename T>
Tensor4<T> linear_backward(const Linear<T>& fc, const Tensor4<T>& h, const Tensor4<T>& dy, Linear<T>& g) {
  const std::size_t in = fc.in_features, out = fc.out_features;
  Tensor4<T> dh(h.shape());
  for (std::size_t n = 0; n < h.n(); ++n) {
    const T* hv = h.data().data() + n * in;
    const T* dv = dy.data().data() + n * out;
    T* dhv = dh.data().data() + n * in;
    for (std::size_t o = 0; o < out; ++o) {
      g.bias[o] += dv[o];
      const T* w = fc.weight.data() + o * in;
      T* gw = g.weight.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        gw[i] += dv[o] * hv[i];
        dhv[i] += dv[o] * w[i];
      }
    }
  }
  return dh;
}

template <typename T>
Tensor4<T> pool_backward(const Shape4& in, const Tensor4<T>& dy) {
  Tensor4<T> dx(in);
  const T inv = T{1} / static_cast<T>(in.plane());
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t c = 0; c < in.c; ++c) {
      const T v = dy(n, c, 0, 0) * inv;
      T* out = dx.plane(n, c);
      for (std::size_t i = 0; i < in.plane(); ++i) out[i] = v;
    }
  }
  return dx;
}

template <typename T>
struct LayerCache {
  BlockCache<T> block;
  Tensor4<T> input;
};

}  // namespace

template <typename T>
BackwardResult<T> backward(Model<T>& model, const Tensor4<T>& x, std::span<const std::size_t> targets,
                           const BackwardOptions& opts) {
  if (model.mode != ModelMode::train) {
    throw ConfigError("backward: model '" + model.name + "' is in inference mode; gradients need the train-time form");
  }
  if (x.c() != model.in_channels) throw ShapeError("backward", "input channels", model.in_channels, x.c());
  const T momentum = static_cast<T>(opts.bn_momentum);

  std::vector<LayerCache<T>> caches(model.layers.size());
  Tensor4<T> h = x;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, TrainBlock<T>>) {
            h = forward_train(l, h, Mode::train, momentum, &caches[i].block);
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            caches[i].input = h;
            h = global_avgpool(h);
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            caches[i].input = h;
            h = linear(h, l);
          } else {
            throw ConfigError("backward: inference block inside a train-mode model");
          }
        },
        model.layers[i]);
  }

  BackwardResult<T> result;
  LossResult<T> loss = label_smoothed_ce(h, targets, static_cast<T>(opts.smoothing));
  const T scale = static_cast<T>(opts.loss_scale);
  result.loss = loss.loss * scale;
  result.logits = h;
  Tensor4<T> d = std::move(loss.grad);
  for (T& v : d.data()) v *= scale;

  Model<T> g = model;
  zero_all(g);
  for (std::size_t i = model.layers.size(); i-- > 0;) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, TrainBlock<T>>) {
            auto& gb = std::get<TrainBlock<T>>(g.layers[i]);
            for (std::size_t s = l.stages.size(); s-- > 0;) {
              d = stage_backward(l.stages[s], caches[i].block.stages[s], d, gb.stages[s]);
            }
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            d = pool_backward(caches[i].input.shape(), d);
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            d = linear_backward(l, caches[i].input, d, std::get<Linear<T>>(g.layers[i]));
          }
        },
        model.layers[i]);
  }

  visit_tensors(g, [&](const std::string& name, auto values, const auto&, TensorRole role) {
    if (role == TensorRole::parameter) result.grads.emplace(name, std::vector<T>(values.begin(), values.end()));
  });
  return result;
}

template <typename T>
T train_loss(const Model<T>& model, const Tensor4<T>& x, std::span<const std::size_t> targets, double smoothing) {
  if (model.mode != ModelMode::train) throw ConfigError("train_loss: model is in inference mode");
  Model<T> copy = model;
  const Tensor4<T> logits = forward(copy, x, Mode::train);
  return label_smoothed_ce(logits, targets, static_cast<T>(smoothing)).loss;
}

template <typename T>
void calibrate_bn(Model<T>& model, const Tensor4<T>& x) {
  if (model.mode != ModelMode::train) throw ConfigError("calibrate_bn: model is in inference mode");
  if (x.n() * x.h() * x.w() < 2) throw ConfigError("calibrate_bn: batch statistics need at least two values");
  Tensor4<T> h = x;
  for (auto& layer : model.layers) {
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, TrainBlock<T>>) {
            h = forward_train(l, h, Mode::train, T{1});
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            h = global_avgpool(h);
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            h = linear(h, l);
          }
        },
        layer);
  }
}

template BackwardResult<float> backward(Model<float>&, const Tensor4<float>&, std::span<const std::size_t>,
                                        const BackwardOptions&);
template BackwardResult<double> backward(Model<double>&, const Tensor4<double>&, std::span<const std::size_t>,
                                         const BackwardOptions&);
template float train_loss(const Model<float>&, const Tensor4<float>&, std::span<const std::size_t>, double);
template double train_loss(const Model<double>&, const Tensor4<double>&, std::span<const std::size_t>, double);
template void calibrate_bn(Model<float>&, const Tensor4<float>&);
template void calibrate_bn(Model<double>&, const Tensor4<double>&);

}  // namespace mobileone
