#include "mobileone/block.hpp"

#include <cmath>
#include <string>

namespace mobileone {

const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::se_relu:
      return "se_relu";
  }
  return "unknown";
}

const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::separable:
      return "separable";
    case BlockKind::dense:
      return "dense";
  }
  return "unknown";
}

void BranchConfig::validate() const {
  if (k < 1 || k > 5) throw ConfigError("BranchConfig: k must be in [1, 5], got " + std::to_string(k));
  if (kernel < 1 || kernel % 2 == 0) {
    throw ConfigError("BranchConfig: kernel must be odd and positive, got " + std::to_string(kernel));
  }
  if (has_scale_branch && kernel == 1) {
    throw ConfigError("BranchConfig: a 1x1 stage cannot carry a 1x1 scale branch");
  }
}

template <typename T>
BranchConfig TrainStage<T>::config() const {
  return BranchConfig{static_cast<int>(branches.size()), static_cast<int>(kernel()),
                      scale.has_value(), skip.has_value()};
}

template <typename T>
std::size_t TrainStage<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& b : branches) n += b.conv.param_count() + b.bn.param_count();
  if (scale) n += scale->conv.param_count() + scale->bn.param_count();
  if (skip) n += skip->param_count();
  if (se) n += se->param_count();
  return n;
}

template <typename T>
void TrainStage<T>::validate() const {
  if (branches.empty()) throw ConfigError("TrainStage: at least one conv branch is required");
  config().validate();
  const ConvSpec<T>& ref = lead();
  for (const auto& b : branches) {
    b.conv.validate();
    b.bn.validate();
    if (!(b.conv.weight.shape() == ref.weight.shape())) {
      throw ShapeError("TrainStage", "branch weight size", ref.weight.size(), b.conv.weight.size());
    }
    if (b.conv.stride != ref.stride || b.conv.padding != ref.padding || b.conv.groups != ref.groups) {
      throw ConfigError("TrainStage: branches disagree on stride/padding/groups");
    }
    if (b.bn.channels() != ref.out_channels()) {
      throw ShapeError("TrainStage", "branch BN channels", ref.out_channels(), b.bn.channels());
    }
  }
  if (scale) {
    scale->conv.validate();
    scale->bn.validate();
    if (scale->conv.kernel() != 1) throw ShapeError("TrainStage", "scale kernel", 1, scale->conv.kernel());
    if (scale->conv.in_channels() != in_channels() || scale->conv.out_channels() != out_channels() ||
        scale->conv.groups != groups() || scale->conv.stride != stride()) {
      throw ConfigError("TrainStage: scale branch geometry differs from the conv branches");
    }
  }
  if (skip) {
    skip->validate();
    if (stride() != 1) throw ConfigError("TrainStage: skip BN requires stride 1");
    if (in_channels() != out_channels()) {
      throw ConfigError("TrainStage: skip BN requires C_in == C_out");
    }
  }
  if (se) {
    se->validate();
    if (se->channels() != out_channels()) throw ShapeError("TrainStage", "SE channels", out_channels(), se->channels());
  }
}

template <typename T>
std::size_t TrainBlock<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.param_count();
  return n;
}

template <typename T>
void TrainBlock<T>::validate() const {
  const std::size_t expected = kind == BlockKind::separable ? 2 : 1;
  if (stages.size() != expected) throw ShapeError("TrainBlock", "stage count", expected, stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].validate();
    if (stages[i].se.has_value() != (activation == Activation::se_relu)) {
      throw ConfigError("TrainBlock: SE must be present exactly when activation is se_relu");
    }
    if (i > 0 && stages[i].in_channels() != stages[i - 1].out_channels()) {
      throw ShapeError("TrainBlock", "stage channels", stages[i - 1].out_channels(), stages[i].in_channels());
    }
  }
  if (kind == BlockKind::separable) {
    const auto& dw = stages[0];
    if (dw.groups() != dw.in_channels() || dw.in_channels() != dw.out_channels()) {
      throw ConfigError("TrainBlock: first separable stage must be depthwise");
    }
    if (stages[1].kernel() != 1 || stages[1].groups() != 1 || stages[1].stride() != 1) {
      throw ConfigError("TrainBlock: second separable stage must be a dense 1x1 conv");
    }
  }
}

template <typename T>
std::size_t InferenceBlock<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.conv.param_count() + (s.se ? s.se->param_count() : 0);
  return n;
}

template <typename T>
void InferenceBlock<T>::validate() const {
  const std::size_t expected = kind == BlockKind::separable ? 2 : 1;
  if (stages.size() != expected) throw ShapeError("InferenceBlock", "stage count", expected, stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].conv.validate();
    if (stages[i].se.has_value() != (activation == Activation::se_relu)) {
      throw ConfigError("InferenceBlock: SE must be present exactly when activation is se_relu");
    }
    if (stages[i].se) stages[i].se->validate();
    if (i > 0 && stages[i].conv.in_channels() != stages[i - 1].conv.out_channels()) {
      throw ShapeError("InferenceBlock", "stage channels", stages[i - 1].conv.out_channels(),
                       stages[i].conv.in_channels());
    }
  }
}

namespace {

template <typename T>
ConvSpec<T> init_conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                      std::size_t groups, bool with_bias, Rng& rng, const InitPolicy& init) {
  ConvSpec<T> c;
  c.weight = Tensor4<T>({out, in / groups, kernel, kernel});
  c.stride = stride;
  c.padding = (kernel - 1) / 2;
  c.groups = groups;
  // He init over fan-out, counted per group.
  const double fan_out = static_cast<double>(out / groups * kernel * kernel);
  fill_normal(c.weight.data(), rng, 0.0, std::sqrt(2.0 / fan_out));
  if (with_bias) {
    c.bias.assign(out, T{0});
    if (init.randomize_bn) fill_uniform(std::span<T>(c.bias), rng, -0.5, 0.5);
  }
  return c;
}

template <typename T>
BNParams<T> init_bn(std::size_t channels, Rng& rng, const InitPolicy& init) {
  BNParams<T> bn = BNParams<T>::identity(channels);
  if (init.randomize_bn) {
    fill_uniform(std::span<T>(bn.mu), rng, -0.5, 0.5);
    fill_uniform(std::span<T>(bn.sigma), rng, 0.5, 1.5);
    fill_uniform(std::span<T>(bn.gamma), rng, 0.5, 1.5);
    fill_uniform(std::span<T>(bn.beta), rng, -0.5, 0.5);
  }
  return bn;
}

template <typename T>
void apply_bn(BNParams<T>& bn, Tensor4<T>& z, Mode mode, T momentum, BNCache<T>* cache) {
  if (mode == Mode::eval) {
    z = batchnorm_infer(z, bn);
    return;
  }
  BNTrainResult<T> r = batchnorm_train(z, bn, momentum);
  bn = std::move(r.running);
  z = std::move(r.y);
  if (cache) *cache = std::move(r.cache);
}

template <typename T>
Tensor4<T> se_forward(const Tensor4<T>& x, const SEParams<T>& se, StageCache<T>* cache) {
  if (!cache) return se_block(x, se);
  cache->se_pooled = global_avgpool(x);
  cache->se_reduced = conv2d(cache->se_pooled, se.reduce);
  Tensor4<T> gate = conv2d(relu(cache->se_reduced), se.expand);
  for (T& v : gate.data()) v = sigmoid(v);
  Tensor4<T> y = x;
  const std::size_t hw = x.shape().plane();
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T g = gate(n, c, 0, 0);
      T* out = y.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) out[i] *= g;
    }
  }
  cache->se_gate = std::move(gate);
  return y;
}

template <typename T>
Tensor4<T> stage_forward(TrainStage<T>& st, const Tensor4<T>& x, Mode mode, T momentum,
                         StageCache<T>* cache) {
  if (x.c() != st.in_channels()) throw ShapeError("forward_train", "input channels", st.in_channels(), x.c());
  if (cache) {
    cache->input = x;
    cache->branch_bn.assign(st.branches.size(), {});
  }
  Tensor4<T> sum;
  for (std::size_t i = 0; i < st.branches.size(); ++i) {
    Tensor4<T> z = conv2d(x, st.branches[i].conv);
    apply_bn(st.branches[i].bn, z, mode, momentum, cache ? &cache->branch_bn[i] : nullptr);
    if (i == 0) {
      sum = std::move(z);
    } else {
      add_inplace(sum, z);
    }
  }
  if (st.scale) {
    Tensor4<T> z = conv2d(x, st.scale->conv);
    if (cache) cache->scale_bn.emplace();
    apply_bn(st.scale->bn, z, mode, momentum, cache ? &*cache->scale_bn : nullptr);
    add_inplace(sum, z);
  }
  if (st.skip) {
    Tensor4<T> z = x;
    if (cache) cache->skip_bn.emplace();
    apply_bn(*st.skip, z, mode, momentum, cache ? &*cache->skip_bn : nullptr);
    add_inplace(sum, z);
  }
  if (cache) cache->branch_sum = sum;
  if (st.se) sum = se_forward(sum, *st.se, cache);
  if (cache) cache->pre_activation = sum;
  return relu(std::move(sum));
}

template <typename T>
Tensor4<T> stage_eval(const TrainStage<T>& st, const Tensor4<T>& x) {
  if (x.c() != st.in_channels()) throw ShapeError("forward_train", "input channels", st.in_channels(), x.c());
  Tensor4<T> sum;
  for (std::size_t i = 0; i < st.branches.size(); ++i) {
    Tensor4<T> z = batchnorm_infer(conv2d(x, st.branches[i].conv), st.branches[i].bn);
    if (i == 0) {
      sum = std::move(z);
    } else {
      add_inplace(sum, z);
    }
  }
  if (st.scale) add_inplace(sum, batchnorm_infer(conv2d(x, st.scale->conv), st.scale->bn));
  if (st.skip) add_inplace(sum, batchnorm_infer(x, *st.skip));
  if (st.se) sum = se_block(sum, *st.se);
  return relu(std::move(sum));
}

}  // namespace

template <typename T>
SEParams<T> make_se(std::size_t channels, std::size_t ratio, Rng& rng, const InitPolicy& init) {
  if (ratio == 0) throw ConfigError("SE reduction ratio must be positive");
  const std::size_t squeezed = std::max<std::size_t>(1, channels / ratio);
  SEParams<T> se;
  se.ratio = ratio;
  se.reduce = init_conv<T>(channels, squeezed, 1, 1, 1, true, rng, init);
  se.expand = init_conv<T>(squeezed, channels, 1, 1, 1, true, rng, init);
  return se;
}

template <typename T>
TrainStage<T> make_train_stage(std::size_t in_channels, std::size_t out_channels,
                               std::size_t stride, std::size_t groups, const BranchConfig& cfg,
                               bool with_se, std::size_t se_ratio, Rng& rng,
                               const InitPolicy& init) {
  cfg.validate();
  if (cfg.has_skip_bn && (stride != 1 || in_channels != out_channels)) {
    throw ConfigError("skip BN branch requires stride 1 and C_in == C_out (got stride " +
                      std::to_string(stride) + ", " + std::to_string(in_channels) + " -> " +
                      std::to_string(out_channels) + ")");
  }
  if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("make_train_stage: groups must divide both channel counts");
  }
  const auto kernel = static_cast<std::size_t>(cfg.kernel);
  TrainStage<T> st;
  for (int i = 0; i < cfg.k; ++i) {
    st.branches.push_back({init_conv<T>(in_channels, out_channels, kernel, stride, groups, false, rng, init),
                           init_bn<T>(out_channels, rng, init)});
  }
  if (cfg.has_scale_branch) {
    st.scale = ConvBN<T>{init_conv<T>(in_channels, out_channels, 1, stride, groups, false, rng, init),
                         init_bn<T>(out_channels, rng, init)};
  }
  if (cfg.has_skip_bn) st.skip = init_bn<T>(in_channels, rng, init);
  if (with_se) st.se = make_se<T>(out_channels, se_ratio, rng, init);
  st.validate();
  return st;
}

template <typename T>
TrainBlock<T> make_train_block(const BlockOptions& o, Rng& rng, const InitPolicy& init) {
  const bool se = o.activation == Activation::se_relu;
  TrainBlock<T> b;
  b.kind = o.kind;
  b.activation = o.activation;
  if (o.kind == BlockKind::separable) {
    const BranchConfig dw{o.k, 3, o.scale_branch, o.skip && o.stride == 1};
    const BranchConfig pw{o.k, 1, false, o.skip && o.in_channels == o.out_channels};
    b.stages.push_back(make_train_stage<T>(o.in_channels, o.in_channels, o.stride, o.in_channels, dw,
                                           se, o.se_ratio, rng, init));
    b.stages.push_back(make_train_stage<T>(o.in_channels, o.out_channels, 1, 1, pw, se, o.se_ratio,
                                           rng, init));
  } else {
    const BranchConfig cfg{o.k, 3, o.scale_branch,
                           o.skip && o.stride == 1 && o.in_channels == o.out_channels};
    b.stages.push_back(make_train_stage<T>(o.in_channels, o.out_channels, o.stride, 1, cfg, se,
                                           o.se_ratio, rng, init));
  }
  b.validate();
  return b;
}

template <typename T>
InferenceBlock<T> make_inference_block(const BlockOptions& o, Rng& rng, const InitPolicy& init) {
  const bool se = o.activation == Activation::se_relu;
  InferenceBlock<T> b;
  b.kind = o.kind;
  b.activation = o.activation;
  auto stage = [&](std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t groups) {
    InferStage<T> s{init_conv<T>(in, out, k, stride, groups, true, rng, init), std::nullopt};
    if (se) s.se = make_se<T>(out, o.se_ratio, rng, init);
    return s;
  };
  if (o.kind == BlockKind::separable) {
    b.stages.push_back(stage(o.in_channels, o.in_channels, 3, o.stride, o.in_channels));
    b.stages.push_back(stage(o.in_channels, o.out_channels, 1, 1, 1));
  } else {
    b.stages.push_back(stage(o.in_channels, o.out_channels, 3, o.stride, 1));
  }
  b.validate();
  return b;
}

template <typename T>
Tensor4<T> forward_train(TrainBlock<T>& block, const Tensor4<T>& x, Mode mode, T momentum,
                         BlockCache<T>* cache) {
  if (mode == Mode::eval && !cache) return forward_eval(block, x);
  if (cache) cache->stages.assign(block.stages.size(), {});
  Tensor4<T> h = x;
  for (std::size_t i = 0; i < block.stages.size(); ++i) {
    h = stage_forward(block.stages[i], h, mode, momentum, cache ? &cache->stages[i] : nullptr);
  }
  return h;
}

template <typename T>
Tensor4<T> forward_eval(const TrainBlock<T>& block, const Tensor4<T>& x) {
  Tensor4<T> h = x;
  for (const auto& st : block.stages) h = stage_eval(st, h);
  return h;
}

template <typename T>
Tensor4<T> forward_infer(const InferenceBlock<T>& block, const Tensor4<T>& x) {
  Tensor4<T> h = x;
  for (const auto& st : block.stages) {
    if (h.c() != st.conv.in_channels()) throw ShapeError("forward_infer", "input channels", st.conv.in_channels(), h.c());
    h = conv2d(h, st.conv);
    if (st.se) h = se_block(h, *st.se);
    h = relu(std::move(h));
  }
  return h;
}

#define MOBILEONE_INSTANTIATE_BLOCK(T)                                                              \
  template struct TrainStage<T>;                                                                    \
  template struct TrainBlock<T>;                                                                    \
  template struct InferenceBlock<T>;                                                                \
  template SEParams<T> make_se<T>(std::size_t, std::size_t, Rng&, const InitPolicy&);              \
  template TrainStage<T> make_train_stage<T>(std::size_t, std::size_t, std::size_t, std::size_t,    \
                                             const BranchConfig&, bool, std::size_t, Rng&,          \
                                             const InitPolicy&);                                    \
  template TrainBlock<T> make_train_block<T>(const BlockOptions&, Rng&, const InitPolicy&);         \
  template InferenceBlock<T> make_inference_block<T>(const BlockOptions&, Rng&, const InitPolicy&); \
  template Tensor4<T> forward_train(TrainBlock<T>&, const Tensor4<T>&, Mode, T, BlockCache<T>*);    \
  template Tensor4<T> forward_eval(const TrainBlock<T>&, const Tensor4<T>&);                        \
  template Tensor4<T> forward_infer(const InferenceBlock<T>&, const Tensor4<T>&);

MOBILEONE_INSTANTIATE_BLOCK(float)
MOBILEONE_INSTANTIATE_BLOCK(double)

#undef MOBILEONE_INSTANTIATE_BLOCK

}  // namespace mobileone
