#include "mobileone/reparam.hpp"

#include <cmath>
#include <string>
#include <type_traits>

namespace mobileone {

template <typename T>
FoldedConv<T> fold_bn(const ConvSpec<T>& conv, const BNParams<T>& bn) {
  conv.validate();
  bn.validate();
  const std::size_t cout = conv.out_channels();
  if (bn.channels() != cout) throw ShapeError("fold_bn", "BN channels", cout, bn.channels());
  FoldedConv<T> f{conv.weight, std::vector<T>(cout)};
  const std::size_t per_out = conv.weight.size() / cout;
  for (std::size_t c = 0; c < cout; ++c) {
    const T s = bn.scale(c);
    T* w = f.weight.data().data() + c * per_out;
    for (std::size_t i = 0; i < per_out; ++i) w[i] *= s;
    const T b = conv.has_bias() ? conv.bias[c] : T{0};
    f.bias[c] = (b - bn.mu[c]) * s + bn.beta[c];
  }
  return f;
}

template <typename T>
ConvSpec<T> identity_as_conv(std::size_t channels, std::size_t groups, std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0) {
    throw ConfigError("identity_as_conv: kernel must be odd, got " + std::to_string(kernel));
  }
  if (groups == 0 || channels % groups != 0) {
    throw ConfigError("identity_as_conv: channels " + std::to_string(channels) +
                      " not divisible by groups " + std::to_string(groups));
  }
  const std::size_t per_group = channels / groups;
  const std::size_t center = kernel / 2;
  ConvSpec<T> c;
  c.weight = Tensor4<T>({channels, per_group, kernel, kernel});
  c.bias.assign(channels, T{0});
  c.stride = 1;
  c.padding = center;
  c.groups = groups;
  for (std::size_t ch = 0; ch < channels; ++ch) c.weight(ch, ch % per_group, center, center) = T{1};
  return c;
}

template <typename T>
ConvSpec<T> pad_kernel(const ConvSpec<T>& conv, std::size_t target) {
  conv.validate();
  const std::size_t k = conv.kernel();
  if (k % 2 == 0 || target % 2 == 0) {
    throw ConfigError("pad_kernel: kernels must be odd (got " + std::to_string(k) + " -> " +
                      std::to_string(target) + ")");
  }
  if (target < k) {
    throw ConfigError("pad_kernel: target " + std::to_string(target) + " smaller than kernel " +
                      std::to_string(k));
  }
  const std::size_t off = (target - k) / 2;
  ConvSpec<T> out = conv;
  out.weight = Tensor4<T>({conv.weight.n(), conv.weight.c(), target, target});
  for (std::size_t o = 0; o < conv.weight.n(); ++o) {
    for (std::size_t i = 0; i < conv.weight.c(); ++i) {
      for (std::size_t h = 0; h < k; ++h) {
        for (std::size_t w = 0; w < k; ++w) out.weight(o, i, h + off, w + off) = conv.weight(o, i, h, w);
      }
    }
  }
  out.padding = conv.padding + off;
  return out;
}

template <typename T>
FoldedConv<T> merge_branches(std::span<const FoldedConv<T>> branches) {
  if (branches.empty()) throw ConfigError("merge_branches: no branches");
  FoldedConv<T> acc = branches.front();
  for (std::size_t i = 1; i < branches.size(); ++i) {
    const FoldedConv<T>& b = branches[i];
    if (!(b.weight.shape() == acc.weight.shape())) {
      throw ShapeError("merge_branches", "branch " + std::to_string(i) + " weight size",
                       acc.weight.size(), b.weight.size());
    }
    if (b.bias.size() != acc.bias.size()) {
      throw ShapeError("merge_branches", "branch " + std::to_string(i) + " bias length",
                       acc.bias.size(), b.bias.size());
    }
    add_inplace(acc.weight, b.weight);
    for (std::size_t c = 0; c < acc.bias.size(); ++c) acc.bias[c] += b.bias[c];
  }
  return acc;
}

template <typename T>
InferStage<T> reparameterize_stage(const TrainStage<T>& st) {
  st.validate();
  const std::size_t k = st.kernel();
  std::vector<FoldedConv<T>> folded;
  folded.reserve(st.branches.size() + 2);
  for (const auto& b : st.branches) folded.push_back(fold_bn(b.conv, b.bn));
  if (st.scale) folded.push_back(fold_bn(pad_kernel(st.scale->conv, k), st.scale->bn));
  if (st.skip) folded.push_back(fold_bn(identity_as_conv<T>(st.in_channels(), st.groups(), k), *st.skip));
  FoldedConv<T> merged = merge_branches(std::span<const FoldedConv<T>>(folded));

  InferStage<T> out;
  out.conv.weight = std::move(merged.weight);
  out.conv.bias = std::move(merged.bias);
  out.conv.stride = st.stride();
  out.conv.padding = st.lead().padding;
  out.conv.groups = st.groups();
  out.se = st.se;
  return out;
}

template <typename T>
InferenceBlock<T> reparameterize_block(const TrainBlock<T>& block) {
  block.validate();
  InferenceBlock<T> out{block.kind, block.activation, {}};
  for (const auto& st : block.stages) out.stages.push_back(reparameterize_stage(st));
  return out;
}

namespace {

template <typename T>
void require_populated(const BNParams<T>& bn, std::size_t layer) {
  const std::size_t c = bn.channels();
  bool ok = c > 0 && bn.mu.size() == c && bn.sigma.size() == c && bn.beta.size() == c;
  for (std::size_t i = 0; ok && i < c; ++i) {
    ok = std::isfinite(bn.mu[i]) && std::isfinite(bn.sigma[i]) && std::isfinite(bn.gamma[i]) &&
         std::isfinite(bn.beta[i]);
  }
  if (!ok) {
    throw ConfigError("reparameterize_model: layer " + std::to_string(layer) +
                      " has missing or non-finite BN running statistics; calibrate or train the "
                      "model before folding");
  }
}

}  // namespace

template <typename T>
Model<T> reparameterize_model(const Model<T>& model) {
  if (model.mode == ModelMode::inference) return model;
  Model<T> out;
  out.name = model.name;
  out.mode = ModelMode::inference;
  out.input_resolution = model.input_resolution;
  out.in_channels = model.in_channels;
  out.layers.reserve(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, TrainBlock<T>>) {
            for (const auto& st : l.stages) {
              for (const auto& b : st.branches) require_populated(b.bn, i);
              if (st.scale) require_populated(st.scale->bn, i);
              if (st.skip) require_populated(*st.skip, i);
            }
            out.layers.emplace_back(reparameterize_block(l));
          } else {
            out.layers.emplace_back(l);
          }
        },
        model.layers[i]);
  }
  out.validate();
  return out;
}

#define MOBILEONE_INSTANTIATE_REPARAM(T)                                               \
  template FoldedConv<T> fold_bn(const ConvSpec<T>&, const BNParams<T>&);             \
  template ConvSpec<T> identity_as_conv<T>(std::size_t, std::size_t, std::size_t);    \
  template ConvSpec<T> pad_kernel(const ConvSpec<T>&, std::size_t);                   \
  template FoldedConv<T> merge_branches(std::span<const FoldedConv<T>>);              \
  template InferStage<T> reparameterize_stage(const TrainStage<T>&);                  \
  template InferenceBlock<T> reparameterize_block(const TrainBlock<T>&);              \
  template Model<T> reparameterize_model(const Model<T>&);

MOBILEONE_INSTANTIATE_REPARAM(float)
MOBILEONE_INSTANTIATE_REPARAM(double)

#undef MOBILEONE_INSTANTIATE_REPARAM

}  // namespace mobileone
