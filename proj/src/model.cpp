#include "mobileone/model.hpp"

#include <string>
#include <type_traits>

namespace mobileone {

const char* to_string(ModelMode m) { return m == ModelMode::train ? "train" : "inference"; }

template <typename T>
std::size_t Model<T>::num_classes() const {
  if (layers.empty() || !std::holds_alternative<Linear<T>>(layers.back())) return 0;
  return std::get<Linear<T>>(layers.back()).out_features;
}

template <typename T>
std::size_t Model<T>::block_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    if (std::holds_alternative<TrainBlock<T>>(l) || std::holds_alternative<InferenceBlock<T>>(l)) ++n;
  }
  return n;
}

template <typename T>
void Model<T>::validate() const {
  if (layers.size() < 3) throw ConfigError("Model: need at least one block plus AvgPool and Linear");
  if (!std::holds_alternative<AvgPool>(layers[layers.size() - 2]) ||
      !std::holds_alternative<Linear<T>>(layers.back())) {
    throw ConfigError("Model: layer sequence must end with AvgPool, Linear");
  }
  std::size_t channels = in_channels;
  for (std::size_t i = 0; i + 2 < layers.size(); ++i) {
    const Layer<T>& l = layers[i];
    const std::string where = "Model layer " + std::to_string(i);
    if (const auto* tb = std::get_if<TrainBlock<T>>(&l)) {
      if (mode != ModelMode::train) throw ConfigError(where + ": train block in inference model");
      tb->validate();
      if (tb->in_channels() != channels) throw ShapeError(where, "input channels", channels, tb->in_channels());
      channels = tb->out_channels();
    } else if (const auto* ib = std::get_if<InferenceBlock<T>>(&l)) {
      if (mode != ModelMode::inference) throw ConfigError(where + ": inference block in train model");
      ib->validate();
      if (ib->in_channels() != channels) throw ShapeError(where, "input channels", channels, ib->in_channels());
      channels = ib->out_channels();
    } else {
      throw ConfigError(where + ": AvgPool/Linear only allowed at the tail");
    }
  }
  const auto& fc = std::get<Linear<T>>(layers.back());
  fc.validate();
  if (fc.in_features != channels) throw ShapeError("Model head", "in_features", channels, fc.in_features);
}

template <typename T>
Tensor4<T> forward(Model<T>& model, const Tensor4<T>& x, Mode mode) {
  if (mode == Mode::eval) return forward(static_cast<const Model<T>&>(model), x);
  Tensor4<T> h = x;
  for (auto& layer : model.layers) {
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, TrainBlock<T>>) {
            h = forward_train(l, h, Mode::train);
          } else if constexpr (std::is_same_v<L, InferenceBlock<T>>) {
            h = forward_infer(l, h);
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            h = global_avgpool(h);
          } else {
            h = linear(h, l);
          }
        },
        layer);
  }
  return h;
}

template <typename T>
Tensor4<T> forward(const Model<T>& model, const Tensor4<T>& x) {
  if (x.c() != model.in_channels) throw ShapeError("forward", "input channels", model.in_channels, x.c());
  Tensor4<T> h = x;
  for (const auto& layer : model.layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, TrainBlock<T>>) {
            h = forward_eval(l, h);
          } else if constexpr (std::is_same_v<L, InferenceBlock<T>>) {
            h = forward_infer(l, h);
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            h = global_avgpool(h);
          } else {
            h = linear(h, l);
          }
        },
        layer);
  }
  return h;
}

namespace {

template <typename U, typename T>
std::vector<U> cast_vec(const std::vector<T>& v) {
  return std::vector<U>(v.begin(), v.end());
}

template <typename U, typename T>
ConvSpec<U> cast_conv(const ConvSpec<T>& c) {
  return {c.weight.template cast<U>(), cast_vec<U>(c.bias), c.stride, c.padding, c.groups};
}

template <typename U, typename T>
BNParams<U> cast_bn(const BNParams<T>& b) {
  return {cast_vec<U>(b.mu), cast_vec<U>(b.sigma), cast_vec<U>(b.gamma), cast_vec<U>(b.beta),
          static_cast<U>(b.eps)};
}

template <typename U, typename T>
std::optional<SEParams<U>> cast_se(const std::optional<SEParams<T>>& s) {
  if (!s) return std::nullopt;
  return SEParams<U>{cast_conv<U>(s->reduce), cast_conv<U>(s->expand), s->ratio};
}

template <typename U, typename T>
TrainBlock<U> cast_block(const TrainBlock<T>& b) {
  TrainBlock<U> out{b.kind, b.activation, {}};
  for (const auto& st : b.stages) {
    TrainStage<U> s;
    for (const auto& br : st.branches) s.branches.push_back({cast_conv<U>(br.conv), cast_bn<U>(br.bn)});
    if (st.scale) s.scale = ConvBN<U>{cast_conv<U>(st.scale->conv), cast_bn<U>(st.scale->bn)};
    if (st.skip) s.skip = cast_bn<U>(*st.skip);
    s.se = cast_se<U>(st.se);
    out.stages.push_back(std::move(s));
  }
  return out;
}

template <typename U, typename T>
InferenceBlock<U> cast_block(const InferenceBlock<T>& b) {
  InferenceBlock<U> out{b.kind, b.activation, {}};
  for (const auto& st : b.stages) out.stages.push_back({cast_conv<U>(st.conv), cast_se<U>(st.se)});
  return out;
}

}  // namespace

template <typename U, typename T>
Model<U> cast_model(const Model<T>& m) {
  Model<U> out;
  out.name = m.name;
  out.mode = m.mode;
  out.input_resolution = m.input_resolution;
  out.in_channels = m.in_channels;
  for (const auto& layer : m.layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, AvgPool>) {
            out.layers.emplace_back(AvgPool{});
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            out.layers.emplace_back(
                Linear<U>{l.in_features, l.out_features, cast_vec<U>(l.weight), cast_vec<U>(l.bias)});
          } else {
            out.layers.emplace_back(cast_block<U>(l));
          }
        },
        layer);
  }
  return out;
}

template struct Model<float>;
template struct Model<double>;
template Tensor4<float> forward(Model<float>&, const Tensor4<float>&, Mode);
template Tensor4<double> forward(Model<double>&, const Tensor4<double>&, Mode);
template Tensor4<float> forward(const Model<float>&, const Tensor4<float>&);
template Tensor4<double> forward(const Model<double>&, const Tensor4<double>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, float>(const Model<float>&);
template Model<double> cast_model<double, double>(const Model<double>&);

}  // namespace mobileone
