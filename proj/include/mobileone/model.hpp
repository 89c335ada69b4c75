#pragma once

#include <cstddef>
#include <span>
#include <type_traits>
#include <string>
#include <variant>
#include <vector>

#include "mobileone/block.hpp"

namespace mobileone {

struct AvgPool {};

template <typename T>
using Layer = std::variant<TrainBlock<T>, InferenceBlock<T>, AvgPool, Linear<T>>;

enum class ModelMode { train, inference };

const char* to_string(ModelMode m);

/// Ordered layer sequence: MobileOne blocks, then one AvgPool and one Linear.
template <typename T>
struct Model {
  std::string name;
  ModelMode mode = ModelMode::inference;
  std::size_t input_resolution = 224;
  std::size_t in_channels = 3;
  std::vector<Layer<T>> layers;

  std::size_t num_classes() const;
  std::size_t block_count() const;
  /// Channel chaining, head placement and train/inference consistency.
  void validate() const;
};

/// Logits (N, classes, 1, 1). Train mode runs batch-statistics BN and updates
/// running stats; eval mode leaves the model untouched.
template <typename T>
Tensor4<T> forward(Model<T>& model, const Tensor4<T>& x, Mode mode);

template <typename T>
Tensor4<T> forward(const Model<T>& model, const Tensor4<T>& x);

template <typename U, typename T>
Model<U> cast_model(const Model<T>& m);

/// Trainable parameters versus running statistics (BN mean and std).
enum class TensorRole { parameter, buffer };

namespace detail {

template <typename Conv, typename Fn>
void visit_conv(const std::string& prefix, Conv& c, Fn& fn) {
  const auto& s = c.weight.shape();
  fn(prefix + ".weight", std::span(c.weight.storage()), std::vector<std::size_t>{s.n, s.c, s.h, s.w},
     TensorRole::parameter);
  if (!c.bias.empty()) {
    fn(prefix + ".bias", std::span(c.bias), std::vector<std::size_t>{c.bias.size()}, TensorRole::parameter);
  }
}

template <typename BN, typename Fn>
void visit_bn(const std::string& prefix, BN& bn, Fn& fn) {
  const std::vector<std::size_t> dims{bn.gamma.size()};
  fn(prefix + ".mu", std::span(bn.mu), dims, TensorRole::buffer);
  fn(prefix + ".sigma", std::span(bn.sigma), dims, TensorRole::buffer);
  fn(prefix + ".gamma", std::span(bn.gamma), dims, TensorRole::parameter);
  fn(prefix + ".beta", std::span(bn.beta), dims, TensorRole::parameter);
}

template <typename SE, typename Fn>
void visit_se(const std::string& prefix, SE& se, Fn& fn) {
  visit_conv(prefix + ".reduce", se.reduce, fn);
  visit_conv(prefix + ".expand", se.expand, fn);
}

}  // namespace detail

/// Calls fn(name, span, dims, role) for every tensor of the model in a fixed
/// order. Names are stable and used by both the weight container and the
/// optimizer state, e.g. "layers.3.stages.0.branches.1.bn.gamma".
template <typename ModelT, typename Fn>
void visit_tensors(ModelT& model, Fn&& fn) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const std::string lp = "layers." + std::to_string(i);
    std::visit(
        [&](auto& l) {
          if constexpr (requires { l.stages.front().branches; }) {
            for (std::size_t j = 0; j < l.stages.size(); ++j) {
              auto& st = l.stages[j];
              const std::string sp = lp + ".stages." + std::to_string(j);
              for (std::size_t b = 0; b < st.branches.size(); ++b) {
                const std::string bp = sp + ".branches." + std::to_string(b);
                detail::visit_conv(bp + ".conv", st.branches[b].conv, fn);
                detail::visit_bn(bp + ".bn", st.branches[b].bn, fn);
              }
              if (st.scale) {
                detail::visit_conv(sp + ".scale.conv", st.scale->conv, fn);
                detail::visit_bn(sp + ".scale.bn", st.scale->bn, fn);
              }
              if (st.skip) detail::visit_bn(sp + ".skip", *st.skip, fn);
              if (st.se) detail::visit_se(sp + ".se", *st.se, fn);
            }
          } else if constexpr (requires { l.stages.front().conv; }) {
            for (std::size_t j = 0; j < l.stages.size(); ++j) {
              auto& st = l.stages[j];
              const std::string sp = lp + ".stages." + std::to_string(j);
              detail::visit_conv(sp + ".conv", st.conv, fn);
              if (st.se) detail::visit_se(sp + ".se", *st.se, fn);
            }
          } else if constexpr (requires { l.in_features; }) {
            fn(lp + ".weight", std::span(l.weight), std::vector<std::size_t>{l.out_features, l.in_features},
               TensorRole::parameter);
            fn(lp + ".bias", std::span(l.bias), std::vector<std::size_t>{l.out_features}, TensorRole::parameter);
          }
        },
        model.layers[i]);
  }
}

}  // namespace mobileone
