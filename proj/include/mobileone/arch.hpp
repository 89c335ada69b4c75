#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mobileone/model.hpp"

namespace mobileone {

/// One row of the variant table: `blocks` MobileOne blocks whose first block
/// carries the stride and the channel change.
struct StageSpec {
  int blocks = 1;
  int stride = 1;
  int base_channels = 64;
  double alpha = 1.0;
  int k = 1;
  Activation activation = Activation::relu;
  BlockKind kind = BlockKind::separable;
  /// Upper bound on the stage width; 0 means uncapped.
  int max_channels = 0;

  /// round(base_channels * alpha), capped by max_channels when set.
  std::size_t channels() const;
  void validate() const;
};

struct ArchSpec {
  std::string name;
  std::vector<StageSpec> stages;
  std::size_t num_classes = 1000;
  std::size_t in_channels = 3;
  /// Train-time branch inventory switches shared by every block.
  bool scale_branch = true;
  bool skip_branch = true;
  std::size_t se_ratio = 16;

  /// Classifier input width: the last stage's channel count.
  std::size_t feature_width() const;
  void validate() const;
};

/// Published variants: S0..S4 and mu0..mu2 (also accepted as "μ0".."μ2").
ArchSpec variant_spec(std::string_view name);
std::vector<std::string> variant_names();

std::string arch_to_json(const ArchSpec& spec);
ArchSpec arch_from_json(std::string_view json);

template <typename T>
Model<T> build_model(const ArchSpec& spec, ModelMode mode, const InitPolicy& init = {});

/// Scalar parameter count: conv weights and biases, BN (mu, sigma, gamma, beta)
/// in train mode, SE convs, classifier.
template <typename T>
std::size_t count_params(const Model<T>& model);

/// Multiply-accumulate count of one forward at input_res x input_res, batch 1.
/// Convs and the classifier count C_out*H_out*W_out*(C_in/groups)*K^2 and
/// in*out; average pools (head and SE squeeze) count one per input element;
/// the SE gating product is not counted. Inference-mode models only.
template <typename T>
std::size_t count_flops(const Model<T>& model, std::size_t input_res);

}  // namespace mobileone
