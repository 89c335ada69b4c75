#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "mobileone/ops.hpp"
#include "mobileone/random.hpp"

namespace mobileone {

enum class Activation { relu, se_relu };
enum class Mode { train, eval };

/// separable: 3x3 depthwise stage followed by a 1x1 pointwise stage.
/// dense: a single full 3x3 conv stage (the network stem, which maps the
/// 3-channel image to the first feature width).
enum class BlockKind { separable, dense };

const char* to_string(Activation a);
const char* to_string(BlockKind k);

/// Branch inventory of one re-parameterizable stage.
struct BranchConfig {
  int k = 1;
  int kernel = 3;
  bool has_scale_branch = false;
  bool has_skip_bn = false;

  void validate() const;
  /// Branches folded at reparameterization time: k + scale + skip.
  int live_branches() const noexcept { return k + (has_scale_branch ? 1 : 0) + (has_skip_bn ? 1 : 0); }
};

template <typename T>
struct ConvBN {
  ConvSpec<T> conv;
  BNParams<T> bn;
};

/// One train-time stage: k KxK conv+BN branches, an optional 1x1 conv+BN scale
/// branch, an optional BN-only skip branch, optional SE, then ReLU.
template <typename T>
struct TrainStage {
  std::vector<ConvBN<T>> branches;
  std::optional<ConvBN<T>> scale;
  std::optional<BNParams<T>> skip;
  std::optional<SEParams<T>> se;

  const ConvSpec<T>& lead() const { return branches.front().conv; }
  std::size_t in_channels() const { return lead().in_channels(); }
  std::size_t out_channels() const { return lead().out_channels(); }
  std::size_t kernel() const { return lead().kernel(); }
  std::size_t stride() const { return lead().stride; }
  std::size_t groups() const { return lead().groups; }

  BranchConfig config() const;
  std::size_t param_count() const;
  void validate() const;
};

template <typename T>
struct TrainBlock {
  BlockKind kind = BlockKind::separable;
  Activation activation = Activation::relu;
  std::vector<TrainStage<T>> stages;

  std::size_t in_channels() const { return stages.front().in_channels(); }
  std::size_t out_channels() const { return stages.back().out_channels(); }
  std::size_t stride() const { return stages.front().stride(); }
  std::size_t param_count() const;
  void validate() const;
};

template <typename T>
struct InferStage {
  ConvSpec<T> conv;
  std::optional<SEParams<T>> se;
};

/// Branch-free block: one conv per stage, no batchnorm.
template <typename T>
struct InferenceBlock {
  BlockKind kind = BlockKind::separable;
  Activation activation = Activation::relu;
  std::vector<InferStage<T>> stages;

  std::size_t in_channels() const { return stages.front().conv.in_channels(); }
  std::size_t out_channels() const { return stages.back().conv.out_channels(); }
  std::size_t stride() const { return stages.front().conv.stride; }
  std::size_t param_count() const;
  void validate() const;
};

struct InitPolicy {
  std::uint64_t seed = 0;
  /// Draw BN statistics and affine terms (and inference biases) at random instead
  /// of the identity init; equivalence tests need non-trivial BN state.
  bool randomize_bn = false;
};

struct BlockOptions {
  BlockKind kind = BlockKind::separable;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  int k = 1;
  /// Add the 1x1 scale branch to every stage whose kernel is larger than 1.
  bool scale_branch = true;
  /// Add a BN skip branch to every stage where it is legal (stride 1, C_in == C_out).
  bool skip = true;
  Activation activation = Activation::relu;
  std::size_t se_ratio = 16;
};

/// Builds a train stage with an explicit inventory. Throws ConfigError when the
/// skip branch is requested on a stage that is strided or changes channel count.
template <typename T>
TrainStage<T> make_train_stage(std::size_t in_channels, std::size_t out_channels,
                               std::size_t stride, std::size_t groups, const BranchConfig& cfg,
                               bool with_se, std::size_t se_ratio, Rng& rng,
                               const InitPolicy& init);

template <typename T>
TrainBlock<T> make_train_block(const BlockOptions& opts, Rng& rng, const InitPolicy& init);

template <typename T>
InferenceBlock<T> make_inference_block(const BlockOptions& opts, Rng& rng, const InitPolicy& init);

template <typename T>
SEParams<T> make_se(std::size_t channels, std::size_t ratio, Rng& rng, const InitPolicy& init);

/// Everything a train-mode stage forward keeps for its adjoint.
template <typename T>
struct StageCache {
  Tensor4<T> input;
  std::vector<BNCache<T>> branch_bn;
  std::optional<BNCache<T>> scale_bn;
  std::optional<BNCache<T>> skip_bn;
  Tensor4<T> branch_sum;     // sum of all branches, before SE
  Tensor4<T> se_pooled;      // (N, C, 1, 1)
  Tensor4<T> se_reduced;     // reduce conv output, before ReLU
  Tensor4<T> se_gate;        // sigmoid output
  Tensor4<T> pre_activation; // input of the final ReLU
};

template <typename T>
struct BlockCache {
  std::vector<StageCache<T>> stages;
};

/// Multi-branch forward. Branches are summed in a fixed order: conv branches
/// ascending, then the scale branch, then the skip branch. In train mode the
/// batchnorms use batch statistics and update their running state in place.
template <typename T>
Tensor4<T> forward_train(TrainBlock<T>& block, const Tensor4<T>& x, Mode mode,
                         T momentum = T(0.1), BlockCache<T>* cache = nullptr);

/// Eval-mode forward of a train block (running BN statistics, no mutation).
template <typename T>
Tensor4<T> forward_eval(const TrainBlock<T>& block, const Tensor4<T>& x);

template <typename T>
Tensor4<T> forward_infer(const InferenceBlock<T>& block, const Tensor4<T>& x);

}  // namespace mobileone
