#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mobileone/block.hpp"
#include "mobileone/model.hpp"

// Structural re-parameterization: every train-time branch is linear up to the
// activation, so each one can be written as a KxK convolution with bias and the
// branches summed into a single convolution.

namespace mobileone {

/// A BN-folded convolution: weight (C_out, C_in/groups, K, K) and bias (C_out).
template <typename T>
struct FoldedConv {
  Tensor4<T> weight;
  std::vector<T> bias;
};

/// W_hat[c] = W[c] * gamma_c / sqrt(sigma_c^2 + eps)
/// b_hat[c] = (b[c] - mu_c) * gamma_c / sqrt(sigma_c^2 + eps) + beta_c
template <typename T>
FoldedConv<T> fold_bn(const ConvSpec<T>& conv, const BNParams<T>& bn);

/// KxK convolution acting as the identity map: center tap 1 from channel c to c.
template <typename T>
ConvSpec<T> identity_as_conv(std::size_t channels, std::size_t groups, std::size_t kernel);

/// Zero-pads the kernel centrally to `target` and widens padding to match, so the
/// result computes the same function on every input.
template <typename T>
ConvSpec<T> pad_kernel(const ConvSpec<T>& conv, std::size_t target);

/// Elementwise sum of weights and biases, in list order.
template <typename T>
FoldedConv<T> merge_branches(std::span<const FoldedConv<T>> branches);

template <typename T>
InferStage<T> reparameterize_stage(const TrainStage<T>& stage);

template <typename T>
InferenceBlock<T> reparameterize_block(const TrainBlock<T>& block);

/// Replaces every TrainBlock by its inference form. Already-folded models come
/// back unchanged. Throws when BN running statistics are missing or non-finite.
template <typename T>
Model<T> reparameterize_model(const Model<T>& model);

}  // namespace mobileone
