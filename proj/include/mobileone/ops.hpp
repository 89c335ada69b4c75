#pragma once

#include <cstddef>
#include <vector>

#include "mobileone/tensor.hpp"

namespace mobileone {

/// Grouped 2-D convolution parameters.
///
/// `weight` has shape (C_out, C_in / groups, K, K). An empty `bias` means the
/// convolution has no bias term (train-time branch convs feed a batchnorm and
/// carry none); otherwise it holds C_out values.
template <typename T>
struct ConvSpec {
  Tensor4<T> weight;
  std::vector<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  std::size_t out_channels() const noexcept { return weight.n(); }
  std::size_t in_channels() const noexcept { return weight.c() * groups; }
  std::size_t kernel() const noexcept { return weight.h(); }
  bool has_bias() const noexcept { return !bias.empty(); }
  std::size_t param_count() const noexcept { return weight.size() + bias.size(); }

  /// Throws ConfigError/ShapeError when the spec violates its invariants.
  void validate() const;
  /// Output spatial extent for an input extent, floor semantics.
  std::size_t out_extent(std::size_t in) const;
};

/// Batchnorm state. `sigma` is the running standard deviation; normalization
/// divides by sqrt(sigma^2 + eps).
template <typename T>
struct BNParams {
  std::vector<T> mu;
  std::vector<T> sigma;
  std::vector<T> gamma;
  std::vector<T> beta;
  T eps = T(1e-5);

  static BNParams identity(std::size_t channels, T eps = T(1e-5));

  std::size_t channels() const noexcept { return gamma.size(); }
  /// Four vectors per channel: mu, sigma, gamma, beta.
  std::size_t param_count() const noexcept { return 4 * channels(); }
  /// gamma_c / sqrt(sigma_c^2 + eps); the per-channel scale shared by inference BN and folding.
  T scale(std::size_t c) const;
  void validate() const;
};

/// Squeeze-Excite: global pool, 1x1 reduce, ReLU, 1x1 expand, sigmoid gate.
template <typename T>
struct SEParams {
  ConvSpec<T> reduce;
  ConvSpec<T> expand;
  std::size_t ratio = 16;

  std::size_t channels() const noexcept { return reduce.in_channels(); }
  std::size_t param_count() const noexcept { return reduce.param_count() + expand.param_count(); }
  void validate() const;
};

/// Fully connected classifier head; weight is row-major (out_features, in_features).
template <typename T>
struct Linear {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  std::size_t param_count() const noexcept { return weight.size() + bias.size(); }
  void validate() const;
};

/// Running statistics of batchnorm_train needed by its adjoint.
template <typename T>
struct BNCache {
  Tensor4<T> x_hat;           // normalized input
  std::vector<T> inv_std;     // 1 / sqrt(var_batch + eps)
};

template <typename T>
struct BNTrainResult {
  Tensor4<T> y;
  BNParams<T> running;
  BNCache<T> cache;
};

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const ConvSpec<T>& spec);

template <typename T>
Tensor4<T> batchnorm_infer(const Tensor4<T>& x, const BNParams<T>& bn);

/// Batch-statistics normalization. Normalizes with the biased batch variance and
/// updates the running statistics with the unbiased one:
/// running = (1 - momentum) * running + momentum * batch.
template <typename T>
BNTrainResult<T> batchnorm_train(const Tensor4<T>& x, const BNParams<T>& bn, T momentum);

template <typename T>
Tensor4<T> relu(Tensor4<T> x);
/// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor4<T> gelu(Tensor4<T> x);
template <typename T>
Tensor4<T> silu(Tensor4<T> x);

template <typename T>
T sigmoid(T v);

template <typename T>
Tensor4<T> global_avgpool(const Tensor4<T>& x);

/// Sigmoid gate values (N, C, 1, 1) the SE block multiplies into x.
template <typename T>
Tensor4<T> se_gate(const Tensor4<T>& x, const SEParams<T>& se);
template <typename T>
Tensor4<T> se_block(const Tensor4<T>& x, const SEParams<T>& se);

/// x is (N, F, 1, 1) or any tensor with C*H*W == F; result is (N, out, 1, 1).
template <typename T>
Tensor4<T> linear(const Tensor4<T>& x, const Linear<T>& fc);

/// Elementwise a += b.
template <typename T>
void add_inplace(Tensor4<T>& a, const Tensor4<T>& b);

}  // namespace mobileone
