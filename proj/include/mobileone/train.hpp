#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mobileone/arch.hpp"
#include "mobileone/model.hpp"

namespace mobileone {

/// v1 + 0.5 (v0 - v1) (1 + cos(pi t / T)), for 0 <= t <= T.
double cosine_value(std::size_t t, double v0, double v1, std::size_t T);

/// Learning-rate and weight-decay schedules over T optimizer steps. Both follow
/// the same cosine curve; with anneal_wd off the decay stays at wd0.
struct ScheduleSpec {
  double lr0 = 0.1;
  double lrT = 0.0;
  double wd0 = 1e-4;
  double wdT = 1e-5;
  std::size_t T = 1;
  bool anneal_wd = true;

  double lr(std::size_t t) const;
  double wd(std::size_t t) const;
  void validate() const;
};

struct CurriculumPhase {
  std::size_t begin = 0;  // first epoch, inclusive
  std::size_t end = 0;    // exclusive
  std::size_t resolution = 224;
  double strength = 1.0;  // carried for completeness; no augmentation consumes it
};

/// Progressive-learning schedule: epoch ranges partitioning [0, epochs).
struct CurriculumSpec {
  std::vector<CurriculumPhase> phases;

  std::size_t epochs() const;
  const CurriculumPhase& at(std::size_t epoch) const;
  void validate() const;

  /// The 300-epoch ImageNet recipe: 160 px until epoch 39, 192 px until 114, then 224 px.
  static CurriculumSpec imagenet();
  /// One phase covering every epoch at a fixed resolution.
  static CurriculumSpec constant(std::size_t epochs, std::size_t resolution);
  /// Rescales epoch boundaries to `epochs` and resolutions by `resolution / 224`,
  /// keeping the phase proportions of this schedule.
  CurriculumSpec rescaled(std::size_t epochs, std::size_t resolution) const;
};

template <typename T>
struct LossResult {
  T loss{};
  Tensor4<T> grad;  // d loss / d logits, same shape as the logits
};

/// Mean cross entropy against (1 - s) onehot + s / classes. Logits are (N, classes, 1, 1).
template <typename T>
LossResult<T> label_smoothed_ce(const Tensor4<T>& logits, std::span<const std::size_t> targets,
                                T smoothing = T(0.1));

/// Gradients keyed by the tensor names of visit_tensors (parameters only).
template <typename T>
using GradMap = std::map<std::string, std::vector<T>>;

template <typename T>
struct BackwardResult {
  T loss{};
  Tensor4<T> logits;
  GradMap<T> grads;
};

struct BackwardOptions {
  double smoothing = 0.1;
  double bn_momentum = 0.1;
  /// Multiplies the loss before differentiation.
  double loss_scale = 1.0;
};

/// Train-mode forward (batch-statistics BN, running stats updated in place),
/// loss, and exact reverse-mode gradients for every parameter. Throws
/// ConfigError for inference-mode models.
template <typename T>
BackwardResult<T> backward(Model<T>& model, const Tensor4<T>& x, std::span<const std::size_t> targets,
                           const BackwardOptions& opts = {});

/// Loss of a train-mode forward on a copy of the model; the model is untouched.
template <typename T>
T train_loss(const Model<T>& model, const Tensor4<T>& x, std::span<const std::size_t> targets,
             double smoothing = 0.1);

/// Replaces every BN running statistic with the batch statistics of `x`, so a
/// freshly initialized train-form model has a well-scaled eval forward.
template <typename T>
void calibrate_bn(Model<T>& model, const Tensor4<T>& x);

/// Optimizer state. Momentum buffers track parameters; the EMA shadow tracks
/// every tensor (parameters and BN running statistics) so it forms a usable model.
template <typename T>
struct TrainState {
  std::map<std::string, std::vector<T>> velocity;
  std::map<std::string, std::vector<T>> ema;
  std::size_t step = 0;
  std::size_t total_steps = 1;
  double ema_decay = 0.9995;
};

template <typename T>
TrainState<T> init_train_state(const Model<T>& model, std::size_t total_steps, double ema_decay = 0.9995);

struct SgdOptions {
  double lr = 0.1;
  double weight_decay = 1e-4;
  double momentum = 0.9;
};

/// g += wd * p; v = m v + g; p -= lr v; ema = d ema + (1 - d) p. Throws
/// ShapeError when a gradient is missing or has the wrong size.
template <typename T>
void sgd_step(Model<T>& model, TrainState<T>& state, const GradMap<T>& grads, const SgdOptions& opts);

/// Copy of the model carrying the EMA shadow values.
template <typename T>
Model<T> ema_model(const Model<T>& model, const TrainState<T>& state);

/// Deterministic textured-blob images: every class owns a sinusoidal texture
/// and a Gaussian blob position; samples jitter phase, position and amplitude
/// and add pixel noise. Samples are stored as parameters and rendered at any
/// resolution, so a curriculum can change the input size between epochs.
struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t channels = 3;
  std::size_t train_size = 256;
  std::size_t val_size = 64;
  double noise = 0.3;
  std::uint64_t seed = 0;
};

class Dataset {
 public:
  static Dataset synthetic(const SyntheticSpec& spec);
  /// CIFAR-10 binary batch (1 label byte + 3x32x32 bytes per record). The last
  /// `val_fraction` of the records is held out for validation.
  static Dataset cifar_binary(const std::filesystem::path& path, double val_fraction = 0.2,
                              std::size_t max_records = 0);

  std::size_t classes() const noexcept { return classes_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t train_size() const noexcept { return train_.size(); }
  std::size_t val_size() const noexcept { return val_.size(); }

  /// Renders the selected samples at resolution x resolution.
  template <typename T>
  Tensor4<T> images(bool train, std::span<const std::size_t> indices, std::size_t resolution) const;
  std::vector<std::size_t> labels(bool train, std::span<const std::size_t> indices) const;

 private:
  struct Sample {
    std::size_t label = 0;
    std::vector<double> params;      // synthetic rendering parameters
    std::uint64_t seed = 0;          // pixel-noise stream
    std::vector<std::uint8_t> pixels;  // stored images (channels x side x side)
    std::size_t side = 0;
  };
  const std::vector<Sample>& split(bool train) const { return train ? train_ : val_; }
  double pixel(const Sample& s, std::size_t c, double u, double v) const;

  std::size_t classes_ = 0;
  std::size_t channels_ = 3;
  double noise_ = 0.0;
  std::vector<std::vector<double>> prototypes_;
  std::vector<Sample> train_;
  std::vector<Sample> val_;
};

struct TrainConfig {
  ArchSpec arch;
  SyntheticSpec data;
  ScheduleSpec schedule;  // T is derived from epochs and batch count
  CurriculumSpec curriculum;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double smoothing = 0.1;
  double ema_decay = 0.9995;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;
  /// Optional CIFAR-10 binary file replacing the synthetic set.
  std::string dataset_path;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean train-mode batch loss over the epoch
  double val_loss = 0;    // eval-mode loss on the validation split
  double lr = 0;          // at the last step of the epoch
  double wd = 0;
  std::size_t resolution = 0;
};

template <typename T>
struct TrainLog {
  std::vector<EpochLog> epochs;
  Model<T> model;
  TrainState<T> state;
};

/// Trains a train-mode model built from config.arch. Throws NumericError with
/// the epoch and step when the loss stops being finite.
template <typename T>
TrainLog<T> train_toy(const TrainConfig& config);

/// Continues training an existing train-mode model for `steps` optimizer steps
/// on the synthetic set at a fixed resolution. Returns the per-step losses.
template <typename T>
std::vector<double> train_steps(Model<T>& model, const SyntheticSpec& data, std::size_t steps,
                                std::size_t batch_size, std::size_t resolution, const ScheduleSpec& schedule,
                                std::uint64_t seed);

std::string log_to_csv(const std::vector<EpochLog>& log);
void write_log_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path);

std::string config_to_json(const TrainConfig& config);
/// Accepts "arch" either as a variant name or an inline ArchSpec object.
TrainConfig config_from_json(std::string_view text);

/// Small network for desk-scale training runs: a 16-wide dense stem, two
/// separable 16-wide blocks and two 32-wide ones, with the branch inventory
/// chosen by (k, scale, skip).
ArchSpec toy_arch(int k, bool scale_branch, bool skip_branch, std::size_t classes = 4);

}  // namespace mobileone
