#include <cmath>
#include <fstream>
#include <numbers>

#include "mobileone/random.hpp"
#include "mobileone/train.hpp"

namespace mobileone {

namespace {

// Per-class prototype layout.
enum Proto : std::size_t { kFx, kFy, kCx, kCy, kWidth, kPerChannel };
// Per channel: texture weight, texture phase, blob colour.
constexpr std::size_t kChannelStride = 3;
// Per-sample jitter: amplitude, phase shift, blob dx, blob dy.
enum Jitter : std::size_t { kAmp, kPhase, kDx, kDy, kJitterCount };

constexpr double kTau = 2.0 * std::numbers::pi;

}  // namespace

Dataset Dataset::synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 1) throw ConfigError("synthetic dataset: classes must be >= 1");
  if (spec.channels < 1) throw ConfigError("synthetic dataset: channels must be >= 1");
  if (!(spec.noise >= 0.0)) throw ConfigError("synthetic dataset: noise must be >= 0");
  Dataset ds;
  ds.classes_ = spec.classes;
  ds.channels_ = spec.channels;
  ds.noise_ = spec.noise;
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    std::vector<double> p(kPerChannel + kChannelStride * spec.channels);
    const double angle = kTau * (static_cast<double>(k) + 0.5 * u01(rng)) / static_cast<double>(spec.classes);
    const double freq = 1.5 + 2.5 * u01(rng);
    p[kFx] = freq * std::cos(angle);
    p[kFy] = freq * std::sin(angle);
    p[kCx] = 0.25 + 0.5 * u01(rng);
    p[kCy] = 0.25 + 0.5 * u01(rng);
    p[kWidth] = 0.12 + 0.08 * u01(rng);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      p[kPerChannel + kChannelStride * c] = 0.5 + 0.5 * u01(rng);
      p[kPerChannel + kChannelStride * c + 1] = kTau * u01(rng);
      p[kPerChannel + kChannelStride * c + 2] = 2.0 * u01(rng) - 1.0;
    }
    ds.prototypes_.push_back(std::move(p));
  }
  auto make = [&](std::size_t count, std::vector<Sample>& out) {
    for (std::size_t i = 0; i < count; ++i) {
      Sample s;
      s.label = i % spec.classes;
      s.params.resize(kJitterCount);
      s.params[kAmp] = 0.7 + 0.6 * u01(rng);
      s.params[kPhase] = kTau * u01(rng);
      s.params[kDx] = 0.2 * u01(rng) - 0.1;
      s.params[kDy] = 0.2 * u01(rng) - 0.1;
      s.seed = rng();
      out.push_back(std::move(s));
    }
  };
  make(spec.train_size, ds.train_);
  make(spec.val_size, ds.val_);
  return ds;
}

Dataset Dataset::cifar_binary(const std::filesystem::path& path, double val_fraction, std::size_t max_records) {
  constexpr std::size_t kSide = 32, kChannels = 3, kRecord = 1 + kChannels * kSide * kSide;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw FormatError("dataset " + path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of the 3073-byte CIFAR record");
  }
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("cifar_binary: val_fraction must lie in [0, 1)");
  std::size_t records = bytes.size() / kRecord;
  if (max_records > 0) records = std::min(records, max_records);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(records) * val_fraction));
  Dataset ds;
  ds.channels_ = kChannels;
  for (std::size_t r = 0; r < records; ++r) {
    const char* rec = bytes.data() + r * kRecord;
    Sample s;
    s.label = static_cast<unsigned char>(rec[0]);
    s.side = kSide;
    s.pixels.assign(reinterpret_cast<const std::uint8_t*>(rec + 1),
                    reinterpret_cast<const std::uint8_t*>(rec + kRecord));
    ds.classes_ = std::max(ds.classes_, s.label + 1);
    (r + n_val < records ? ds.train_ : ds.val_).push_back(std::move(s));
  }
  return ds;
}

double Dataset::pixel(const Sample& s, std::size_t c, double u, double v) const {
  if (s.side > 0) {
    const auto i = std::min(s.side - 1, static_cast<std::size_t>(v * static_cast<double>(s.side)));
    const auto j = std::min(s.side - 1, static_cast<std::size_t>(u * static_cast<double>(s.side)));
    const double raw = s.pixels[(c * s.side + i) * s.side + j] / 255.0;
    return (raw - 0.5) / 0.25;
  }
  const auto& p = prototypes_[s.label];
  const double w = p[kPerChannel + kChannelStride * c];
  const double phi = p[kPerChannel + kChannelStride * c + 1];
  const double colour = p[kPerChannel + kChannelStride * c + 2];
  const double texture = w * std::sin(kTau * (p[kFx] * u + p[kFy] * v) + phi + s.params[kPhase]);
  const double du = u - p[kCx] - s.params[kDx], dv = v - p[kCy] - s.params[kDy];
  const double blob = colour * std::exp(-(du * du + dv * dv) / (2.0 * p[kWidth] * p[kWidth]));
  return s.params[kAmp] * (texture + 1.5 * blob);
}

template <typename T>
Tensor4<T> Dataset::images(bool train, std::span<const std::size_t> indices, std::size_t resolution) const {
  if (resolution < 1) throw ConfigError("Dataset::images: resolution must be positive");
  const auto& samples = split(train);
  Tensor4<T> x({indices.size(), channels_, resolution, resolution});
  const double step = 1.0 / static_cast<double>(resolution);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    if (indices[n] >= samples.size()) {
      throw ShapeError("Dataset::images", "sample index", samples.size(), indices[n]);
    }
    const Sample& s = samples[indices[n]];
    const double noise = s.side > 0 ? 0.0 : noise_;
    Rng rng(s.seed ^ (0x9e3779b97f4a7c15ULL * resolution));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t i = 0; i < resolution; ++i) {
        for (std::size_t j = 0; j < resolution; ++j) {
          const double u = (static_cast<double>(j) + 0.5) * step, v = (static_cast<double>(i) + 0.5) * step;
          double value = pixel(s, c, u, v);
          if (noise > 0.0) value += noise * gauss(rng);
          x(n, c, i, j) = static_cast<T>(value);
        }
      }
    }
  }
  return x;
}

std::vector<std::size_t> Dataset::labels(bool train, std::span<const std::size_t> indices) const {
  const auto& samples = split(train);
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= samples.size()) throw ShapeError("Dataset::labels", "sample index", samples.size(), i);
    out.push_back(samples[i].label);
  }
  return out;
}

template Tensor4<float> Dataset::images<float>(bool, std::span<const std::size_t>, std::size_t) const;
template Tensor4<double> Dataset::images<double>(bool, std::span<const std::size_t>, std::size_t) const;

}  // namespace mobileone
