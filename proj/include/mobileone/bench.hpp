#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mobileone/model.hpp"
#include "mobileone/ops.hpp"

namespace mobileone {

using Nanos = std::chrono::nanoseconds;

struct LatencyStats {
  Nanos min{0}, median{0}, p90{0}, p99{0}, mean{0};
  std::size_t iterations = 0;
  std::size_t warmup = 0;
};

/// Nearest-rank percentile (p in (0, 100]) of an ascending-sorted sample.
Nanos percentile(std::span<const Nanos> sorted, double p);

LatencyStats summarize(std::vector<Nanos> samples, std::size_t warmup);

using Runner = std::function<void(const Tensor4<float>&)>;

/// Times `iters` runs of `runner` on one preallocated input after `warmup`
/// untimed runs. A throwing runner aborts with the failing iteration index.
LatencyStats benchmark(const Runner& runner, Shape4 input_shape, std::size_t warmup = 1,
                       std::size_t iters = 1000, std::uint64_t seed = 0);

/// Same protocol for several runners, timed round-robin (one sample of each per
/// round) so slow periods of a shared machine land on every runner alike.
std::vector<LatencyStats> benchmark_interleaved(const std::vector<Runner>& runners, Shape4 input_shape,
                                                std::size_t warmup = 1, std::size_t iters = 1000,
                                                std::uint64_t seed = 0);

Runner model_runner(const Model<float>& model);

struct SpearmanResult {
  double rho = 0;
  /// Two-sided, from t = rho sqrt((n - 2) / (1 - rho^2)) with n - 2 degrees of freedom.
  double p_value = 1;
  /// Exact two-sided permutation p-value, filled for n <= 10.
  std::optional<double> p_exact;
  std::size_t n = 0;
};

/// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> midranks(std::span<const double> xs);
double pearson(std::span<const double> xs, std::span<const double> ys);
SpearmanResult spearman(std::span<const double> xs, std::span<const double> ys);

/// One row of the published comparison table; GPU latency is absent for some models.
struct PublishedRow {
  std::string model;
  double flops_m = 0;
  double params_m = 0;
  double cpu_ms = 0;
  std::optional<double> gpu_ms;
  double mobile_ms = 0;
};

std::vector<PublishedRow> load_published_table(const std::filesystem::path& path);
std::filesystem::path default_published_table();

struct CorrReport {
  std::string x_metric;
  std::string y_metric;
  SpearmanResult result;
};

/// Correlates two named columns (flops_m, params_m, cpu_ms, gpu_ms, mobile_ms),
/// dropping rows where either value is missing.
CorrReport correlate(const std::vector<PublishedRow>& rows, const std::string& x_metric, const std::string& y_metric);

enum class AblationActivation { relu, gelu, silu, se_relu };

AblationActivation parse_ablation_activation(const std::string& name);
std::string to_string(AblationActivation a);

struct AblationSpec {
  std::size_t depth = 30;
  std::size_t channels = 64;
  std::size_t resolution = 56;
  AblationActivation activation = AblationActivation::relu;
  bool with_se = false;
  bool with_skip = false;
  std::size_t se_ratio = 16;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Plain stack of 3x3 stride-1 convs at constant width, each followed by the
/// activation, an optional SE unit and an optional residual add of the layer input.
struct AblationNet {
  AblationSpec spec;
  std::vector<ConvSpec<float>> convs;
  std::vector<SEParams<float>> se;  // empty unless SE is on

  Shape4 input_shape(std::size_t batch = 1) const;
  std::size_t param_count() const;
  std::size_t macs() const;
};

AblationNet ablation_net(const AblationSpec& spec);
Tensor4<float> forward(const AblationNet& net, const Tensor4<float>& x);

struct ReportRow {
  std::string name;
  std::size_t params = 0;
  std::size_t macs = 0;
  int threads = 1;
  LatencyStats stats;
};

enum class ReportFormat { csv, json };

ReportFormat parse_report_format(const std::string& name);
const std::vector<std::string>& report_columns();
std::string report_to_csv(const std::vector<ReportRow>& rows);
std::string report_to_json(const std::vector<ReportRow>& rows);
std::vector<ReportRow> report_from_csv(const std::string& text);
std::vector<ReportRow> report_from_json(const std::string& text);
std::string format_report(const std::vector<ReportRow>& rows, ReportFormat format);
void emit_report(const std::vector<ReportRow>& rows, ReportFormat format, const std::filesystem::path& path);

}  // namespace mobileone
