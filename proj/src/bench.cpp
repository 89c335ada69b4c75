#include "mobileone/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "mobileone/block.hpp"
#include "mobileone/random.hpp"

namespace mobileone {

Nanos percentile(std::span<const Nanos> sorted, double p) {
  if (sorted.empty()) throw ConfigError("percentile: empty sample");
  if (!(p > 0.0 && p <= 100.0)) throw ConfigError("percentile: p must lie in (0, 100]");
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

LatencyStats summarize(std::vector<Nanos> samples, std::size_t warmup) {
  if (samples.empty()) throw ConfigError("summarize: need at least one timed iteration");
  std::sort(samples.begin(), samples.end());
  LatencyStats s;
  s.iterations = samples.size();
  s.warmup = warmup;
  s.min = samples.front();
  s.median = percentile(samples, 50);
  s.p90 = percentile(samples, 90);
  s.p99 = percentile(samples, 99);
  long double total = 0;
  for (Nanos d : samples) total += static_cast<long double>(d.count());
  s.mean = Nanos(static_cast<Nanos::rep>(std::llround(total / static_cast<long double>(samples.size()))));
  return s;
}

std::vector<LatencyStats> benchmark_interleaved(const std::vector<Runner>& runners, Shape4 input_shape,
                                                std::size_t warmup, std::size_t iters, std::uint64_t seed) {
  if (iters < 1) throw ConfigError("benchmark: iters must be >= 1");
  if (runners.empty()) throw ConfigError("benchmark: no runners");
  for (const auto& r : runners) {
    if (!r) throw ConfigError("benchmark: empty runner");
  }
  Rng rng(seed);
  const Tensor4<float> input = random_tensor<float>(input_shape, rng);
  auto run = [&](std::size_t r, std::size_t i, const char* phase) {
    try {
      runners[r](input);
    } catch (const std::exception& e) {
      std::string who = runners.size() > 1 ? " (runner " + std::to_string(r) + ")" : "";
      throw Error("benchmark: runner failed at " + std::string(phase) + " iteration " + std::to_string(i) + who +
                  ": " + e.what());
    }
  };
  for (std::size_t i = 0; i < warmup; ++i) {
    for (std::size_t r = 0; r < runners.size(); ++r) run(r, i, "warmup");
  }
  std::vector<std::vector<Nanos>> samples(runners.size());
  for (auto& s : samples) s.reserve(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    for (std::size_t r = 0; r < runners.size(); ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      run(r, i, "timed");
      const auto t1 = std::chrono::steady_clock::now();
      samples[r].push_back(std::chrono::duration_cast<Nanos>(t1 - t0));
    }
  }
  std::vector<LatencyStats> out;
  for (auto& s : samples) out.push_back(summarize(std::move(s), warmup));
  return out;
}

LatencyStats benchmark(const Runner& runner, Shape4 input_shape, std::size_t warmup, std::size_t iters,
                       std::uint64_t seed) {
  return benchmark_interleaved({runner}, input_shape, warmup, iters, seed).front();
}

Runner model_runner(const Model<float>& model) {
  return [&model](const Tensor4<float>& x) {
    const Tensor4<float> y = forward(model, x);
    if (y.size() == 0) throw Error("model produced an empty output");
  };
}

AblationActivation parse_ablation_activation(const std::string& name) {
  if (name == "relu") return AblationActivation::relu;
  if (name == "gelu") return AblationActivation::gelu;
  if (name == "silu") return AblationActivation::silu;
  if (name == "se_relu" || name == "se-relu") return AblationActivation::se_relu;
  throw ConfigError("unknown activation '" + name + "'; expected relu, gelu, silu or se_relu");
}

std::string to_string(AblationActivation a) {
  switch (a) {
    case AblationActivation::relu: return "relu";
    case AblationActivation::gelu: return "gelu";
    case AblationActivation::silu: return "silu";
    case AblationActivation::se_relu: return "se_relu";
  }
  return "?";
}

void AblationSpec::validate() const {
  if (depth < 2) throw ConfigError("ablation_net: depth must be >= 2, got " + std::to_string(depth));
  if (channels < 1 || resolution < 1) throw ConfigError("ablation_net: channels and resolution must be positive");
  if (se_ratio < 1) throw ConfigError("ablation_net: se_ratio must be >= 1");
}

Shape4 AblationNet::input_shape(std::size_t batch) const {
  return {batch, spec.channels, spec.resolution, spec.resolution};
}

std::size_t AblationNet::param_count() const {
  std::size_t n = 0;
  for (const auto& c : convs) n += c.param_count();
  for (const auto& s : se) n += s.param_count();
  return n;
}

std::size_t AblationNet::macs() const {
  const std::size_t plane = spec.resolution * spec.resolution;
  std::size_t n = 0;
  for (const auto& c : convs) n += plane * c.weight.size();
  for (const auto& s : se) n += plane * s.channels() + s.reduce.weight.size() + s.expand.weight.size();
  return n;
}

AblationNet ablation_net(const AblationSpec& spec) {
  spec.validate();
  AblationNet net;
  net.spec = spec;
  Rng rng(spec.seed);
  const InitPolicy init{spec.seed, false};
  const bool se = spec.with_se || spec.activation == AblationActivation::se_relu;
  const double stddev = std::sqrt(2.0 / static_cast<double>(spec.channels * 9));
  for (std::size_t i = 0; i < spec.depth; ++i) {
    ConvSpec<float> c;
    c.weight = Tensor4<float>({spec.channels, spec.channels, 3, 3});
    c.bias.assign(spec.channels, 0.0f);
    c.padding = 1;
    fill_normal(c.weight.data(), rng, 0.0, stddev);
    net.convs.push_back(std::move(c));
    if (se) net.se.push_back(make_se<float>(spec.channels, spec.se_ratio, rng, init));
  }
  return net;
}

Tensor4<float> forward(const AblationNet& net, const Tensor4<float>& x) {
  if (x.c() != net.spec.channels) throw ShapeError("ablation forward", "input channels", net.spec.channels, x.c());
  Tensor4<float> h = x;
  for (std::size_t i = 0; i < net.convs.size(); ++i) {
    Tensor4<float> y = conv2d(h, net.convs[i]);
    switch (net.spec.activation) {
      case AblationActivation::gelu: y = gelu(std::move(y)); break;
      case AblationActivation::silu: y = silu(std::move(y)); break;
      default: y = relu(std::move(y)); break;
    }
    if (!net.se.empty()) y = se_block(y, net.se[i]);
    if (net.spec.with_skip) add_inplace(y, h);
    h = std::move(y);
  }
  return h;
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + name + "'; expected csv or json");
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"name",     "params",    "macs",   "threads", "iterations", "warmup",
                                             "min_ns",   "median_ns", "p90_ns", "p99_ns",  "mean_ns"};
  return cols;
}

namespace {

using ordered_json = nlohmann::ordered_json;

std::vector<long long> numeric_fields(const ReportRow& r) {
  return {static_cast<long long>(r.params),
          static_cast<long long>(r.macs),
          r.threads,
          static_cast<long long>(r.stats.iterations),
          static_cast<long long>(r.stats.warmup),
          r.stats.min.count(),
          r.stats.median.count(),
          r.stats.p90.count(),
          r.stats.p99.count(),
          r.stats.mean.count()};
}

ReportRow from_fields(std::string name, const std::vector<long long>& v) {
  ReportRow r;
  r.name = std::move(name);
  r.params = static_cast<std::size_t>(v[0]);
  r.macs = static_cast<std::size_t>(v[1]);
  r.threads = static_cast<int>(v[2]);
  r.stats.iterations = static_cast<std::size_t>(v[3]);
  r.stats.warmup = static_cast<std::size_t>(v[4]);
  r.stats.min = Nanos(v[5]);
  r.stats.median = Nanos(v[6]);
  r.stats.p90 = Nanos(v[7]);
  r.stats.p99 = Nanos(v[8]);
  r.stats.mean = Nanos(v[9]);
  return r;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_cells(const std::string& line) {
  std::vector<std::string> cells(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cells.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cells.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.emplace_back();
    } else {
      cells.back() += c;
    }
  }
  if (quoted) throw FormatError("report csv: unterminated quote");
  return cells;
}

}  // namespace

std::string report_to_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& r : rows) {
    os << csv_quote(r.name);
    for (long long v : numeric_fields(r)) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

std::string report_to_json(const std::vector<ReportRow>& rows) {
  ordered_json arr = ordered_json::array();
  const auto& cols = report_columns();
  for (const auto& r : rows) {
    ordered_json o;
    o[cols[0]] = r.name;
    const auto v = numeric_fields(r);
    for (std::size_t i = 0; i < v.size(); ++i) o[cols[i + 1]] = v[i];
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

std::vector<ReportRow> report_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  const auto& cols = report_columns();
  if (!std::getline(is, line) || csv_cells(line) != cols) throw FormatError("report csv: unexpected header");
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = csv_cells(line);
    if (cells.size() != cols.size()) throw ShapeError("report csv", "column count", cols.size(), cells.size());
    std::vector<long long> v;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      try {
        std::size_t used = 0;
        v.push_back(std::stoll(cells[i], &used));
        if (used != cells[i].size()) throw std::invalid_argument(cells[i]);
      } catch (const std::logic_error&) {
        throw FormatError("report csv: column " + cols[i] + " holds '" + cells[i] + "'");
      }
    }
    rows.push_back(from_fields(cells[0], v));
  }
  return rows;
}

std::vector<ReportRow> report_from_json(const std::string& text) {
  ordered_json arr;
  try {
    arr = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report json: ") + e.what());
  }
  if (!arr.is_array()) throw FormatError("report json: top level must be an array");
  const auto& cols = report_columns();
  std::vector<ReportRow> rows;
  for (const auto& o : arr) {
    std::vector<long long> v;
    try {
      for (std::size_t i = 1; i < cols.size(); ++i) v.push_back(o.at(cols[i]).get<long long>());
      rows.push_back(from_fields(o.at(cols[0]).get<std::string>(), v));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("report json: ") + e.what());
    }
  }
  return rows;
}

std::string format_report(const std::vector<ReportRow>& rows, ReportFormat format) {
  return format == ReportFormat::csv ? report_to_csv(rows) : report_to_json(rows);
}

void emit_report(const std::vector<ReportRow>& rows, ReportFormat format, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write report to " + path.string());
  out << format_report(rows, format);
  if (!out.flush()) throw Error("failed writing report to " + path.string());
}

}  // namespace mobileone
