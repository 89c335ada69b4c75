#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mobileone/bench.hpp"

namespace mobileone {

std::vector<double> midranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("pearson", "length", xs.size(), ys.size());
  if (xs.empty()) throw ConfigError("pearson: empty input");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson: constant sequence, correlation undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

double t_p_value(double rho, std::size_t n) {
  if (std::abs(rho) >= 1.0) return 0.0;
  const double df = static_cast<double>(n - 2);
  const double t = std::abs(rho) * std::sqrt(df / (1.0 - rho * rho));
  return 2.0 * boost::math::cdf(boost::math::complement(boost::math::students_t(df), t));
}

// Share of all arrangements of the y ranks whose |rho| reaches the observed one.
double exact_p_value(const std::vector<double>& rx, std::vector<double> ry, double rho) {
  std::sort(ry.begin(), ry.end());
  const double target = std::abs(rho) - 1e-12;
  std::size_t hits = 0, total = 0;
  do {
    ++total;
    if (std::abs(pearson(rx, ry)) >= target) ++hits;
  } while (std::next_permutation(ry.begin(), ry.end()));
  return static_cast<double>(hits) / static_cast<double>(total);
}

constexpr std::size_t kExactLimit = 10;

}  // namespace

SpearmanResult spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman", "length", xs.size(), ys.size());
  if (xs.size() < 3) throw ConfigError("spearman: need at least 3 pairs, got " + std::to_string(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw NumericError("spearman: non-finite value at index " + std::to_string(i));
  }
  const auto rx = midranks(xs), ry = midranks(ys);
  SpearmanResult r;
  r.n = xs.size();
  r.rho = pearson(rx, ry);
  r.p_value = t_p_value(r.rho, r.n);
  if (r.n <= kExactLimit) r.p_exact = exact_p_value(rx, ry, r.rho);
  return r;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const std::string& where) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw FormatError(where + ": '" + s + "' is not a number");
  return v;
}

}  // namespace

std::vector<PublishedRow> load_published_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open fixture " + path.string());
  const std::vector<std::string> header{"model", "flops_m", "params_m", "cpu_ms", "gpu_ms", "mobile_ms"};
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != header) {
    throw FormatError(path.string() + ": header must be model,flops_m,params_m,cpu_ms,gpu_ms,mobile_ms");
  }
  std::vector<PublishedRow> rows;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    if (f.size() != header.size()) throw ShapeError(where, "column count", header.size(), f.size());
    PublishedRow r;
    r.model = f[0];
    r.flops_m = parse_number(f[1], where);
    r.params_m = parse_number(f[2], where);
    r.cpu_ms = parse_number(f[3], where);
    if (!f[4].empty()) r.gpu_ms = parse_number(f[4], where);
    r.mobile_ms = parse_number(f[5], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::filesystem::path default_published_table() { return std::filesystem::path(MOBILEONE_DATA_DIR) / "published_table.csv"; }

namespace {

std::optional<double> metric(const PublishedRow& r, const std::string& name) {
  if (name == "flops_m") return r.flops_m;
  if (name == "params_m") return r.params_m;
  if (name == "cpu_ms") return r.cpu_ms;
  if (name == "gpu_ms") return r.gpu_ms;
  if (name == "mobile_ms") return r.mobile_ms;
  throw ConfigError("unknown metric '" + name + "'; expected flops_m, params_m, cpu_ms, gpu_ms or mobile_ms");
}

}  // namespace

CorrReport correlate(const std::vector<PublishedRow>& rows, const std::string& x_metric, const std::string& y_metric) {
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    const auto x = metric(r, x_metric), y = metric(r, y_metric);
    if (x && y) {
      xs.push_back(*x);
      ys.push_back(*y);
    }
  }
  return {x_metric, y_metric, spearman(xs, ys)};
}

}  // namespace mobileone
