#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include "mobileone/bench.hpp"
#include "mobileone/random.hpp"

using namespace mobileone;
using namespace std::chrono_literals;

TEST(Percentile, NearestRank) {
  std::vector<Nanos> v;
  for (int i = 1; i <= 10; ++i) v.emplace_back(i);
  EXPECT_EQ(percentile(v, 50), Nanos(5));
  EXPECT_EQ(percentile(v, 90), Nanos(9));
  EXPECT_EQ(percentile(v, 99), Nanos(10));
  EXPECT_EQ(percentile(v, 100), Nanos(10));
  EXPECT_EQ(percentile(std::vector<Nanos>{Nanos(7)}, 1), Nanos(7));
  EXPECT_THROW(percentile(v, 0), ConfigError);
  EXPECT_THROW(percentile({}, 50), ConfigError);
}

TEST(Summarize, OrderingAndMean) {
  Rng rng(1);
  std::uniform_int_distribution<long long> d(1, 1'000'000);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Nanos> v(1 + trial * 7);
    for (auto& x : v) x = Nanos(d(rng));
    const auto s = summarize(v, 3);
    EXPECT_LE(s.min, s.median);
    EXPECT_LE(s.median, s.p90);
    EXPECT_LE(s.p90, s.p99);
    EXPECT_EQ(s.min, *std::min_element(v.begin(), v.end()));
    EXPECT_EQ(s.iterations, v.size());
    EXPECT_EQ(s.warmup, 3u);
    long double total = 0;
    for (auto x : v) total += x.count();
    EXPECT_NEAR(static_cast<double>(s.mean.count()), static_cast<double>(total / v.size()), 0.5);
  }
}

TEST(Benchmark, DefaultsToThousandIterationsAfterOneWarmup) {
  std::size_t calls = 0;
  const auto s = benchmark([&](const Tensor4<float>&) { ++calls; }, {1, 1, 2, 2});
  EXPECT_EQ(s.iterations, 1000u);
  EXPECT_EQ(s.warmup, 1u);
  EXPECT_EQ(calls, 1001u);
}

TEST(Benchmark, WarmupExcluded) {
  bool first = true;
  auto slow_first = [&](const Tensor4<float>&) {
    if (first) std::this_thread::sleep_for(50ms);
    first = false;
  };
  const auto s = benchmark(slow_first, {1, 1, 1, 1}, 1, 50);
  EXPECT_LT(s.p99, 50ms);
  first = true;
  const auto unwarmed = benchmark(slow_first, {1, 1, 1, 1}, 0, 50);
  EXPECT_GE(unwarmed.p99, 50ms);
}

TEST(Benchmark, SleepingRunnerMinimum) {
  const auto s = benchmark([](const Tensor4<float>&) { std::this_thread::sleep_for(1ms); }, {1, 1, 1, 1}, 1, 20);
  EXPECT_GE(s.min, 1ms);
  EXPECT_LT(s.min, 3ms);
}

TEST(Benchmark, InputPreallocatedAndShaped) {
  const float* seen = nullptr;
  bool same = true;
  benchmark(
      [&](const Tensor4<float>& x) {
        EXPECT_EQ(x.shape(), (Shape4{2, 3, 4, 5}));
        if (seen && seen != x.data().data()) same = false;
        seen = x.data().data();
      },
      {2, 3, 4, 5}, 2, 10);
  EXPECT_TRUE(same);
}

TEST(Benchmark, FailureNamesIteration) {
  int n = 0;
  try {
    benchmark(
        [&](const Tensor4<float>&) {
          if (n++ == 4) throw std::runtime_error("boom");
        },
        {1, 1, 1, 1}, 1, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("timed iteration 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
  EXPECT_THROW(benchmark([](const Tensor4<float>&) {}, {1, 1, 1, 1}, 0, 0), ConfigError);
}

namespace {

// Rank by counting: 1 + #smaller + half the number of other equal values.
std::vector<double> brute_ranks(const std::vector<double>& xs) {
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < xs.size(); ++j) {
      if (xs[j] < xs[i]) ++less;
      if (j != i && xs[j] == xs[i]) ++equal;
    }
    r[i] = 1 + less + 0.5 * equal;
  }
  return r;
}

}  // namespace

TEST(Spearman, MonotoneAndReversed) {
  const std::vector<double> x{1, 2, 3, 4, 5, 6};
  const std::vector<double> up{0.1, 0.5, 2, 30, 31, 1e6};
  std::vector<double> down(up.rbegin(), up.rend());
  EXPECT_EQ(spearman(x, up).rho, 1.0);
  EXPECT_EQ(spearman(x, down).rho, -1.0);
  EXPECT_EQ(spearman(x, up).p_value, 0.0);
}

TEST(Spearman, Errors) {
  const std::vector<double> c{2, 2, 2, 2}, x{1, 2, 3, 4}, two{1, 2};
  EXPECT_THROW(spearman(c, x), NumericError);
  EXPECT_THROW(spearman(x, c), NumericError);
  EXPECT_THROW(spearman(two, two), ConfigError);
  EXPECT_THROW(spearman(x, two), ShapeError);
}

TEST(Spearman, MidranksMatchBruteForce) {
  Rng rng(2);
  for (std::size_t n = 1; n <= 12; ++n) {
    for (int trial = 0; trial < 20; ++trial) {
      std::uniform_int_distribution<int> d(0, static_cast<int>(n) / 2);
      std::vector<double> xs(n);
      for (auto& v : xs) v = d(rng);
      EXPECT_EQ(midranks(xs), brute_ranks(xs));
    }
  }
}

TEST(Spearman, InvariantUnderMonotoneTransforms) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.1, 10);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(15), y(15);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = u(rng);
      y[i] = x[i] + 3 * u(rng);
    }
    const double rho = spearman(x, y).rho;
    std::vector<double> lx(x.size()), cy(y.size());
    std::transform(x.begin(), x.end(), lx.begin(), [](double v) { return std::log(v); });
    std::transform(y.begin(), y.end(), cy.begin(), [](double v) { return v * v * v - 4; });
    EXPECT_DOUBLE_EQ(spearman(lx, cy).rho, rho);
  }
}

TEST(Spearman, ReferenceValues) {
  const std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8}, y{2, 1, 4, 3, 6, 5, 8, 7};
  const auto r = spearman(x, y);
  EXPECT_NEAR(r.rho, 0.9047619047619048, 1e-14);
  EXPECT_NEAR(r.p_value, 0.0020082755054294677, 1e-12);
  ASSERT_TRUE(r.p_exact.has_value());
  EXPECT_NEAR(*r.p_exact, 184.0 / 40320.0, 1e-15);

  const std::vector<double> a{3, 1, 4, 1, 5, 9, 2, 6, 5, 3}, b{2, 7, 1, 8, 2, 8, 1, 8, 2, 8};
  const auto t = spearman(a, b);
  EXPECT_NEAR(t.rho, 0.13471506281091267, 1e-14);
  EXPECT_NEAR(t.p_value, 0.7106008805223829, 1e-10);

  std::vector<double> big(11);
  std::iota(big.begin(), big.end(), 0.0);
  EXPECT_FALSE(spearman(big, big).p_exact.has_value());
}

TEST(Spearman, PublishedTableFixture) {
  const auto rows = load_published_table(default_published_table());
  ASSERT_EQ(rows.size(), 30u);
  EXPECT_EQ(rows.back().model, "MobileOne-S0");
  EXPECT_FALSE(rows.front().gpu_ms.has_value());
  const auto c = correlate(rows, "flops_m", "mobile_ms");
  EXPECT_EQ(c.result.n, 30u);
  EXPECT_NEAR(c.result.rho, 0.3793103448275862, 1e-12);
  EXPECT_NEAR(c.result.p_value, 0.03870947184516464, 1e-9);
  EXPECT_GE(c.result.rho, 0.25);
  EXPECT_LE(c.result.rho, 0.70);
  EXPECT_LT(correlate(rows, "flops_m", "gpu_ms").result.n, 30u);
  EXPECT_THROW(correlate(rows, "flops", "mobile_ms"), ConfigError);
}

TEST(Spearman, FixtureErrors) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto bad = dir / "mobileone_bad_fixture.csv";
  {
    std::ofstream(bad) << "model,flops_m,params_m,cpu_ms,gpu_ms,mobile_ms\nX,1,2,3,,abc\n";
  }
  EXPECT_THROW(load_published_table(bad), FormatError);
  {
    std::ofstream(bad) << "model,flops\n";
  }
  EXPECT_THROW(load_published_table(bad), FormatError);
  std::filesystem::remove(bad);
  EXPECT_THROW(load_published_table(dir / "does_not_exist.csv"), Error);
}

TEST(AblationNet, ActivationsConstructible) {
  for (const char* name : {"relu", "gelu", "silu", "se_relu"}) {
    AblationSpec s;
    s.depth = 3;
    s.channels = 8;
    s.resolution = 6;
    s.se_ratio = 4;
    s.activation = parse_ablation_activation(name);
    EXPECT_EQ(to_string(s.activation), name);
    const auto net = ablation_net(s);
    EXPECT_EQ(net.convs.size(), 3u);
    EXPECT_EQ(net.se.size(), s.activation == AblationActivation::se_relu ? 3u : 0u);
    Rng rng(4);
    const auto y = forward(net, random_tensor<float>(net.input_shape(2), rng));
    EXPECT_EQ(y.shape(), net.input_shape(2));
  }
  EXPECT_THROW(parse_ablation_activation("dyrelu"), ConfigError);
}

TEST(AblationNet, SkipAddsInput) {
  AblationSpec s;
  s.depth = 2;
  s.channels = 4;
  s.resolution = 5;
  const auto plain = ablation_net(s);
  s.with_skip = true;
  const auto skip = ablation_net(s);
  Rng rng(5);
  const auto x = random_tensor<float>(plain.input_shape(), rng);
  // Layer by layer: h1 = relu(conv1 x) + x, h2 = relu(conv2 h1) + h1.
  auto h1 = relu(conv2d(x, skip.convs[0]));
  add_inplace(h1, x);
  auto h2 = relu(conv2d(h1, skip.convs[1]));
  add_inplace(h2, h1);
  EXPECT_EQ(forward(skip, x), h2);
  EXPECT_NE(forward(plain, x), h2);
  s.depth = 1;
  EXPECT_THROW(ablation_net(s), ConfigError);
}

TEST(AblationNet, Counts) {
  AblationSpec s;
  s.depth = 30;
  const auto net = ablation_net(s);
  EXPECT_EQ(net.param_count(), 30u * (64 * 64 * 9 + 64));
  EXPECT_EQ(net.macs(), 30u * 56 * 56 * 64 * 64 * 9);
  s.with_se = true;
  const auto se = ablation_net(s);
  EXPECT_EQ(se.param_count(), net.param_count() + 30u * (64 * 4 + 4 + 4 * 64 + 64));
}

namespace {

std::vector<ReportRow> sample_rows() {
  ReportRow a{"S0", 2'078'952, 274'800'000, 1, {}};
  a.stats = {Nanos(10), Nanos(12), Nanos(15), Nanos(20), Nanos(13), 1000, 1};
  ReportRow b{"odd, \"name\"", 5, 6, 4, {}};
  b.stats = {Nanos(1), Nanos(2), Nanos(3), Nanos(4), Nanos(2), 7, 0};
  return {a, b};
}

bool same(const std::vector<ReportRow>& a, const std::vector<ReportRow>& b) {
  return report_to_json(a) == report_to_json(b);
}

}  // namespace

TEST(Report, EmptyIsHeaderOnly) {
  EXPECT_EQ(report_to_csv({}), "name,params,macs,threads,iterations,warmup,min_ns,median_ns,p90_ns,p99_ns,mean_ns\n");
  EXPECT_TRUE(report_from_csv(report_to_csv({})).empty());
  EXPECT_TRUE(report_from_json(report_to_json({})).empty());
}

TEST(Report, RoundTrips) {
  const auto rows = sample_rows();
  const auto via_csv = report_from_csv(report_to_csv(rows));
  EXPECT_TRUE(same(via_csv, rows));
  const auto json_csv_json = report_from_json(report_to_json(report_from_csv(report_to_csv(report_from_json(report_to_json(rows))))));
  EXPECT_TRUE(same(json_csv_json, rows));
  EXPECT_EQ(via_csv[1].name, "odd, \"name\"");
}

TEST(Report, Errors) {
  EXPECT_THROW(report_from_csv("name,params\n"), FormatError);
  EXPECT_THROW(report_from_json("{\"a\": 1}"), FormatError);
  EXPECT_THROW(report_from_json("[{\"name\": \"x\"}]"), FormatError);
  EXPECT_THROW(emit_report(sample_rows(), ReportFormat::csv, "/nonexistent-dir/report.csv"), Error);
  EXPECT_THROW(parse_report_format("xml"), ConfigError);
  const auto path = std::filesystem::temp_directory_path() / "mobileone_report.json";
  emit_report(sample_rows(), ReportFormat::json, path);
  std::ifstream in(path);
  const std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_TRUE(same(report_from_json(text), sample_rows()));
  std::filesystem::remove(path);
}

TEST(Benchmark, InterleavedRunsEveryRunnerEachRound) {
  std::vector<int> order;
  std::vector<Runner> rs;
  for (int r = 0; r < 3; ++r) rs.push_back([&order, r](const Tensor4<float>&) { order.push_back(r); });
  const auto stats = benchmark_interleaved(rs, {1, 1, 1, 1}, 1, 4);
  ASSERT_EQ(stats.size(), 3u);
  for (const auto& s : stats) EXPECT_EQ(s.iterations, 4u);
  ASSERT_EQ(order.size(), 15u);
  for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(order[i], static_cast<int>(i % 3));
  rs.push_back([](const Tensor4<float>&) { throw std::runtime_error("bad"); });
  try {
    benchmark_interleaved(rs, {1, 1, 1, 1}, 1, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("warmup iteration 0 (runner 3)"), std::string::npos) << e.what();
  }
}
