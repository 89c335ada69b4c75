// Acceptance suite: one PASS/FAIL line per criterion. Every tolerance is a
// named constant below; `--criterion N` runs a single criterion.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <unistd.h>

#include "gradcheck.hpp"
#include "mobileone/arch.hpp"
#include "mobileone/bench.hpp"
#include "mobileone/reparam.hpp"
#include "mobileone/serialize.hpp"
#include "mobileone/train.hpp"
#include "oracles.hpp"

using namespace mobileone;
namespace fs = std::filesystem;

namespace {

// Criterion 1
constexpr double kGridTol32 = 1e-5;
constexpr double kGridTol64 = 1e-10;
constexpr double kGridSeconds = 120;
constexpr std::size_t kGridInputs = 100;
// Criterion 2
constexpr double kModelTol32 = 1e-4;
constexpr std::size_t kModelSteps = 50;
constexpr std::size_t kModelTrials = 10;
// Criterion 3
constexpr double kParamTol = 0.01;
constexpr double kMacTol = 0.03;
// Criterion 4
constexpr std::size_t kFoldInstances = 1000;
constexpr double kFoldTol = 1e-12;
constexpr double kIdentityTol = 1e-12;
constexpr double kMergeTol = 1e-10;
// Criterion 5
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 300;
// Criterion 6
constexpr int kDirectionSeeds = 5;
constexpr int kDirectionWins = 4;
// Criterion 7
constexpr double kMidpointTol = 1e-12;
// Criterion 8
constexpr double kRhoLo = 0.25;
constexpr double kRhoHi = 0.70;
// Criterion 9
constexpr std::size_t kDefaultIters = 1000;
constexpr auto kSlowFirstCall = std::chrono::milliseconds(50);
constexpr int kOrderingRuns = 3;
constexpr std::size_t kOrderingChannels = 4;
constexpr std::size_t kOrderingResolution = 32;
constexpr std::size_t kOrderingIters = 200;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

template <typename T>
ConvSpec<T> rand_conv(Rng& rng, std::size_t cin, std::size_t cout, std::size_t k, std::size_t groups,
                      std::size_t stride, bool bias) {
  ConvSpec<T> c;
  c.weight = random_tensor<T>({cout, cin / groups, k, k}, rng);
  if (bias) {
    c.bias.resize(cout);
    fill_uniform(std::span<T>(c.bias), rng, -1, 1);
  }
  c.stride = stride;
  c.padding = (k - 1) / 2;
  c.groups = groups;
  return c;
}

template <typename T>
BNParams<T> rand_bn(Rng& rng, std::size_t c) {
  BNParams<T> bn = BNParams<T>::identity(c);
  fill_uniform(std::span<T>(bn.mu), rng, -1, 1);
  fill_uniform(std::span<T>(bn.sigma), rng, 0.2, 2);
  fill_uniform(std::span<T>(bn.gamma), rng, -2, 2);
  fill_uniform(std::span<T>(bn.beta), rng, -1, 1);
  return bn;
}

template <typename T>
ConvSpec<T> with_weights(const FoldedConv<T>& f, const ConvSpec<T>& like) {
  ConvSpec<T> s = like;
  s.weight = f.weight;
  s.bias = f.bias;
  return s;
}

template <typename T>
double grid_max_dev(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0;
  for (int k = 1; k <= 5; ++k)
    for (std::size_t stride : {1, 2})
      for (bool skip : {false, true})
        for (bool scale : {false, true})
          for (bool se : {false, true}) {
            BlockOptions o;
            o.in_channels = 8;
            o.out_channels = 8;
            o.stride = stride;
            o.k = k;
            o.skip = skip;
            o.scale_branch = scale;
            o.activation = se ? Activation::se_relu : Activation::relu;
            o.se_ratio = 4;
            auto block = make_train_block<T>(o, rng, {rng(), true});
            // Running statistics from a calibration batch, as a trained BN would carry; gamma and beta stay random.
            forward_train(block, random_tensor<T>({32, 8, 8, 8}, rng), Mode::train, T{1});
            const auto folded = reparameterize_block(block);
            const auto x = random_tensor<T>({kGridInputs, 8, 8, 8}, rng);
            worst = std::max(worst, static_cast<double>(max_abs_diff(forward_eval(block, x), forward_infer(folded, x))));
          }
  return worst;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  const double d32 = grid_max_dev<float>(101);
  const double d64 = grid_max_dev<double>(102);
  const double secs = seconds_since(t0);
  return {d32 <= kGridTol32 && d64 <= kGridTol64 && secs <= kGridSeconds,
          "80 configs x " + std::to_string(kGridInputs) + " inputs: f32 " + sci(d32) + " <= " + sci(kGridTol32) +
              ", f64 " + sci(d64) + " <= " + sci(kGridTol64) + ", " + fixed(secs, 1) + " s <= " +
              fixed(kGridSeconds, 0) + " s"};
}

Outcome criterion2() {
  auto model = build_model<float>(variant_spec("S0"), ModelMode::train, {21});
  Rng rng(22);
  calibrate_bn(model, random_tensor<float>({4, 3, 224, 224}, rng));
  ScheduleSpec schedule;
  schedule.lr0 = 0.01;
  SyntheticSpec data;
  data.seed = 23;
  const auto losses = train_steps(model, data, kModelSteps, 8, 64, schedule, 24);
  const auto folded = reparameterize_model(model);
  double worst = 0, scale = 0;
  for (std::size_t t = 0; t < kModelTrials; ++t) {
    const auto x = random_tensor<float>({1, 3, 224, 224}, rng);
    const auto logits = forward(model, x);
    for (float v : logits.data()) scale = std::max(scale, static_cast<double>(std::abs(v)));
    worst = std::max(worst, static_cast<double>(max_abs_diff(logits, forward(folded, x))));
  }
  return {worst <= kModelTol32, "S0 after " + std::to_string(losses.size()) + " steps (loss " +
                                    fixed(losses.front(), 3) + " -> " + fixed(losses.back(), 3) + "), " +
                                    std::to_string(kModelTrials) + " inputs at 224 (max |logit| " + fixed(scale, 1) + "): " + sci(worst) +
                                    " <= " + sci(kModelTol32)};
}

Outcome criterion3() {
  struct Published {
    const char* variant;
    double params;
    double macs;
  };
  constexpr std::array<Published, 8> table{{{"S0", 2.1e6, 275e6},
                                            {"S1", 4.8e6, 825e6},
                                            {"S2", 7.8e6, 1299e6},
                                            {"S3", 10.1e6, 1896e6},
                                            {"S4", 14.8e6, 2978e6},
                                            {"mu0", 0.57e6, 68e6},
                                            {"mu1", 0.98e6, 139e6},
                                            {"mu2", 1.3e6, 214e6}}};
  bool pass = true;
  std::string failures, worst_mac;
  double worst_mac_dev = 0;
  for (const auto& row : table) {
    const auto m = build_model<float>(variant_spec(row.variant), ModelMode::inference);
    const double p = static_cast<double>(count_params(m));
    const double f = static_cast<double>(count_flops(m, 224));
    const double dp = p / row.params - 1, df = f / row.macs - 1;
    if (std::abs(df) > worst_mac_dev) {
      worst_mac_dev = std::abs(df);
      worst_mac = row.variant;
    }
    if (std::abs(dp) > kParamTol) failures += std::string(" ") + row.variant + " params " + fixed(100 * dp, 2) + "%";
    if (std::abs(df) > kMacTol) failures += std::string(" ") + row.variant + " macs " + fixed(100 * df, 2) + "%";
    pass = pass && std::abs(dp) <= kParamTol && std::abs(df) <= kMacTol;
  }
  return {pass, "params +-" + fixed(100 * kParamTol, 0) + "%, macs +-" + fixed(100 * kMacTol, 0) +
                    "%; worst macs " + worst_mac + " " + fixed(100 * worst_mac_dev, 2) + "%" +
                    (failures.empty() ? std::string() : ";" + failures)};
}

Outcome criterion4() {
  Rng rng(41);
  double fold_dev = 0;
  for (std::size_t i = 0; i < kFoldInstances; ++i) {
    const std::size_t cin = 1 + rng() % 4, k = 1 + 2 * (rng() % 3);
    const bool depthwise = rng() % 2;
    const std::size_t cout = depthwise ? cin : 1 + rng() % 4, groups = depthwise ? cin : 1;
    const auto conv = rand_conv<double>(rng, cin, cout, k, groups, 1 + rng() % 2, rng() % 2);
    const auto bn = rand_bn<double>(rng, cout);
    const std::size_t side = 3 + rng() % 5;
    const auto x = random_tensor<double>({1 + rng() % 2, cin, side, side}, rng);
    const auto lhs = oracle::conv(x, with_weights(fold_bn(conv, bn), conv));
    fold_dev = std::max(fold_dev, max_abs_diff(lhs, oracle::bn(oracle::conv(x, conv), bn)));
  }

  double id_dev = 0;
  for (std::size_t k : {1, 3, 5, 7})
    for (std::size_t c : {1, 3, 8}) {
      for (std::size_t groups : {std::size_t{1}, c}) {
        const auto x = random_tensor<double>({2, c, 6, 5}, rng, -10, 10);
        id_dev = std::max(id_dev, max_abs_diff(oracle::conv(x, identity_as_conv<double>(c, groups, k)), x));
      }
    }

  double merge_dev = 0;
  for (std::size_t m = 1; m <= 8; ++m) {
    const auto like = rand_conv<double>(rng, 4, 4, 3, 2, 1, true);
    std::vector<FoldedConv<double>> branches;
    Tensor4<double> sum(Shape4{2, 4, 6, 6});
    const auto x = random_tensor<double>({2, 4, 6, 6}, rng);
    for (std::size_t i = 0; i < m; ++i) {
      const auto c = rand_conv<double>(rng, 4, 4, 3, 2, 1, true);
      branches.push_back({c.weight, c.bias});
      sum = oracle::add(sum, oracle::conv(x, c));
    }
    merge_dev = std::max(merge_dev, max_abs_diff(oracle::conv(x, with_weights(merge_branches<double>(branches), like)), sum));
  }
  return {fold_dev <= kFoldTol && id_dev <= kIdentityTol && merge_dev <= kMergeTol,
          std::to_string(kFoldInstances) + " folds " + sci(fold_dev) + " <= " + sci(kFoldTol) + ", identity " +
              sci(id_dev) + " <= " + sci(kIdentityTol) + ", merge " + sci(merge_dev) + " <= " + sci(kMergeTol)};
}

Outcome criterion5() {
  const auto t0 = Clock::now();
  const auto model = gradcheck::two_block_model(3);
  Rng rng(4);
  const auto x = random_tensor<double>({2, 4, 8, 8}, rng);
  const auto report = gradcheck::check(model, x, {0, 2});
  const double secs = seconds_since(t0);
  bool pass = secs <= kGradSeconds;
  std::string detail;
  for (const char* cls : {"dw_conv", "pw_conv", "bn_gamma", "bn_beta", "se", "linear"}) {
    const auto it = report.by_class.find(cls);
    const bool ok = it != report.by_class.end() && it->second <= kGradTol;
    pass = pass && ok;
    detail += std::string(cls) + " " + (it == report.by_class.end() ? "missing" : sci(it->second)) + ", ";
  }
  return {pass, std::to_string(report.checked) + " entries; " + detail + "tol " + sci(kGradTol) + ", " +
                    fixed(secs, 1) + " s <= " + fixed(kGradSeconds, 0) + " s"};
}

TrainConfig direction_config(const ArchSpec& arch, std::uint64_t seed) {
  TrainConfig c;
  c.arch = arch;
  c.data.train_size = 128;
  c.data.val_size = 32;
  c.data.seed = seed;
  c.epochs = 6;
  c.batch_size = 16;
  c.curriculum = CurriculumSpec::constant(c.epochs, 16);
  c.schedule.lr0 = 0.05;
  c.seed = seed;
  return c;
}

Outcome criterion6() {
  int wins = 0;
  std::string detail;
  for (int s = 1; s <= kDirectionSeeds; ++s) {
    const double branched = train_toy<float>(direction_config(toy_arch(4, true, true), s)).epochs.back().train_loss;
    const double plain = train_toy<float>(direction_config(toy_arch(1, false, false), s)).epochs.back().train_loss;
    wins += branched < plain;
    detail += " " + fixed(branched, 4) + (branched < plain ? "<" : ">=") + fixed(plain, 4);
  }
  return {wins >= kDirectionWins, std::to_string(wins) + "/" + std::to_string(kDirectionSeeds) +
                                      " seeds lower with k=4+scale+skip (need " + std::to_string(kDirectionWins) +
                                      "):" + detail};
}

Outcome criterion7() {
  constexpr std::size_t T = 1000;
  const double start = cosine_value(0, 1e-4, 1e-5, T);
  const double end = cosine_value(T, 1e-4, 1e-5, T);
  const double mid = cosine_value(T / 2, 1e-4, 1e-5, T);
  ScheduleSpec s;
  s.T = T;
  bool monotone = true;
  for (std::size_t t = 1; t <= T; ++t) monotone = monotone && s.wd(t) <= s.wd(t - 1) && s.lr(t) <= s.lr(t - 1);
  const bool pass = start == 1e-4 && end == 1e-5 && std::abs(mid - 5.5e-5) <= kMidpointTol && monotone &&
                    s.wd(0) == 1e-4 && s.wd(T) == 1e-5;
  return {pass, "wd(0) " + sci(start) + ", wd(T) " + sci(end) + ", |wd(T/2) - 5.5e-5| " +
                    sci(std::abs(mid - 5.5e-5)) + " <= " + sci(kMidpointTol) +
                    (monotone ? ", monotone" : ", NOT monotone")};
}

Outcome criterion8() {
  const auto report = correlate(load_published_table(default_published_table()), "flops_m", "mobile_ms");
  std::vector<double> up(12), down(12), curved(12);
  std::iota(up.begin(), up.end(), 1.0);
  std::transform(up.begin(), up.end(), down.begin(), [](double v) { return -3 * v; });
  std::transform(up.begin(), up.end(), curved.begin(), [](double v) { return std::exp(v); });
  const double r_up = spearman(up, curved).rho, r_down = spearman(up, down).rho;
  const double rho = report.result.rho;
  return {rho >= kRhoLo && rho <= kRhoHi && r_up == 1.0 && r_down == -1.0,
          "fixture n=" + std::to_string(report.result.n) + " rho " + fixed(rho, 4) + " in [" + fixed(kRhoLo, 2) +
              ", " + fixed(kRhoHi, 2) + "], monotone " + fixed(r_up, 1) + ", reversed " + fixed(r_down, 1)};
}

bool ordered(const LatencyStats& s) { return s.min <= s.median && s.median <= s.p90 && s.p90 <= s.p99; }

Outcome criterion9() {
  bool invariants = true;
  const Shape4 tiny{1, 1, 2, 2};

  std::size_t calls = 0;
  const auto slow_first = benchmark(
      [&](const Tensor4<float>&) {
        if (calls++ == 0) std::this_thread::sleep_for(kSlowFirstCall);
      },
      tiny, 1, 20);
  invariants = invariants && ordered(slow_first);
  const bool warmup_excluded = calls == 21 && slow_first.p99 < kSlowFirstCall / 2 && slow_first.mean < kSlowFirstCall / 2;

  std::size_t default_calls = 0;
  const auto defaults = benchmark([&](const Tensor4<float>&) { ++default_calls; }, tiny);
  invariants = invariants && ordered(defaults);
  const bool default_iters = defaults.iterations == kDefaultIters && default_calls == kDefaultIters + 1;

  std::vector<Runner> runners;
  std::vector<AblationNet> nets;
  for (auto [se, skip] : {std::pair{false, false}, {true, false}, {true, true}}) {
    AblationSpec spec;
    spec.channels = kOrderingChannels;
    spec.resolution = kOrderingResolution;
    spec.with_se = se;
    spec.with_skip = skip;
    nets.push_back(ablation_net(spec));
  }
  for (const auto& net : nets) runners.push_back([&net](const Tensor4<float>& x) { forward(net, x); });
  int ordered_runs = 0;
  std::string mins;
  for (int run = 0; run < kOrderingRuns; ++run) {
    const auto stats = benchmark_interleaved(runners, nets.front().input_shape(), 5, kOrderingIters, run);
    for (const auto& s : stats) invariants = invariants && ordered(s);
    ordered_runs += stats[0].min <= stats[1].min && stats[1].min <= stats[2].min;
    mins += " " + fixed(stats[0].min.count() / 1e6, 2) + "/" + fixed(stats[1].min.count() / 1e6, 2) + "/" +
            fixed(stats[2].min.count() / 1e6, 2);
  }
  return {warmup_excluded && default_iters && invariants && ordered_runs == kOrderingRuns,
          std::string("warmup ") + (warmup_excluded ? "excluded" : "LEAKED") + ", default iters " +
              std::to_string(defaults.iterations) + ", percentiles " + (invariants ? "ordered" : "UNORDERED") +
              ", ablation ordered " + std::to_string(ordered_runs) + "/" + std::to_string(kOrderingRuns) +
              " (min ms base/se/se+skip" + mins + ")"};
}

template <typename T>
bool bit_identical(const Tensor4<T>& a, const Tensor4<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Outcome criterion10() {
  const fs::path dir = fs::temp_directory_path() / ("mobileone_accept_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  Rng rng(101);
  const auto x32 = random_tensor<float>({2, 3, 64, 64}, rng);
  const auto x64 = random_tensor<double>({2, 3, 64, 64}, rng);

  const auto train32 = build_model<float>(variant_spec("mu0"), ModelMode::train, {102, true});
  const auto infer32 = reparameterize_model(train32);
  const auto infer64 = build_model<double>(variant_spec("S1"), ModelMode::inference, {103, true});
  save_model(train32, dir / "t32.mob");
  save_model(infer32, dir / "i32.mob");
  save_model(infer64, dir / "i64.mob");
  const bool round_trip = bit_identical(forward(train32, x32), forward(load_model<float>(dir / "t32.mob"), x32)) &&
                          bit_identical(forward(infer32, x32), forward(load_model<float>(dir / "i32.mob"), x32)) &&
                          bit_identical(forward(infer64, x64), forward(load_model<double>(dir / "i64.mob"), x64));

  const std::string good = read_bytes(dir / "i32.mob");
  std::vector<std::pair<std::string, std::string>> corruptions;
  auto flipped = [&](std::size_t at) {
    std::string b = good;
    b[at] = static_cast<char>(b[at] ^ 0x5a);
    return b;
  };
  corruptions.emplace_back("magic", flipped(0));
  corruptions.emplace_back("version", flipped(4));
  corruptions.emplace_back("count", flipped(11));
  corruptions.emplace_back("record", flipped(14));
  corruptions.emplace_back("truncated", good.substr(0, good.size() / 2));
  corruptions.emplace_back("header-only", good.substr(0, 10));

  int rejected = 0;
  std::string leaked;
  for (const auto& [what, bytes] : corruptions) {
    write_bytes(dir / "bad.mob", bytes);
    Model<float> target = infer32;
    try {
      target = load_model<float>(dir / "bad.mob");
      leaked += " " + what + "(accepted)";
    } catch (const FormatError&) {
      if (bit_identical(forward(target, x32), forward(infer32, x32)))
        ++rejected;
      else
        leaked += " " + what + "(partial)";
    } catch (const std::exception& e) {
      leaked += " " + what + "(" + e.what() + ")";
    }
  }
  fs::remove_all(dir);
  return {round_trip && rejected == static_cast<int>(corruptions.size()),
          std::string("save/load/forward ") + (round_trip ? "bit-identical" : "DIFFERS") + " (train f32, inference f32/f64), " +
              std::to_string(rejected) + "/" + std::to_string(corruptions.size()) + " corruptions rejected" + leaked};
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

const std::array<Criterion, 10>& criteria() {
  static const std::array<Criterion, 10> all{{{"block reparameterization grid", criterion1},
                                              {"end-to-end S0 equivalence", criterion2},
                                              {"parameter and MAC counts", criterion3},
                                              {"fold soundness properties", criterion4},
                                              {"gradient checks", criterion5},
                                              {"branch optimization direction", criterion6},
                                              {"cosine schedule exactness", criterion7},
                                              {"Spearman fixture", criterion8},
                                              {"benchmark protocol", criterion9},
                                              {"weight container round trip", criterion10}}};
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  bool all_pass = true;
  for (std::size_t i = 0; i < criteria().size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    const auto& c = criteria()[i];
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << c.name << "): " << o.detail << " ["
              << fixed(seconds_since(t0), 1) << " s]" << std::endl;
  }
  return all_pass ? 0 : 1;
}
