#include "mobileone/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "mobileone/arch.hpp"
#include "mobileone/bench.hpp"
#include "mobileone/kernels.hpp"
#include "mobileone/random.hpp"
#include "mobileone/reparam.hpp"
#include "mobileone/serialize.hpp"
#include "mobileone/train.hpp"

namespace mobileone {

namespace {

using json = nlohmann::json;

struct Usage : Error {
  using Error::Error;
};

std::string millions(std::size_t n) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(n >= 10'000'000 ? 1 : 2) << static_cast<double>(n) / 1e6 << "M";
  return os.str();
}

template <typename F>
int with_model(const std::string& path, F&& f) {
  if (stored_dtype(path) == DType::f64) return f(load_model<double>(path));
  return f(load_model<float>(path));
}

template <typename T>
Model<T> inference_form(const Model<T>& m) {
  return m.mode == ModelMode::inference ? m : reparameterize_model(m);
}

template <typename T>
void print_summary(std::ostream& out, const Model<T>& m, std::size_t res) {
  const auto folded = inference_form(m);
  out << "model " << m.name << " (" << (m.mode == ModelMode::train ? "train" : "inference") << ")\n";
  if (m.mode == ModelMode::train) out << "train params " << count_params(m) << " (" << millions(count_params(m)) << ")\n";
  const auto p = count_params(folded);
  const auto f = count_flops(folded, res);
  out << "inference params " << p << " (" << millions(p) << ")\n";
  out << "macs@" << res << " " << f << " (" << std::llround(static_cast<double>(f) / 1e6) << "M)\n";
}

ModelMode parse_mode(const std::string& s) {
  if (s == "train") return ModelMode::train;
  if (s == "inference") return ModelMode::inference;
  throw Usage("--mode must be train or inference, got '" + s + "'");
}

struct BuildArgs {
  std::string variant, mode = "train", out, dtype = "f32";
  std::uint64_t seed = 0;
  std::size_t res = 224;
  std::size_t calib_batch = 4, calib_res = 0;
};

template <typename T>
int build_and_save(const BuildArgs& a, const ArchSpec& spec, ModelMode mode, std::ostream& out) {
  Model<T> model = build_model<T>(spec, mode, {a.seed, false});
  if (mode == ModelMode::train && a.calib_batch > 0) {
    Rng rng(a.seed ^ 0xca11b0a7ULL);
    const std::size_t side = a.calib_res ? a.calib_res : a.res;
    calibrate_bn(model, random_tensor<T>({a.calib_batch, model.in_channels, side, side}, rng));
  }
  save_model(model, a.out);
  print_summary(out, model, a.res);
  out << "wrote " << a.out << "\n";
  return kExitOk;
}

int cmd_build(const BuildArgs& a, std::ostream& out) {
  const ArchSpec spec = variant_spec(a.variant);
  const ModelMode mode = parse_mode(a.mode);
  if (a.dtype == "f64") return build_and_save<double>(a, spec, mode, out);
  if (a.dtype != "f32") throw Usage("--dtype must be f32 or f64");
  return build_and_save<float>(a, spec, mode, out);
}

int cmd_reparam(const std::string& in, const std::string& dst, std::ostream& out, std::ostream& err) {
  return with_model(in, [&](auto model) {
    if (model.mode == ModelMode::inference) {
      err << "warning: " << in << " is already in inference form; writing it unchanged\n";
      save_model(model, dst);
      return kExitOk;
    }
    const auto folded = reparameterize_model(model);
    save_model(folded, dst);
    out << "params " << count_params(model) << " -> " << count_params(folded) << "\n";
    out << "wrote " << dst << "\n";
    return kExitOk;
  });
}

struct VerifyArgs {
  std::string in, folded;
  std::size_t trials = 10, res = 224;
  std::optional<double> tol;
  std::uint64_t seed = 0;
};

template <typename T>
int verify_model(const Model<T>& model, const VerifyArgs& a, std::ostream& out) {
  // Whole-network f32 forwards already carry a few 1e-5 of round-off at 224 px.
  const double tol = a.tol.value_or(std::is_same_v<T, double> ? 1e-10 : 1e-4);
  const Model<T> other = a.folded.empty() ? inference_form(model) : load_model<T>(a.folded);
  Rng rng(a.seed);
  double worst = 0;
  for (std::size_t t = 0; t < a.trials && !std::isnan(worst); ++t) {
    const auto x = random_tensor<T>({1, model.in_channels, a.res, a.res}, rng);
    const double d = static_cast<double>(max_abs_diff(forward(model, x), forward(other, x)));
    worst = std::isnan(d) ? d : std::max(worst, d);
  }
  const bool ok = worst <= tol;
  out << "trials " << a.trials << " res " << a.res << " max_abs_dev " << std::scientific << std::setprecision(3)
      << worst << " tol " << tol << (ok ? " PASS" : " FAIL") << "\n";
  return ok ? kExitOk : kExitFailure;
}

int cmd_verify(const VerifyArgs& a, std::ostream& out) {
  return with_model(a.in, [&](const auto& model) { return verify_model(model, a, out); });
}

struct BenchArgs {
  std::string model;
  std::vector<std::string> variants;
  std::string ablation;
  std::size_t depth = 30, channels = 64, resolution = 56, res = 224, iters = 1000, warmup = 1;
  bool se = false, skip = false;
  std::string format = "csv", out;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  const ReportFormat format = parse_report_format(a.format);
  if (a.model.empty() && a.variants.empty() && a.ablation.empty()) {
    throw Usage("bench needs --model, --variant or --ablation");
  }
  std::vector<ReportRow> rows;
  auto bench_model = [&](const Model<float>& m, const std::string& name) {
    const auto folded = inference_form(m);
    ReportRow r{name, count_params(folded), count_flops(folded, a.res), num_threads(), {}};
    r.stats = benchmark(model_runner(folded), {1, folded.in_channels, a.res, a.res}, a.warmup, a.iters, a.seed);
    rows.push_back(r);
  };
  if (!a.model.empty()) bench_model(load_model<float>(a.model), a.model);
  for (const auto& v : a.variants) {
    bench_model(build_model<float>(variant_spec(v), ModelMode::inference, {a.seed, false}), v);
  }
  if (!a.ablation.empty()) {
    AblationSpec s;
    s.activation = parse_ablation_activation(a.ablation);
    s.depth = a.depth;
    s.channels = a.channels;
    s.resolution = a.resolution;
    s.with_se = a.se;
    s.with_skip = a.skip;
    s.seed = a.seed;
    const auto net = ablation_net(s);
    std::string name = "ablation-" + to_string(s.activation) + "-d" + std::to_string(s.depth);
    if (s.with_se) name += "+se";
    if (s.with_skip) name += "+skip";
    ReportRow r{name, net.param_count(), net.macs(), num_threads(), {}};
    r.stats = benchmark([&net](const Tensor4<float>& x) { forward(net, x); }, net.input_shape(), a.warmup, a.iters,
                        a.seed);
    rows.push_back(r);
  }
  if (a.out.empty()) {
    out << format_report(rows, format);
  } else {
    emit_report(rows, format, a.out);
  }
  return kExitOk;
}

struct CorrelateArgs {
  std::string fixture, x = "flops_m", y = "mobile_ms", format = "text";
};

int cmd_correlate(const CorrelateArgs& a, std::ostream& out) {
  const auto rows = load_published_table(a.fixture.empty() ? default_published_table() : std::filesystem::path(a.fixture));
  const auto c = correlate(rows, a.x, a.y);
  if (a.format == "json") {
    json j{{"x", c.x_metric}, {"y", c.y_metric}, {"n", c.result.n}, {"rho", c.result.rho}, {"p_value", c.result.p_value}};
    if (c.result.p_exact) j["p_exact"] = *c.result.p_exact;
    out << j.dump(2) << "\n";
  } else if (a.format == "text") {
    out << "spearman(" << c.x_metric << ", " << c.y_metric << ") n=" << c.result.n << " rho=" << std::fixed
        << std::setprecision(4) << c.result.rho << " p=" << c.result.p_value;
    if (c.result.p_exact) out << " p_exact=" << *c.result.p_exact;
    out << "\n";
  } else {
    throw Usage("--format must be text or json");
  }
  return kExitOk;
}

struct TrainArgs {
  std::string config, log, out, dataset;
  std::optional<std::size_t> epochs, k;
  std::optional<std::uint64_t> seed;
  bool no_scale = false, no_skip = false, f64 = false;
};

int cmd_train_toy(const TrainArgs& a, std::ostream& out) {
  json j = json::object();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw Error("cannot open config " + a.config);
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + a.config + ": " + e.what());
    }
  }
  if (a.epochs) j["epochs"] = *a.epochs;
  if (a.seed) j["seed"] = *a.seed;
  if (!a.dataset.empty()) j["dataset_path"] = a.dataset;
  if (a.k || a.no_scale || a.no_skip) {
    j["arch"] = json::parse(arch_to_json(toy_arch(static_cast<int>(a.k.value_or(4)), !a.no_scale, !a.no_skip)));
  }
  const TrainConfig cfg = config_from_json(j.dump());
  auto go = [&](auto log) {
    const std::string csv = log_to_csv(log.epochs);
    if (a.log.empty()) {
      out << csv;
    } else {
      write_log_csv(log.epochs, a.log);
      out << "final train_loss " << log.epochs.back().train_loss << " val_loss " << log.epochs.back().val_loss << "\n";
    }
    if (!a.out.empty()) save_model(log.model, a.out);
    return kExitOk;
  };
  if (a.f64) return go(train_toy<double>(cfg));
  return go(train_toy<float>(cfg));
}

struct CountArgs {
  std::string variant, format = "text";
  std::size_t res = 224;
};

int cmd_count(const CountArgs& a, std::ostream& out) {
  const auto m = build_model<float>(variant_spec(a.variant), ModelMode::inference);
  const auto p = count_params(m);
  const auto f = count_flops(m, a.res);
  if (a.format == "json") {
    out << json{{"variant", m.name}, {"params", p}, {"macs", f}, {"resolution", a.res}}.dump(2) << "\n";
  } else if (a.format == "text") {
    out << "variant " << m.name << "\nparams " << p << " (" << millions(p) << ")\nmacs@" << a.res << " " << f << " ("
        << std::llround(static_cast<double>(f) / 1e6) << "M)\n";
  } else {
    throw Usage("--format must be text or json");
  }
  return kExitOk;
}

void apply_thread_env() {
  const char* env = std::getenv("MOBILEONE_NUM_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw Usage(std::string("MOBILEONE_NUM_THREADS must be a positive integer, got '") + env + "'");
  set_num_threads(static_cast<int>(n));
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reparameterizable mobile CNN toolkit"};
  app.name("mobileone");
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Kernel worker threads (default: MOBILEONE_NUM_THREADS or all cores)")
      ->check(CLI::PositiveNumber);

  BuildArgs build;
  auto* b = app.add_subcommand("build", "Build and initialize a variant, then save it");
  b->add_option("--variant", build.variant, "S0..S4 or mu0..mu2")->required();
  b->add_option("--mode", build.mode, "train or inference");
  b->add_option("--out", build.out, "Output container path")->required();
  b->add_option("--dtype", build.dtype, "f32 or f64");
  b->add_option("--seed", build.seed);
  b->add_option("--res", build.res, "Resolution for the MAC summary");
  b->add_option("--calib-batch", build.calib_batch,
                "Random images used to set BN running statistics of a train-form model (0 keeps identity stats)");
  b->add_option("--calib-res", build.calib_res, "Calibration image side (default: --res)");

  std::string rin, rout;
  auto* r = app.add_subcommand("reparam", "Fold a train-form container into inference form");
  r->add_option("--in", rin)->required()->check(CLI::ExistingFile);
  r->add_option("--out", rout)->required();

  VerifyArgs verify;
  auto* v = app.add_subcommand("verify", "Compare a train-form model against its folded form on random inputs");
  v->add_option("--in", verify.in)->required()->check(CLI::ExistingFile);
  v->add_option("--folded", verify.folded, "Folded container (default: fold --in in memory)")->check(CLI::ExistingFile);
  v->add_option("--trials", verify.trials)->check(CLI::PositiveNumber);
  v->add_option("--res", verify.res)->check(CLI::PositiveNumber);
  v->add_option("--tol", verify.tol, "Max-abs tolerance (default 1e-4 for f32, 1e-10 for f64)");
  v->add_option("--seed", verify.seed);

  BenchArgs bench;
  auto* be = app.add_subcommand("bench", "Latency benchmark: min/median/p90/p99 after warmup");
  be->add_option("--model", bench.model, "Container to benchmark")->check(CLI::ExistingFile);
  be->add_option("--variant", bench.variants, "Variant(s) to build and benchmark in inference form");
  be->add_option("--ablation", bench.ablation, "Ablation net activation: relu, gelu, silu, se_relu");
  be->add_option("--depth", bench.depth);
  be->add_option("--channels", bench.channels);
  be->add_option("--resolution", bench.resolution, "Ablation input side");
  be->add_flag("--se", bench.se, "Ablation: SE unit after every layer");
  be->add_flag("--skip", bench.skip, "Ablation: residual add around every layer");
  be->add_option("--res", bench.res, "Model input side");
  be->add_option("--iters", bench.iters)->check(CLI::PositiveNumber);
  be->add_option("--warmup", bench.warmup);
  be->add_option("--format", bench.format, "csv or json");
  be->add_option("--out", bench.out, "Report path (default stdout)");
  be->add_option("--seed", bench.seed);

  CorrelateArgs corr;
  auto* c = app.add_subcommand("correlate", "Spearman correlation over the published table fixture");
  c->add_option("--fixture", corr.fixture, "CSV fixture (default: bundled published_table.csv)");
  c->add_option("--x", corr.x);
  c->add_option("--y", corr.y);
  c->add_option("--format", corr.format, "text or json");

  TrainArgs train;
  auto* t = app.add_subcommand("train-toy", "Train a small model on the synthetic set");
  t->add_option("--config", train.config, "JSON config")->check(CLI::ExistingFile);
  t->add_option("--epochs", train.epochs);
  t->add_option("--seed", train.seed);
  t->add_option("--k", train.k, "Branch count of the toy architecture");
  t->add_flag("--no-scale", train.no_scale);
  t->add_flag("--no-skip", train.no_skip);
  t->add_flag("--f64", train.f64, "Train in double precision");
  t->add_option("--dataset", train.dataset, "CIFAR-10 binary batch instead of the synthetic set")
      ->check(CLI::ExistingFile);
  t->add_option("--log", train.log, "Per-epoch CSV (default stdout)");
  t->add_option("--out", train.out, "Save the trained train-form model");

  CountArgs count;
  auto* co = app.add_subcommand("count", "Inference parameter and MAC counts of a variant");
  co->add_option("--variant", count.variant)->required();
  co->add_option("--res", count.res)->check(CLI::PositiveNumber);
  co->add_option("--format", count.format, "text or json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    apply_thread_env();
    if (threads > 0) set_num_threads(threads);
    if (b->parsed()) return cmd_build(build, out);
    if (r->parsed()) return cmd_reparam(rin, rout, out, err);
    if (v->parsed()) return cmd_verify(verify, out);
    if (be->parsed()) return cmd_bench(bench, out);
    if (c->parsed()) return cmd_correlate(corr, out);
    if (t->parsed()) return cmd_train_toy(train, out);
    if (co->parsed()) return cmd_count(count, out);
  } catch (const Usage& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace mobileone
