#include "mobileone/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mobileone {

double cosine_value(std::size_t t, double v0, double v1, std::size_t T) {
  if (T == 0) throw ConfigError("cosine_value: schedule length T must be positive");
  if (t > T) throw ConfigError("cosine_value: step " + std::to_string(t) + " beyond T = " + std::to_string(T));
  if (t == 0) return v0;
  if (t == T) return v1;
  const double c = std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(T));
  return v1 + 0.5 * (v0 - v1) * (1.0 + c);
}

double ScheduleSpec::lr(std::size_t t) const { return cosine_value(t, lr0, lrT, T); }

double ScheduleSpec::wd(std::size_t t) const { return anneal_wd ? cosine_value(t, wd0, wdT, T) : wd0; }

void ScheduleSpec::validate() const {
  if (T < 1) throw ConfigError("ScheduleSpec: T must be >= 1");
  for (double v : {lr0, lrT, wd0, wdT}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("ScheduleSpec: rates must be finite and >= 0");
  }
}

std::size_t CurriculumSpec::epochs() const { return phases.empty() ? 0 : phases.back().end; }

const CurriculumPhase& CurriculumSpec::at(std::size_t epoch) const {
  for (const auto& p : phases) {
    if (epoch >= p.begin && epoch < p.end) return p;
  }
  throw ConfigError("CurriculumSpec: epoch " + std::to_string(epoch) + " outside every phase");
}

void CurriculumSpec::validate() const {
  if (phases.empty()) throw ConfigError("CurriculumSpec: no phases");
  std::size_t next = 0;
  for (const auto& p : phases) {
    if (p.begin != next) throw ConfigError("CurriculumSpec: phases must partition the epoch range without gaps");
    if (p.end <= p.begin) throw ConfigError("CurriculumSpec: empty phase");
    if (p.resolution < 1) throw ConfigError("CurriculumSpec: resolution must be positive");
    next = p.end;
  }
}

CurriculumSpec CurriculumSpec::imagenet() {
  return {{{0, 39, 160, 0.3}, {39, 114, 192, 0.6}, {114, 300, 224, 1.0}}};
}

CurriculumSpec CurriculumSpec::constant(std::size_t epochs, std::size_t resolution) {
  return {{{0, epochs, resolution, 1.0}}};
}

CurriculumSpec CurriculumSpec::rescaled(std::size_t epochs, std::size_t resolution) const {
  validate();
  const double total = static_cast<double>(this->epochs());
  CurriculumSpec out;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const auto& p = phases[i];
    std::size_t end = i + 1 == phases.size()
                          ? epochs
                          : static_cast<std::size_t>(std::llround(static_cast<double>(p.end) / total * epochs));
    if (end <= begin) continue;
    const auto res = static_cast<std::size_t>(
        std::max(1LL, std::llround(static_cast<double>(p.resolution) * static_cast<double>(resolution) / 224.0)));
    out.phases.push_back({begin, end, res, p.strength});
    begin = end;
  }
  out.validate();
  return out;
}

template <typename T>
LossResult<T> label_smoothed_ce(const Tensor4<T>& logits, std::span<const std::size_t> targets, T smoothing) {
  const std::size_t n = logits.n();
  const std::size_t k = logits.c() * logits.h() * logits.w();
  if (targets.size() != n) throw ShapeError("label_smoothed_ce", "target count", n, targets.size());
  if (k == 0 || n == 0) throw ShapeError("label_smoothed_ce", "logit count", 1, 0);
  if (!(smoothing >= T{0} && smoothing <= T{1})) throw ConfigError("label_smoothed_ce: smoothing must lie in [0, 1]");
  LossResult<T> r{T{0}, Tensor4<T>(logits.shape())};
  const T off = smoothing / static_cast<T>(k);
  const T on = T{1} - smoothing + off;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= k) {
      throw ConfigError("label_smoothed_ce: target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                        " is not below the class count " + std::to_string(k));
    }
    const T* z = logits.data().data() + i * k;
    T* g = r.grad.data().data() + i * k;
    const T zmax = *std::max_element(z, z + k);
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    const T log_sum = std::log(sum) + zmax;
    for (std::size_t j = 0; j < k; ++j) {
      const T q = j == targets[i] ? on : off;
      const T log_p = z[j] - log_sum;
      r.loss -= q * log_p;
      g[j] = (std::exp(log_p) - q) / static_cast<T>(n);
    }
  }
  r.loss /= static_cast<T>(n);
  return r;
}

template <typename T>
TrainState<T> init_train_state(const Model<T>& model, std::size_t total_steps, double ema_decay) {
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("EMA decay must lie in [0, 1]");
  TrainState<T> s;
  s.total_steps = total_steps;
  s.ema_decay = ema_decay;
  visit_tensors(model, [&](const std::string& name, auto values, const auto&, TensorRole role) {
    if (role == TensorRole::parameter) s.velocity.emplace(name, std::vector<T>(values.size(), T{0}));
    s.ema.emplace(name, std::vector<T>(values.begin(), values.end()));
  });
  return s;
}

template <typename T>
void sgd_step(Model<T>& model, TrainState<T>& state, const GradMap<T>& grads, const SgdOptions& opts) {
  const T lr = static_cast<T>(opts.lr), wd = static_cast<T>(opts.weight_decay), m = static_cast<T>(opts.momentum);
  const T d = static_cast<T>(state.ema_decay);
  // Validate everything first so a mismatch leaves the model untouched.
  visit_tensors(model, [&](const std::string& name, auto values, const auto&, TensorRole role) {
    if (role != TensorRole::parameter) return;
    const auto g = grads.find(name);
    const std::size_t got = g == grads.end() ? 0 : g->second.size();
    if (got != values.size()) throw ShapeError("sgd_step " + name, "gradient length", values.size(), got);
    const auto v = state.velocity.find(name);
    if (v == state.velocity.end() || v->second.size() != values.size()) {
      throw ShapeError("sgd_step " + name, "momentum buffer length", values.size(),
                       v == state.velocity.end() ? 0 : v->second.size());
    }
  });
  visit_tensors(model, [&](const std::string& name, auto values, const auto&, TensorRole role) {
    if (role == TensorRole::parameter) {
      const auto& g = grads.at(name);
      auto& v = state.velocity.at(name);
      for (std::size_t i = 0; i < values.size(); ++i) {
        v[i] = m * v[i] + (g[i] + wd * values[i]);
        values[i] -= lr * v[i];
      }
    }
    auto it = state.ema.find(name);
    if (it == state.ema.end() || it->second.size() != values.size()) {
      state.ema[name] = std::vector<T>(values.begin(), values.end());
      return;
    }
    auto& e = it->second;
    for (std::size_t i = 0; i < values.size(); ++i) e[i] = d * e[i] + (T{1} - d) * values[i];
  });
  ++state.step;
}

template <typename T>
Model<T> ema_model(const Model<T>& model, const TrainState<T>& state) {
  Model<T> out = model;
  visit_tensors(out, [&](const std::string& name, auto values, const auto&, TensorRole) {
    const auto it = state.ema.find(name);
    if (it == state.ema.end() || it->second.size() != values.size()) {
      throw ShapeError("ema_model " + name, "shadow length", values.size(),
                       it == state.ema.end() ? 0 : it->second.size());
    }
    std::copy(it->second.begin(), it->second.end(), values.begin());
  });
  return out;
}

void TrainConfig::validate() const {
  arch.validate();
  ScheduleSpec s = schedule;
  s.T = 1;
  s.validate();
  curriculum.validate();
  if (curriculum.epochs() != epochs) {
    throw ConfigError("TrainConfig: curriculum covers " + std::to_string(curriculum.epochs()) + " epochs, expected " +
                      std::to_string(epochs));
  }
  if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("TrainConfig: batch_size must be >= 2 for batch statistics");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("TrainConfig: momentum must lie in [0, 1)");
  if (!(smoothing >= 0.0 && smoothing <= 1.0)) throw ConfigError("TrainConfig: smoothing must lie in [0, 1]");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("TrainConfig: ema_decay must lie in [0, 1]");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("TrainConfig: bn_momentum must lie in [0, 1]");
  if (dataset_path.empty() && data.classes < 2) throw ConfigError("TrainConfig: need at least two classes");
}

namespace {

template <typename T>
double eval_loss(const Model<T>& model, const Dataset& ds, std::size_t resolution, std::size_t batch,
                 double smoothing) {
  if (ds.val_size() == 0) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  for (std::size_t start = 0; start < ds.val_size(); start += batch) {
    std::vector<std::size_t> idx(std::min(batch, ds.val_size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto x = ds.images<T>(false, idx, resolution);
    const auto y = ds.labels(false, idx);
    const auto loss = label_smoothed_ce(forward(model, x), y, static_cast<T>(smoothing)).loss;
    total += static_cast<double>(loss) * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(ds.val_size());
}

void require_finite(double loss, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << "training diverged: loss " << loss << " at epoch " << epoch << ", step " << step
       << "; lower the learning rate or check the input data";
    throw NumericError(os.str());
  }
}

template <typename T>
void require_finite(const Model<T>& model, std::size_t epoch, std::size_t step) {
  std::string bad;
  visit_tensors(model, [&](const std::string& name, auto values, const auto&, TensorRole) {
    if (!bad.empty()) return;
    for (T v : values) {
      if (!std::isfinite(v)) {
        bad = name;
        return;
      }
    }
  });
  if (!bad.empty()) {
    std::ostringstream os;
    os << "training diverged: " << bad << " is non-finite at epoch " << epoch << ", step " << step
       << "; lower the learning rate or check the input data";
    throw NumericError(os.str());
  }
}

}  // namespace

template <typename T>
TrainLog<T> train_toy(const TrainConfig& config) {
  config.validate();
  const Dataset ds = config.dataset_path.empty() ? Dataset::synthetic(config.data)
                                                 : Dataset::cifar_binary(config.dataset_path);
  ArchSpec spec = config.arch;
  spec.in_channels = ds.channels();
  spec.num_classes = ds.classes();

  TrainLog<T> log;
  log.model = build_model<T>(spec, ModelMode::train, {config.seed, false});
  const std::size_t steps_per_epoch = ds.train_size() / config.batch_size;
  if (steps_per_epoch == 0) throw ConfigError("train_toy: training split smaller than one batch");
  ScheduleSpec schedule = config.schedule;
  schedule.T = config.epochs * steps_per_epoch;
  schedule.validate();
  log.state = init_train_state(log.model, schedule.T, config.ema_decay);

  Rng rng(config.seed ^ 0x5eedULL);
  std::vector<std::size_t> order(ds.train_size());
  std::iota(order.begin(), order.end(), 0);
  const BackwardOptions bopts{config.smoothing, config.bn_momentum, 1.0};
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const std::size_t res = config.curriculum.at(epoch).resolution;
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    EpochLog entry;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::span<const std::size_t> idx(order.data() + b * config.batch_size, config.batch_size);
      const auto x = ds.images<T>(true, idx, res);
      const auto y = ds.labels(true, idx);
      auto r = backward(log.model, x, std::span<const std::size_t>(y), bopts);
      require_finite(static_cast<double>(r.loss), epoch, t);
      entry.lr = schedule.lr(t);
      entry.wd = schedule.wd(t);
      sgd_step(log.model, log.state, r.grads, {entry.lr, entry.wd, config.momentum});
      require_finite(log.model, epoch, t);
      sum += static_cast<double>(r.loss);
      ++t;
    }
    entry.epoch = epoch;
    entry.resolution = res;
    entry.train_loss = sum / static_cast<double>(steps_per_epoch);
    entry.val_loss = eval_loss(log.model, ds, res, config.batch_size, config.smoothing);
    log.epochs.push_back(entry);
  }
  return log;
}

template <typename T>
std::vector<double> train_steps(Model<T>& model, const SyntheticSpec& data, std::size_t steps, std::size_t batch_size,
                                std::size_t resolution, const ScheduleSpec& schedule, std::uint64_t seed) {
  if (batch_size < 2) throw ConfigError("train_steps: batch_size must be >= 2 for batch statistics");
  SyntheticSpec d = data;
  d.channels = model.in_channels;
  d.classes = std::min(d.classes, model.num_classes());
  d.train_size = std::max(d.train_size, batch_size);
  d.val_size = 0;
  const Dataset ds = Dataset::synthetic(d);
  ScheduleSpec s = schedule;
  s.T = std::max<std::size_t>(steps, 1);
  s.validate();
  TrainState<T> state = init_train_state(model, s.T);
  Rng rng(seed);
  std::vector<std::size_t> order(ds.train_size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<double> losses;
  for (std::size_t t = 0; t < steps; ++t) {
    if (cursor + batch_size > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::span<const std::size_t> idx(order.data() + cursor, batch_size);
    cursor += batch_size;
    const auto x = ds.images<T>(true, idx, resolution);
    const auto y = ds.labels(true, idx);
    auto r = backward(model, x, std::span<const std::size_t>(y));
    require_finite(static_cast<double>(r.loss), 0, t);
    sgd_step(model, state, r.grads, {s.lr(t), s.wd(t), 0.9});
    require_finite(model, 0, t);
    losses.push_back(static_cast<double>(r.loss));
  }
  return losses;
}

std::string log_to_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "epoch,train_loss,val_loss,lr,wd\n";
  for (const auto& e : log) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << ',' << e.wd << '\n';
  return os.str();
}

void write_log_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << log_to_csv(log);
  if (!out) throw Error("failed writing " + path.string());
}

std::string config_to_json(const TrainConfig& c) {
  using nlohmann::json;
  json j;
  j["arch"] = json::parse(arch_to_json(c.arch));
  j["data"] = {{"classes", c.data.classes},       {"channels", c.data.channels}, {"train_size", c.data.train_size},
               {"val_size", c.data.val_size},     {"noise", c.data.noise},       {"seed", c.data.seed}};
  j["schedule"] = {{"lr0", c.schedule.lr0}, {"lrT", c.schedule.lrT},   {"wd0", c.schedule.wd0},
                   {"wdT", c.schedule.wdT}, {"anneal_wd", c.schedule.anneal_wd}};
  j["curriculum"] = json::array();
  for (const auto& p : c.curriculum.phases) {
    j["curriculum"].push_back({{"begin", p.begin}, {"end", p.end}, {"resolution", p.resolution}, {"strength", p.strength}});
  }
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["momentum"] = c.momentum;
  j["smoothing"] = c.smoothing;
  j["ema_decay"] = c.ema_decay;
  j["bn_momentum"] = c.bn_momentum;
  j["seed"] = c.seed;
  j["dataset_path"] = c.dataset_path;
  return j.dump(2);
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("train config: unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

TrainConfig config_from_json(std::string_view text) {
  using nlohmann::json;
  try {
    const json j = json::parse(text);
    reject_unknown(j,
                   {"arch", "data", "schedule", "curriculum", "epochs", "batch_size", "momentum", "smoothing",
                    "ema_decay", "bn_momentum", "seed", "dataset_path"},
                   "top level");
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.momentum = j.value("momentum", c.momentum);
    c.smoothing = j.value("smoothing", c.smoothing);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    c.seed = j.value("seed", c.seed);
    c.dataset_path = j.value("dataset_path", std::string());
    if (!j.contains("arch")) {
      c.arch = toy_arch(4, true, true);
    } else if (j["arch"].is_string()) {
      const auto name = j["arch"].get<std::string>();
      c.arch = name == "toy" ? toy_arch(4, true, true) : variant_spec(name);
    } else {
      c.arch = arch_from_json(j["arch"].dump());
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      reject_unknown(d, {"classes", "channels", "train_size", "val_size", "noise", "seed"}, "data");
      c.data.classes = d.value("classes", c.data.classes);
      c.data.channels = d.value("channels", c.data.channels);
      c.data.train_size = d.value("train_size", c.data.train_size);
      c.data.val_size = d.value("val_size", c.data.val_size);
      c.data.noise = d.value("noise", c.data.noise);
      c.data.seed = d.value("seed", c.data.seed);
    }
    if (j.contains("schedule")) {
      const auto& s = j["schedule"];
      reject_unknown(s, {"lr0", "lrT", "wd0", "wdT", "anneal_wd"}, "schedule");
      c.schedule.lr0 = s.value("lr0", c.schedule.lr0);
      c.schedule.lrT = s.value("lrT", c.schedule.lrT);
      c.schedule.wd0 = s.value("wd0", c.schedule.wd0);
      c.schedule.wdT = s.value("wdT", c.schedule.wdT);
      c.schedule.anneal_wd = s.value("anneal_wd", c.schedule.anneal_wd);
    }
    if (!j.contains("curriculum")) {
      c.curriculum = CurriculumSpec::constant(c.epochs, 32);
    } else if (j["curriculum"].is_string()) {
      const auto kind = j["curriculum"].get<std::string>();
      if (kind != "imagenet") throw ConfigError("train config: unknown curriculum '" + kind + "'");
      c.curriculum = CurriculumSpec::imagenet().rescaled(c.epochs, 32);
    } else {
      for (const auto& p : j["curriculum"]) {
        reject_unknown(p, {"begin", "end", "resolution", "strength"}, "curriculum phase");
        c.curriculum.phases.push_back({p.at("begin").get<std::size_t>(), p.at("end").get<std::size_t>(),
                                       p.at("resolution").get<std::size_t>(), p.value("strength", 1.0)});
      }
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

ArchSpec toy_arch(int k, bool scale_branch, bool skip_branch, std::size_t classes) {
  ArchSpec spec;
  spec.name = "toy";
  spec.num_classes = classes;
  spec.scale_branch = scale_branch;
  spec.skip_branch = skip_branch;
  StageSpec stem;
  stem.blocks = 1;
  stem.stride = 2;
  stem.base_channels = 16;
  stem.k = k;
  stem.kind = BlockKind::dense;
  StageSpec mid = stem;
  mid.blocks = 2;
  mid.stride = 1;
  mid.kind = BlockKind::separable;
  StageSpec last = mid;
  last.stride = 2;
  last.base_channels = 32;
  spec.stages = {stem, mid, last};
  spec.validate();
  return spec;
}

#define MOBILEONE_INSTANTIATE_TRAIN(T)                                                                       \
  template LossResult<T> label_smoothed_ce(const Tensor4<T>&, std::span<const std::size_t>, T);             \
  template TrainState<T> init_train_state(const Model<T>&, std::size_t, double);                            \
  template void sgd_step(Model<T>&, TrainState<T>&, const GradMap<T>&, const SgdOptions&);                 \
  template Model<T> ema_model(const Model<T>&, const TrainState<T>&);                                       \
  template TrainLog<T> train_toy<T>(const TrainConfig&);                                                    \
  template std::vector<double> train_steps(Model<T>&, const SyntheticSpec&, std::size_t, std::size_t,       \
                                           std::size_t, const ScheduleSpec&, std::uint64_t);

MOBILEONE_INSTANTIATE_TRAIN(float)
MOBILEONE_INSTANTIATE_TRAIN(double)

}  // namespace mobileone
