#include "mobileone/arch.hpp"

#include <array>
#include <cmath>
#include <type_traits>

#include <json.hpp>

#include "mobileone/kernels.hpp"

namespace mobileone {

std::size_t StageSpec::channels() const {
  auto c = static_cast<std::size_t>(std::llround(static_cast<double>(base_channels) * alpha));
  if (max_channels > 0) c = std::min(c, static_cast<std::size_t>(max_channels));
  return c;
}

void StageSpec::validate() const {
  if (blocks < 1) throw ConfigError("StageSpec: blocks must be >= 1");
  if (stride != 1 && stride != 2) throw ConfigError("StageSpec: stride must be 1 or 2");
  if (!(alpha > 0.0)) throw ConfigError("StageSpec: alpha must be positive");
  if (k < 1 || k > 5) throw ConfigError("StageSpec: k must be in [1, 5]");
  if (channels() < 1) throw ConfigError("StageSpec: stage width rounds to zero");
}

std::size_t ArchSpec::feature_width() const { return stages.empty() ? 0 : stages.back().channels(); }

void ArchSpec::validate() const {
  if (stages.empty()) throw ConfigError("ArchSpec '" + name + "': no stages");
  for (const auto& s : stages) s.validate();
  if (num_classes < 1) throw ConfigError("ArchSpec '" + name + "': num_classes must be positive");
  if (in_channels < 1) throw ConfigError("ArchSpec '" + name + "': in_channels must be positive");
}

namespace {

constexpr std::array<int, 6> kBaseChannels{64, 64, 128, 256, 256, 512};
constexpr std::array<int, 6> kStrides{2, 2, 2, 2, 1, 2};
constexpr std::array<int, 6> kStandardBlocks{1, 2, 8, 5, 5, 1};

struct Row {
  int blocks;
  double alpha;
  int k;
  Activation act = Activation::relu;
};

// Stage 1 is the stem: a dense 3x3 conv from the image, at most 64 wide.
ArchSpec assemble(std::string name, const std::array<Row, 6>& rows) {
  ArchSpec spec;
  spec.name = std::move(name);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    StageSpec s;
    s.blocks = rows[i].blocks;
    s.stride = kStrides[i];
    s.base_channels = kBaseChannels[i];
    s.alpha = rows[i].alpha;
    s.k = rows[i].k;
    s.activation = rows[i].act;
    if (i == 0) {
      s.kind = BlockKind::dense;
      s.max_channels = 64;
    }
    spec.stages.push_back(s);
  }
  return spec;
}

std::array<Row, 6> standard(std::array<double, 6> alpha, int k) {
  std::array<Row, 6> rows{};
  for (std::size_t i = 0; i < 6; ++i) rows[i] = {kStandardBlocks[i], alpha[i], k};
  return rows;
}

}  // namespace

std::vector<std::string> variant_names() {
  return {"S0", "S1", "S2", "S3", "S4", "mu0", "mu1", "mu2"};
}

ArchSpec variant_spec(std::string_view raw) {
  std::string name(raw);
  if (name.rfind("μ", 0) == 0) name = "mu" + name.substr(std::string("μ").size());
  if (name == "S0") return assemble(name, standard({0.75, 0.75, 1.0, 1.0, 1.0, 2.0}, 4));
  if (name == "S1") return assemble(name, standard({1.5, 1.5, 1.5, 2.0, 2.0, 2.5}, 1));
  if (name == "S2") return assemble(name, standard({1.5, 1.5, 2.0, 2.5, 2.5, 4.0}, 1));
  if (name == "S3") return assemble(name, standard({2.0, 2.0, 2.5, 3.0, 3.0, 4.0}, 1));
  if (name == "S4") {
    auto rows = standard({3.0, 3.0, 3.5, 3.5, 3.5, 4.0}, 1);
    rows[4].act = Activation::se_relu;
    rows[5].act = Activation::se_relu;
    return assemble(name, rows);
  }
  if (name == "mu0") {
    return assemble(name, {{{1, 0.75, 3}, {2, 0.75, 3}, {4, 0.5, 3}, {3, 0.5, 3}, {3, 0.5, 3}, {1, 0.75, 3}}});
  }
  if (name == "mu1") {
    return assemble(name, {{{1, 0.75, 2}, {2, 0.75, 2}, {6, 0.75, 2}, {4, 0.75, 2}, {4, 0.75, 2}, {1, 1.0, 2}}});
  }
  if (name == "mu2") {
    return assemble(name, {{{1, 0.75, 2}, {2, 0.75, 2}, {6, 1.0, 2}, {4, 1.0, 2}, {4, 1.0, 2}, {1, 1.0, 2}}});
  }
  std::string valid;
  for (const auto& v : variant_names()) valid += (valid.empty() ? "" : ", ") + v;
  throw ConfigError("unknown variant '" + std::string(raw) + "'; valid names: " + valid);
}

std::string arch_to_json(const ArchSpec& spec) {
  nlohmann::json j;
  j["name"] = spec.name;
  j["num_classes"] = spec.num_classes;
  j["in_channels"] = spec.in_channels;
  j["scale_branch"] = spec.scale_branch;
  j["skip_branch"] = spec.skip_branch;
  j["se_ratio"] = spec.se_ratio;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : spec.stages) {
    j["stages"].push_back({{"blocks", s.blocks},
                           {"stride", s.stride},
                           {"base_channels", s.base_channels},
                           {"alpha", s.alpha},
                           {"k", s.k},
                           {"activation", to_string(s.activation)},
                           {"kind", to_string(s.kind)},
                           {"max_channels", s.max_channels},
                           {"channels", s.channels()}});
  }
  return j.dump(2);
}

ArchSpec arch_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ArchSpec spec;
    spec.name = j.at("name").get<std::string>();
    spec.num_classes = j.value("num_classes", std::size_t{1000});
    spec.in_channels = j.value("in_channels", std::size_t{3});
    spec.scale_branch = j.value("scale_branch", true);
    spec.skip_branch = j.value("skip_branch", true);
    spec.se_ratio = j.value("se_ratio", std::size_t{16});
    for (const auto& js : j.at("stages")) {
      StageSpec s;
      s.blocks = js.at("blocks").get<int>();
      s.stride = js.at("stride").get<int>();
      s.base_channels = js.at("base_channels").get<int>();
      s.alpha = js.at("alpha").get<double>();
      s.k = js.at("k").get<int>();
      const auto act = js.value("activation", std::string("relu"));
      if (act != "relu" && act != "se_relu") throw ConfigError("ArchSpec json: unknown activation " + act);
      s.activation = act == "se_relu" ? Activation::se_relu : Activation::relu;
      const auto kind = js.value("kind", std::string("separable"));
      if (kind != "separable" && kind != "dense") throw ConfigError("ArchSpec json: unknown block kind " + kind);
      s.kind = kind == "dense" ? BlockKind::dense : BlockKind::separable;
      s.max_channels = js.value("max_channels", 0);
      spec.stages.push_back(s);
    }
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ArchSpec json: ") + e.what());
  }
}

template <typename T>
Model<T> build_model(const ArchSpec& spec, ModelMode mode, const InitPolicy& init) {
  spec.validate();
  Rng rng(init.seed);
  Model<T> m;
  m.name = spec.name;
  m.mode = mode;
  m.in_channels = spec.in_channels;
  std::size_t channels = spec.in_channels;
  for (const auto& stage : spec.stages) {
    for (int b = 0; b < stage.blocks; ++b) {
      BlockOptions o;
      o.kind = stage.kind;
      o.in_channels = channels;
      o.out_channels = stage.channels();
      o.stride = b == 0 ? static_cast<std::size_t>(stage.stride) : 1;
      o.k = stage.k;
      o.scale_branch = spec.scale_branch;
      o.skip = spec.skip_branch;
      o.activation = stage.activation;
      o.se_ratio = spec.se_ratio;
      if (mode == ModelMode::train) {
        m.layers.emplace_back(make_train_block<T>(o, rng, init));
      } else {
        m.layers.emplace_back(make_inference_block<T>(o, rng, init));
      }
      channels = o.out_channels;
    }
  }
  m.layers.emplace_back(AvgPool{});
  Linear<T> fc{channels, spec.num_classes, std::vector<T>(channels * spec.num_classes),
               std::vector<T>(spec.num_classes, T{0})};
  fill_normal(std::span<T>(fc.weight), rng, 0.0, 0.01);
  m.layers.emplace_back(std::move(fc));
  m.validate();
  return m;
}

template <typename T>
std::size_t count_params(const Model<T>& model) {
  std::size_t total = 0;
  for (const auto& layer : model.layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (!std::is_same_v<L, AvgPool>) total += l.param_count();
        },
        layer);
  }
  return total;
}

template <typename T>
std::size_t count_flops(const Model<T>& model, std::size_t input_res) {
  if (model.mode != ModelMode::inference) {
    throw ConfigError("count_flops: MACs are reported at inference; reparameterize the model first");
  }
  std::size_t macs = 0;
  Shape4 shape{1, model.in_channels, input_res, input_res};
  for (const auto& layer : model.layers) {
    if (const auto* b = std::get_if<InferenceBlock<T>>(&layer)) {
      for (const auto& st : b->stages) {
        const ConvGeometry g = ConvGeometry::make(shape, st.conv.out_channels(), st.conv.kernel(),
                                                  st.conv.stride, st.conv.padding, st.conv.groups);
        macs += g.macs();
        shape = g.output_shape();
        if (st.se) {
          macs += shape.c * shape.plane();
          macs += st.se->reduce.out_channels() * st.se->reduce.in_channels();
          macs += st.se->expand.out_channels() * st.se->expand.in_channels();
        }
      }
    } else if (std::holds_alternative<AvgPool>(layer)) {
      macs += shape.c * shape.plane();
      shape = {shape.n, shape.c, 1, 1};
    } else if (const auto* fc = std::get_if<Linear<T>>(&layer)) {
      macs += fc->in_features * fc->out_features;
    }
  }
  return macs;
}

template Model<float> build_model<float>(const ArchSpec&, ModelMode, const InitPolicy&);
template Model<double> build_model<double>(const ArchSpec&, ModelMode, const InitPolicy&);
template std::size_t count_params(const Model<float>&);
template std::size_t count_params(const Model<double>&);
template std::size_t count_flops(const Model<float>&, std::size_t);
template std::size_t count_flops(const Model<double>&, std::size_t);

}  // namespace mobileone
