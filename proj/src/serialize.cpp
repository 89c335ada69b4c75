#include "mobileone/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <type_traits>

#include <json.hpp>

namespace mobileone {

static_assert(std::endian::native == std::endian::little,
              "the weight container is written in host order and assumes a little-endian host");

namespace {

using json = nlohmann::json;

struct Record {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::uint64_t offset = 0;
};

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32:
      return 4;
    case DType::f64:
      return 8;
    case DType::u8:
      return 1;
  }
  throw FormatError("unknown dtype tag " + std::to_string(static_cast<int>(d)));
}

const char* dtype_name(DType d) {
  switch (d) {
    case DType::f32:
      return "f32";
    case DType::f64:
      return "f64";
    case DType::u8:
      return "u8";
  }
  return "?";
}

template <typename T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

std::uint64_t element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(std::string("weight container truncated while reading ") + what);
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

template <typename C>
json conv_geometry(const C& c) {
  return {{"in", c.in_channels()}, {"out", c.out_channels()}, {"kernel", c.kernel()},
          {"stride", c.stride},    {"padding", c.padding},    {"groups", c.groups},
          {"bias", c.has_bias()}};
}

template <typename T>
json describe(const Model<T>& m) {
  json j;
  j["format"] = "MOB1";
  j["version"] = kContainerVersion;
  j["name"] = m.name;
  j["mode"] = to_string(m.mode);
  j["input_resolution"] = m.input_resolution;
  j["in_channels"] = m.in_channels;
  j["layers"] = json::array();
  for (const auto& layer : m.layers) {
    json jl;
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, TrainBlock<T>>) {
            jl["type"] = "train_block";
            jl["kind"] = to_string(l.kind);
            jl["activation"] = to_string(l.activation);
            for (const auto& st : l.stages) {
              json js = conv_geometry(st.lead());
              js["branches"] = st.branches.size();
              js["scale"] = st.scale.has_value();
              js["skip"] = st.skip.has_value();
              js["se"] = st.se.has_value();
              if (st.se) {
                js["se_squeeze"] = st.se->reduce.out_channels();
                js["se_ratio"] = st.se->ratio;
              }
              json eps = json::array();
              for (const auto& b : st.branches) eps.push_back(static_cast<double>(b.bn.eps));
              if (st.scale) eps.push_back(static_cast<double>(st.scale->bn.eps));
              if (st.skip) eps.push_back(static_cast<double>(st.skip->eps));
              js["bn_eps"] = eps;
              jl["stages"].push_back(js);
            }
          } else if constexpr (std::is_same_v<L, InferenceBlock<T>>) {
            jl["type"] = "inference_block";
            jl["kind"] = to_string(l.kind);
            jl["activation"] = to_string(l.activation);
            for (const auto& st : l.stages) {
              json js = conv_geometry(st.conv);
              js["se"] = st.se.has_value();
              if (st.se) {
                js["se_squeeze"] = st.se->reduce.out_channels();
                js["se_ratio"] = st.se->ratio;
              }
              jl["stages"].push_back(js);
            }
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            jl["type"] = "avgpool";
          } else {
            jl["type"] = "linear";
            jl["in_features"] = l.in_features;
            jl["out_features"] = l.out_features;
          }
        },
        layer);
    j["layers"].push_back(jl);
  }
  return j;
}

template <typename T>
ConvSpec<T> skeleton_conv(const json& js, std::size_t in, std::size_t out, std::size_t kernel,
                          bool bias) {
  ConvSpec<T> c;
  const std::size_t groups = js.at("groups").get<std::size_t>();
  if (groups == 0 || in % groups != 0) throw FormatError("container: invalid conv groups");
  c.weight = Tensor4<T>({out, in / groups, kernel, kernel});
  if (bias) c.bias.assign(out, T{0});
  c.stride = js.at("stride").get<std::size_t>();
  c.padding = js.at("padding").get<std::size_t>();
  c.groups = groups;
  return c;
}

template <typename T>
SEParams<T> skeleton_se(const json& js, std::size_t channels) {
  const auto squeeze = js.at("se_squeeze").get<std::size_t>();
  SEParams<T> se;
  se.ratio = js.value("se_ratio", std::size_t{16});
  json one = {{"groups", 1}, {"stride", 1}, {"padding", 0}};
  se.reduce = skeleton_conv<T>(one, channels, squeeze, 1, true);
  se.expand = skeleton_conv<T>(one, squeeze, channels, 1, true);
  return se;
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "se_relu") return Activation::se_relu;
  throw FormatError("container: unknown activation '" + s + "'");
}

BlockKind parse_kind(const std::string& s) {
  if (s == "separable") return BlockKind::separable;
  if (s == "dense") return BlockKind::dense;
  throw FormatError("container: unknown block kind '" + s + "'");
}

template <typename T>
Model<T> skeleton(const json& j) {
  Model<T> m;
  m.name = j.at("name").get<std::string>();
  const auto mode = j.at("mode").get<std::string>();
  if (mode != "train" && mode != "inference") throw FormatError("container: unknown mode '" + mode + "'");
  m.mode = mode == "train" ? ModelMode::train : ModelMode::inference;
  m.input_resolution = j.at("input_resolution").get<std::size_t>();
  m.in_channels = j.at("in_channels").get<std::size_t>();
  for (const auto& jl : j.at("layers")) {
    const auto type = jl.at("type").get<std::string>();
    if (type == "train_block") {
      TrainBlock<T> b;
      b.kind = parse_kind(jl.at("kind").get<std::string>());
      b.activation = parse_activation(jl.at("activation").get<std::string>());
      for (const auto& js : jl.at("stages")) {
        const auto in = js.at("in").get<std::size_t>();
        const auto out = js.at("out").get<std::size_t>();
        const auto kernel = js.at("kernel").get<std::size_t>();
        const auto eps = js.at("bn_eps").get<std::vector<double>>();
        std::size_t e = 0;
        auto next_eps = [&]() {
          if (e >= eps.size()) throw FormatError("container: missing BN eps entry");
          return static_cast<T>(eps[e++]);
        };
        TrainStage<T> st;
        const auto k = js.at("branches").get<std::size_t>();
        for (std::size_t i = 0; i < k; ++i) {
          st.branches.push_back({skeleton_conv<T>(js, in, out, kernel, js.at("bias").get<bool>()),
                                 BNParams<T>::identity(out, next_eps())});
        }
        if (js.at("scale").get<bool>()) {
          json one = js;
          one["padding"] = 0;
          st.scale = ConvBN<T>{skeleton_conv<T>(one, in, out, 1, false), BNParams<T>::identity(out, next_eps())};
        }
        if (js.at("skip").get<bool>()) st.skip = BNParams<T>::identity(in, next_eps());
        if (js.at("se").get<bool>()) st.se = skeleton_se<T>(js, out);
        b.stages.push_back(std::move(st));
      }
      m.layers.emplace_back(std::move(b));
    } else if (type == "inference_block") {
      InferenceBlock<T> b;
      b.kind = parse_kind(jl.at("kind").get<std::string>());
      b.activation = parse_activation(jl.at("activation").get<std::string>());
      for (const auto& js : jl.at("stages")) {
        const auto out = js.at("out").get<std::size_t>();
        InferStage<T> st{skeleton_conv<T>(js, js.at("in").get<std::size_t>(), out,
                                          js.at("kernel").get<std::size_t>(), js.at("bias").get<bool>()),
                         std::nullopt};
        if (js.at("se").get<bool>()) st.se = skeleton_se<T>(js, out);
        b.stages.push_back(std::move(st));
      }
      m.layers.emplace_back(std::move(b));
    } else if (type == "avgpool") {
      m.layers.emplace_back(AvgPool{});
    } else if (type == "linear") {
      const auto in = jl.at("in_features").get<std::size_t>();
      const auto out = jl.at("out_features").get<std::size_t>();
      m.layers.emplace_back(Linear<T>{in, out, std::vector<T>(in * out), std::vector<T>(out)});
    } else {
      throw FormatError("container: unknown layer type '" + type + "'");
    }
  }
  return m;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight container " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Parsed {
  std::vector<Record> records;
  std::size_t data_start = 0;
};

Parsed parse_header(const std::string& bytes) {
  Reader r(bytes);
  const std::string magic = r.get_string(4, "magic");
  if (magic != std::string(kContainerMagic, 4)) throw FormatError("not a MOB1 weight container (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  Parsed p;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    const auto len = r.get<std::uint32_t>("name length");
    rec.name = r.get_string(len, "tensor name");
    const auto tag = r.get<std::uint8_t>("dtype");
    if (tag > 2) throw FormatError("tensor '" + rec.name + "' has unknown dtype tag " + std::to_string(tag));
    rec.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("tensor '" + rec.name + "' has implausible rank " + std::to_string(rank));
    for (std::uint32_t d = 0; d < rank; ++d) rec.dims.push_back(r.get<std::uint64_t>("dims"));
    rec.offset = r.get<std::uint64_t>("offset");
    p.records.push_back(std::move(rec));
  }
  p.data_start = r.pos();
  for (const auto& rec : p.records) {
    const std::uint64_t end = p.data_start + rec.offset + element_count(rec.dims) * dtype_size(rec.dtype);
    if (end > bytes.size()) throw FormatError("weight container truncated in data of '" + rec.name + "'");
  }
  return p;
}

template <typename T>
void read_values(const std::string& bytes, std::size_t start, const Record& rec, std::span<T> out) {
  const char* src = bytes.data() + start + rec.offset;
  if (rec.dtype == DType::f32) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      float v;
      std::memcpy(&v, src + i * 4, 4);
      out[i] = static_cast<T>(v);
    }
  } else if (rec.dtype == DType::f64) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      double v;
      std::memcpy(&v, src + i * 8, 8);
      out[i] = static_cast<T>(v);
    }
  } else {
    throw FormatError("tensor '" + rec.name + "' is not floating point");
  }
}

}  // namespace

template <typename T>
std::string describe_model(const Model<T>& model) {
  return describe(model).dump(2);
}

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
  model.validate();
  const std::string meta = describe(model).dump();

  std::vector<Record> records;
  std::vector<std::span<const T>> payloads;
  records.push_back({"__meta__", DType::u8, {meta.size()}, 0});
  std::uint64_t offset = meta.size();
  visit_tensors(model, [&](const std::string& name, std::span<const T> values,
                           const std::vector<std::size_t>& dims, TensorRole) {
    records.push_back({name, dtype_of<T>(), std::vector<std::uint64_t>(dims.begin(), dims.end()), offset});
    payloads.push_back(values);
    offset += values.size() * sizeof(T);
  });

  std::string out(kContainerMagic, 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(rec.name.size()));
    out += rec.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(rec.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(rec.dims.size()));
    for (auto d : rec.dims) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, rec.offset);
  }
  out += meta;
  for (const auto& p : payloads) {
    out.append(reinterpret_cast<const char*>(p.data()), p.size() * sizeof(T));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("failed writing " + path.string());

  json side = describe(model);
  side["dtype"] = dtype_name(dtype_of<T>());
  side["tensors"] = json::array();
  for (const auto& rec : records) {
    side["tensors"].push_back(
        {{"name", rec.name}, {"dtype", dtype_name(rec.dtype)}, {"dims", rec.dims}, {"offset", rec.offset}});
  }
  std::ofstream s(path.string() + ".json");
  if (!s) throw Error("cannot open sidecar " + path.string() + ".json for writing");
  s << side.dump(2) << '\n';
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Parsed p = parse_header(bytes);
  if (p.records.empty() || p.records.front().name != "__meta__" || p.records.front().dtype != DType::u8) {
    throw FormatError("weight container lacks the __meta__ record");
  }
  const Record& meta_rec = p.records.front();
  const std::string meta = bytes.substr(p.data_start + meta_rec.offset, element_count(meta_rec.dims));

  Model<T> m;
  try {
    m = skeleton<T>(json::parse(meta));
  } catch (const json::exception& e) {
    throw FormatError(std::string("weight container metadata: ") + e.what());
  }

  std::map<std::string, const Record*> by_name;
  for (const auto& rec : p.records) by_name[rec.name] = &rec;
  std::size_t filled = 0;
  visit_tensors(m, [&](const std::string& name, std::span<T> values, const std::vector<std::size_t>& dims,
                       TensorRole) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("weight container is missing tensor '" + name + "'");
    const Record& rec = *it->second;
    if (rec.dims != std::vector<std::uint64_t>(dims.begin(), dims.end())) {
      throw FormatError("tensor '" + name + "' has dims inconsistent with the layer description");
    }
    read_values(bytes, p.data_start, rec, values);
    ++filled;
  });
  if (filled + 1 != p.records.size()) {
    throw FormatError("weight container has " + std::to_string(p.records.size() - 1 - filled) +
                      " tensors not described by its metadata");
  }
  try {
    m.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("weight container describes an invalid model: ") + e.what());
  }
  return m;
}

DType stored_dtype(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Parsed p = parse_header(bytes);
  for (const auto& rec : p.records) {
    if (rec.dtype != DType::u8) return rec.dtype;
  }
  return DType::f32;
}

template void save_model(const Model<float>&, const std::filesystem::path&);
template void save_model(const Model<double>&, const std::filesystem::path&);
template Model<float> load_model<float>(const std::filesystem::path&);
template Model<double> load_model<double>(const std::filesystem::path&);
template std::string describe_model(const Model<float>&);
template std::string describe_model(const Model<double>&);

}  // namespace mobileone
