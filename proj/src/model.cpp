#include "amimv/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "amimv/errors.hpp"
#include "amimv/fsutil.hpp"
#include "amimv/ops.hpp"
#include "amimv/rng.hpp"

namespace amimv {

std::string_view arch_name(EncoderArch arch) {
  return arch == EncoderArch::tiny ? "tiny" : "small_residual";
}

EncoderArch parse_arch(std::string_view name) {
  if (name == "tiny") return EncoderArch::tiny;
  if (name == "small_residual") return EncoderArch::small_residual;
  throw ValidationError("unknown encoder arch '" + std::string(name) + "' (expected tiny or small_residual)");
}

namespace {

constexpr std::size_t kTinyStem = 16;
constexpr std::size_t kTinyFeatures = 64;
constexpr std::size_t kResidualStem = 32;
constexpr std::size_t kResidualWidths[4] = {32, 64, 128, 256};
constexpr std::size_t kResidualStrides[4] = {1, 2, 2, 2};

}  // namespace

std::size_t EncoderConfig::feature_dim() const {
  return arch == EncoderArch::tiny ? kTinyFeatures : kResidualWidths[3];
}

void EncoderConfig::validate() const {
  if (input_channels != 1 && input_channels != 3)
    throw ValidationError("encoder input_channels must be 1 or 3");
  if (projector_hidden == 0 || projector_output == 0) throw ValidationError("projector sizes must be positive");
  const std::size_t narrowest = arch == EncoderArch::tiny ? kTinyStem : kResidualStem;
  if (norm_groups == 0 || narrowest % norm_groups != 0)
    throw ValidationError("norm_groups must divide " + std::to_string(narrowest));
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"arch", arch_name(c.arch)},
                     {"input_channels", c.input_channels},
                     {"projector_hidden", c.projector_hidden},
                     {"projector_output", c.projector_output},
                     {"norm_groups", c.norm_groups}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  if (!j.is_object()) throw ValidationError("encoder config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "arch") c.arch = parse_arch(v.get<std::string>());
      else if (key == "input_channels") c.input_channels = v.get<std::size_t>();
      else if (key == "projector_hidden") c.projector_hidden = v.get<std::size_t>();
      else if (key == "projector_output") c.projector_output = v.get<std::size_t>();
      else if (key == "norm_groups") c.norm_groups = v.get<std::size_t>();
      else throw ValidationError("unknown config key encoder." + key);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("encoder config: bad value for " + key);
    }
  }
  c.validate();
}

namespace {

enum class Init { he_uniform, zeros, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in = 0;
};

void add_conv(std::vector<ParamSpec>& specs, const std::string& name, std::size_t in, std::size_t out,
              std::size_t k) {
  specs.push_back({name + ".weight", {out, in, k, k}, Init::he_uniform, in * k * k});
}

void add_norm(std::vector<ParamSpec>& specs, const std::string& name, std::size_t channels) {
  specs.push_back({name + ".gamma", {channels}, Init::ones});
  specs.push_back({name + ".beta", {channels}, Init::zeros});
}

void add_linear(std::vector<ParamSpec>& specs, const std::string& name, std::size_t in, std::size_t out) {
  specs.push_back({name + ".weight", {in, out}, Init::he_uniform, in});
  specs.push_back({name + ".bias", {out}, Init::zeros});
}

std::vector<ParamSpec> layout(const EncoderConfig& c) {
  std::vector<ParamSpec> specs;
  if (c.arch == EncoderArch::tiny) {
    add_conv(specs, "block1.conv", c.input_channels, kTinyStem, 3);
    add_norm(specs, "block1.norm", kTinyStem);
    add_conv(specs, "block2.conv", kTinyStem, kTinyFeatures, 3);
    add_norm(specs, "block2.norm", kTinyFeatures);
  } else {
    add_conv(specs, "stem.conv", c.input_channels, kResidualStem, 3);
    add_norm(specs, "stem.norm", kResidualStem);
    std::size_t in = kResidualStem;
    for (int b = 0; b < 4; ++b) {
      const std::string name = "res" + std::to_string(b + 1);
      const std::size_t out = kResidualWidths[b];
      add_conv(specs, name + ".conv1", in, out, 3);
      add_norm(specs, name + ".norm1", out);
      add_conv(specs, name + ".conv2", out, out, 3);
      add_norm(specs, name + ".norm2", out);
      if (in != out || kResidualStrides[b] != 1) {
        add_conv(specs, name + ".shortcut", in, out, 1);
        add_norm(specs, name + ".shortcut_norm", out);
      }
      in = out;
    }
  }
  const std::size_t d = c.feature_dim();
  add_linear(specs, "proj.fc1", d, c.projector_hidden);
  add_linear(specs, "proj.fc2", c.projector_hidden, c.projector_hidden);
  add_linear(specs, "proj.fc3", c.projector_hidden, c.projector_output);
  return specs;
}

class ParamLookup {
 public:
  explicit ParamLookup(const ParameterSet& params) {
    for (const auto& p : params) index_[p.name] = &p.value;
  }
  const Tensor& operator()(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("parameter set lacks " + name);
    return *it->second;
  }

 private:
  std::map<std::string, const Tensor*> index_;
};

Tensor conv_norm(const ParamLookup& p, const Tensor& x, const std::string& conv, const std::string& norm,
                 std::size_t stride, std::size_t padding, std::size_t groups) {
  const Tensor y = ops::conv2d(x, p(conv + ".weight"), stride, padding);
  return ops::group_norm(y, p(norm + ".gamma"), p(norm + ".beta"), groups);
}

Tensor global_avg_pool(const Tensor& x) {
  const auto& s = x.shape();
  return ops::reshape(ops::avg_pool2d(x, s[2], s[3]), {s[0], s[1]});
}

Tensor tiny_backbone(const ParamLookup& p, const Tensor& x, std::size_t groups) {
  Tensor h = ops::relu(conv_norm(p, x, "block1.conv", "block1.norm", 1, 1, groups));
  if (h.size(2) >= 2 && h.size(3) >= 2) h = ops::avg_pool2d(h, 2);
  h = ops::relu(conv_norm(p, h, "block2.conv", "block2.norm", 1, 1, groups));
  return global_avg_pool(h);
}

Tensor residual_backbone(const ParamLookup& p, const Tensor& x, std::size_t groups) {
  Tensor h = ops::relu(conv_norm(p, x, "stem.conv", "stem.norm", 1, 1, groups));
  std::size_t in = kResidualStem;
  for (int b = 0; b < 4; ++b) {
    const std::string name = "res" + std::to_string(b + 1);
    const std::size_t out = kResidualWidths[b], stride = kResidualStrides[b];
    Tensor y = ops::relu(conv_norm(p, h, name + ".conv1", name + ".norm1", stride, 1, groups));
    y = conv_norm(p, y, name + ".conv2", name + ".norm2", 1, 1, groups);
    const Tensor skip = (in != out || stride != 1)
                            ? conv_norm(p, h, name + ".shortcut", name + ".shortcut_norm", stride, 0, groups)
                            : h;
    h = ops::relu(ops::add(y, skip));
    in = out;
  }
  return global_avg_pool(h);
}

Tensor linear(const ParamLookup& p, const Tensor& x, const std::string& name) {
  return ops::add_bias(ops::matmul(x, p(name + ".weight")), p(name + ".bias"));
}

}  // namespace

EncoderPair init_pair(const EncoderConfig& config, std::uint64_t seed, double momentum, DType dtype) {
  config.validate();
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ValidationError("EMA momentum must lie in [0, 1]");
  EncoderPair pair;
  pair.config = config;
  pair.momentum = momentum;
  const RngStream root(seed);
  const auto specs = layout(config);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& spec = specs[i];
    std::vector<double> values(shape_numel(spec.shape), 0.0);
    if (spec.init == Init::ones) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (spec.init == Init::he_uniform) {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
      RngStream rng = root.substream({i});
      for (auto& v : values) v = rng.uniform(-bound, bound);
    }
    Tensor q = Tensor::from_values(values, spec.shape, dtype);
    q.set_requires_grad(true);
    pair.k.push_back({spec.name, q.detach()});
    pair.q.push_back({spec.name, std::move(q)});
  }
  return pair;
}

Encoded encode(const EncoderConfig& config, const ParameterSet& params, const Tensor& batch) {
  if (batch.dim() != 4 || batch.size(1) != config.input_channels)
    throw DimensionError("encoder expects [N, " + std::to_string(config.input_channels) + ", H, W], got " +
                         shape_string(batch.shape()));
  const ParamLookup p(params);
  const Tensor features = config.arch == EncoderArch::tiny ? tiny_backbone(p, batch, config.norm_groups)
                                                           : residual_backbone(p, batch, config.norm_groups);
  Tensor h = ops::relu(linear(p, features, "proj.fc1"));
  h = ops::relu(linear(p, h, "proj.fc2"));
  h = linear(p, h, "proj.fc3");
  return {features, ops::l2_normalize(h)};
}

void ema_update(EncoderPair& pair) {
  if (!(pair.momentum >= 0.0 && pair.momentum <= 1.0)) throw ValidationError("EMA momentum must lie in [0, 1]");
  if (pair.q.size() != pair.k.size()) throw ContractError("query and key parameter sets differ in size");
  const double m = pair.momentum;
  for (std::size_t i = 0; i < pair.q.size(); ++i) {
    const Tensor& q = pair.q[i].value;
    Tensor& k = pair.k[i].value;
    if (q.shape() != k.shape() || q.dtype() != k.dtype())
      throw ContractError("query/key mismatch for parameter " + pair.q[i].name);
    dispatch_dtype(k.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto kd = k.mutable_data<T>();
      const auto qd = q.data<T>();
      if (m == 1.0) return;
      if (m == 0.0) {
        std::copy(qd.begin(), qd.end(), kd.begin());
        return;
      }
      for (std::size_t j = 0; j < kd.size(); ++j)
        kd[j] = static_cast<T>(m * static_cast<double>(kd[j]) + (1.0 - m) * static_cast<double>(qd[j]));
    });
  }
}

EncoderPair clone_pair(const EncoderPair& pair) {
  EncoderPair out;
  out.config = pair.config;
  out.momentum = pair.momentum;
  for (const auto& p : pair.q) {
    Tensor t = p.value.clone();
    t.set_requires_grad(true);
    out.q.push_back({p.name, std::move(t)});
  }
  for (const auto& p : pair.k) out.k.push_back({p.name, p.value.detach()});
  return out;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void append_float32(std::vector<std::uint8_t>& out, const Tensor& t) {
  const Tensor f = t.dtype() == DType::float32 ? t : t.to(DType::float32);
  const auto data = f.data<float>();
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(data.data());
  out.insert(out.end(), bytes, bytes + data.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const EncoderPair& pair, const CheckpointInfo& info) {
  nlohmann::json params = nlohmann::json::array();
  std::vector<std::uint8_t> blob;
  std::size_t offset = 0;
  for (const auto* set : {&pair.q, &pair.k}) {
    const char* branch = set == &pair.q ? "q" : "k";
    for (const auto& p : *set) {
      params.push_back({{"branch", branch}, {"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
      append_float32(blob, p.value);
      offset += p.value.numel();
    }
  }
  nlohmann::json manifest{{"format", "amimv-checkpoint"},
                          {"version", 1},
                          {"encoder", pair.config},
                          {"arch", arch_name(pair.config.arch)},
                          {"dtype", "float32"},
                          {"byte_order", "little"},
                          {"momentum", pair.momentum},
                          {"step", info.step},
                          {"view_size", info.view_size},
                          {"mode", info.mode},
                          {"parameter_count", offset},
                          {"parameters", params}};
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "checkpoint.bin", blob);
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  const auto blob_path = dir / "checkpoint.bin";
  if (!std::filesystem::exists(manifest_path) || !std::filesystem::exists(blob_path))
    throw ValidationError("no checkpoint in " + dir.string() + " (need manifest.json and checkpoint.bin)");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  Checkpoint ck;
  try {
    if (manifest.at("format") != "amimv-checkpoint" || manifest.at("dtype") != "float32")
      throw FormatError("unsupported checkpoint format in " + manifest_path.string());
    ck.pair.config = manifest.at("encoder").get<EncoderConfig>();
    ck.pair.momentum = manifest.at("momentum").get<double>();
    ck.info.step = manifest.at("step").get<std::uint64_t>();
    ck.info.view_size = manifest.at("view_size").get<std::size_t>();
    ck.info.mode = manifest.at("mode").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("incomplete checkpoint manifest: " + std::string(e.what()));
  }

  std::ifstream in(blob_path, std::ios::binary);
  const std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto expected = layout(ck.pair.config);
  const auto& params = manifest.at("parameters");
  if (params.size() != 2 * expected.size())
    throw FormatError("checkpoint lists " + std::to_string(params.size()) + " parameters, architecture needs " +
                      std::to_string(2 * expected.size()));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& spec = expected[i % expected.size()];
    const auto& entry = params[i];
    const Shape shape = entry.at("shape").get<Shape>();
    if (entry.at("name") != spec.name || shape != spec.shape)
      throw FormatError("checkpoint parameter " + entry.at("name").get<std::string>() + " " + shape_string(shape) +
                        " does not match expected " + spec.name + " " + shape_string(spec.shape));
    const std::size_t n = shape_numel(shape);
    if ((offset + n) * sizeof(float) > raw.size()) throw FormatError("checkpoint.bin is truncated");
    std::vector<float> values(n);
    std::memcpy(values.data(), raw.data() + offset * sizeof(float), n * sizeof(float));
    offset += n;
    Tensor t = Tensor::from_buffer(std::move(values), shape);
    if (i < expected.size()) {
      t.set_requires_grad(true);
      ck.pair.q.push_back({spec.name, std::move(t)});
    } else {
      ck.pair.k.push_back({spec.name, t.detach()});
    }
  }
  if (offset * sizeof(float) != raw.size()) throw FormatError("checkpoint.bin has trailing bytes");
  return ck;
}

}  // namespace amimv
