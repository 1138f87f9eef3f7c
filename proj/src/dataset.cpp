#include "amimv/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numbers>

#include "amimv/errors.hpp"
#include "amimv/fsutil.hpp"
#include "amimv/npz.hpp"
#include "amimv/rng.hpp"

namespace amimv {

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  for (auto s : kAllSplits)
    if (split_name(s) == name) return s;
  throw ValidationError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

ImageRef ImageDataset::image(Split s, std::size_t index) const {
  const auto& sp = split(s);
  if (index >= sp.size())
    throw ValidationError("image index " + std::to_string(index) + " out of range for split " +
                          std::string(split_name(s)));
  const std::size_t bytes = image_bytes();
  return ImageRef{std::span(sp.pixels).subspan(index * bytes, bytes), height, width, channels};
}

std::size_t LabelHistogram::total() const {
  std::size_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

std::size_t LabelHistogram::nonzero_classes() const {
  return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
}

namespace {

std::vector<std::int64_t> decode_labels(const npz::NpyArray& a, const std::string& member) {
  if (!(a.shape.size() == 1 || (a.shape.size() == 2 && a.shape[1] == 1)))
    throw FormatError(member + ": expected labels of shape [N] or [N,1], got " +
                      shape_string(a.shape));
  const std::size_t n = a.shape[0];
  std::vector<std::int64_t> labels(n);
  if (a.descr == "|u1" || a.descr == "<u1") {
    for (std::size_t i = 0; i < n; ++i) labels[i] = a.payload[i];
  } else if (a.descr == "<i8") {
    std::memcpy(labels.data(), a.payload.data(), n * sizeof(std::int64_t));
  } else {
    throw FormatError(member + ": unsupported label dtype '" + a.descr + "'");
  }
  return labels;
}

npz::NpyArray encode_labels(const std::vector<std::int64_t>& labels, const std::string& descr) {
  npz::NpyArray a;
  a.descr = descr;
  a.shape = {labels.size(), 1};
  if (descr == "|u1" || descr == "<u1") {
    a.payload.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) a.payload[i] = static_cast<std::uint8_t>(labels[i]);
  } else {
    a.descr = "<i8";
    a.payload.resize(labels.size() * sizeof(std::int64_t));
    std::memcpy(a.payload.data(), labels.data(), a.payload.size());
  }
  return a;
}

}  // namespace

void validate(const ImageDataset& ds) {
  if (ds.num_classes < 2)
    throw ValidationError("dataset " + ds.name + " has " + std::to_string(ds.num_classes) +
                          " class(es); at least 2 are required");
  std::vector<bool> present(ds.num_classes, false);
  for (auto s : kAllSplits) {
    const auto& sp = ds.split(s);
    if (sp.pixels.size() != sp.size() * ds.image_bytes())
      throw ValidationError(std::string(split_name(s)) + " split pixel count does not match " +
                            std::to_string(sp.size()) + " images");
    for (auto l : sp.labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= ds.num_classes)
        throw ValidationError("label " + std::to_string(l) + " out of range [0, " +
                              std::to_string(ds.num_classes) + ") in split " +
                              std::string(split_name(s)));
      present[l] = true;
    }
  }
  if (std::count(present.begin(), present.end(), true) < 2)
    throw ValidationError("dataset " + ds.name + " contains fewer than 2 distinct classes");
}

ImageDataset load_npz(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("dataset file not found: " + path.string());
  const auto archive = npz::read_npz(path);
  ImageDataset ds;
  ds.name = path.stem().string();
  bool geometry_known = false;
  std::int64_t max_label = -1;
  for (auto s : kAllSplits) {
    const std::string images_key = std::string(split_name(s)) + "_images";
    const std::string labels_key = std::string(split_name(s)) + "_labels";
    for (const auto& key : {images_key, labels_key})
      if (!archive.count(key)) throw FormatError("missing member " + key);
    const auto& img = archive.at(images_key);
    if (img.descr != "|u1" && img.descr != "<u1")
      throw FormatError(images_key + ": unsupported image dtype '" + img.descr + "'");
    if (img.shape.size() != 3 && !(img.shape.size() == 4 && img.shape[3] == 3))
      throw FormatError(images_key + ": expected [N,H,W] or [N,H,W,3], got " + shape_string(img.shape));
    const std::size_t h = img.shape[1], w = img.shape[2], c = img.shape.size() == 4 ? 3 : 1;
    if (!geometry_known) {
      ds.height = h, ds.width = w, ds.channels = c;
      geometry_known = true;
    } else if (h != ds.height || w != ds.width || c != ds.channels) {
      throw ValidationError(images_key + ": geometry " + shape_string(img.shape) +
                            " differs from the other splits");
    }
    auto& sp = ds.split(s);
    sp.pixels = img.payload;
    sp.labels = decode_labels(archive.at(labels_key), labels_key);
    if (sp.labels.size() != img.shape[0])
      throw ValidationError(labels_key + " has " + std::to_string(sp.labels.size()) +
                            " entries for " + std::to_string(img.shape[0]) + " images");
    if (s == Split::train) ds.label_descr = archive.at(labels_key).descr;
    for (auto l : sp.labels) {
      if (l < 0) throw ValidationError(labels_key + ": negative label " + std::to_string(l));
      max_label = std::max(max_label, l);
    }
  }
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  validate(ds);
  return ds;
}

std::vector<std::uint8_t> serialize_dataset(const ImageDataset& ds) {
  npz::Archive archive;
  std::vector<std::string> order;
  for (auto s : kAllSplits) {
    const auto& sp = ds.split(s);
    npz::NpyArray img;
    img.descr = "|u1";
    img.shape = {sp.size(), ds.height, ds.width};
    if (ds.channels != 1) img.shape.push_back(ds.channels);
    img.payload = sp.pixels;
    const std::string base(split_name(s));
    archive[base + "_images"] = std::move(img);
    archive[base + "_labels"] = encode_labels(sp.labels, ds.label_descr);
    order.push_back(base + "_images");
    order.push_back(base + "_labels");
  }
  return npz::serialize_npz(archive, order);
}

void save_npz(const ImageDataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_dataset(ds));
}

ChannelStats compute_channel_stats(const ImageDataset& ds) {
  const auto& train = ds.split(Split::train);
  if (train.size() == 0) throw ValidationError("cannot compute channel statistics: empty train split");
  const std::size_t c = ds.channels;
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  for (std::size_t i = 0; i < train.pixels.size(); ++i) {
    const double v = train.pixels[i] / 255.0;
    sum[i % c] += v;
    sq[i % c] += v * v;
  }
  const double n = static_cast<double>(train.pixels.size() / c);
  ChannelStats stats;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mu = sum[ch] / n;
    const double var = std::max(sq[ch] / n - mu * mu, 0.0);
    stats.mean.push_back(mu);
    stats.std.push_back(std::max(std::sqrt(var), 1e-6));
  }
  return stats;
}

LabelHistogram label_histogram(const ImageDataset& ds, Split split) {
  LabelHistogram h;
  h.counts.assign(ds.num_classes, 0);
  for (auto l : ds.split(split).labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= ds.num_classes)
      throw ValidationError("label " + std::to_string(l) + " out of range");
    ++h.counts[l];
  }
  return h;
}

LabelHistogram label_histogram(const ImageDataset& ds, std::string_view split) {
  return label_histogram(ds, parse_split(split));
}

namespace {

// Texture family of a class; classes beyond the family count reuse a family
// at a coarser period.
constexpr std::size_t kTextureFamilies = 6;

// Zero-mean pattern value at pixel (x, y) for a unit-amplitude texture with
// the given period and phases.
double texture_value(std::size_t family, double x, double y, double period, double px, double py) {
  const double w = 2.0 * std::numbers::pi / period;
  const double cx = std::cos(w * x + px), cy = std::cos(w * y + py);
  const double blob = 0.25 * (1 + cx) * (1 + cy);
  switch (family) {
    case 0: return cy;                        // horizontal stripes
    case 1: return cx * cy;                   // checker
    case 2: return 2.0 * blob * blob - 0.5;   // bright dots
    case 3: return 0.5 - 2.0 * blob * blob;   // dark holes
    case 4: return cx;                        // vertical stripes
    default: return std::max(cx, cy);         // grid lines
  }
}

// Class evidence is spread over the whole image so any crop keeps it; per-image
// nuisance is period, phase, tilt, amplitude, background level and tint.
void render_texture(std::uint8_t* out, std::size_t size, std::size_t channels, std::size_t cls, RngStream& rng) {
  const double s = static_cast<double>(size);
  const std::size_t family = cls % kTextureFamilies;
  const double coarse = 1.0 + 0.5 * static_cast<double>(cls / kTextureFamilies);
  const double period = rng.uniform(0.18, 0.3) * s * coarse;
  const double px = rng.uniform(0.0, 2.0 * std::numbers::pi), py = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double tilt = rng.uniform(-0.2, 0.2);
  const double ct = std::cos(tilt), st = std::sin(tilt);
  const double amplitude = rng.uniform(0.1, 0.35);
  const double background = rng.uniform(0.2, 0.8);
  const double noise = 0.02;
  std::vector<double> tint(channels, 1.0);
  for (auto& t : tint) t = rng.uniform(0.8, 1.0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double u = ct * fx - st * fy, v = st * fx + ct * fy;
      const double fg = amplitude * texture_value(family, u, v, period, px, py);
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double val = background + fg * tint[ch] + noise * rng.normal();
        out[(y * size + x) * channels + ch] =
            static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
      }
    }
}

}  // namespace

ImageDataset make_synthetic_longtail(const SyntheticSpec& spec) {
  if (spec.counts.size() != spec.num_classes)
    throw ValidationError("synthetic: " + std::to_string(spec.counts.size()) + " counts given for " +
                          std::to_string(spec.num_classes) + " classes");
  if (spec.num_classes < 2) throw ValidationError("synthetic: at least 2 classes are required");
  if (spec.image_size < 8) throw ValidationError("synthetic: image size must be at least 8");
  if (spec.channels != 1 && spec.channels != 3) throw ValidationError("synthetic: channels must be 1 or 3");
  for (auto n : spec.counts)
    if (n < 1) throw ValidationError("synthetic: every class needs at least one image");

  ImageDataset ds;
  ds.name = "synthetic";
  ds.height = ds.width = spec.image_size;
  ds.channels = spec.channels;
  ds.num_classes = spec.num_classes;
  const std::size_t bytes = ds.image_bytes();
  const RngStream root(spec.seed);

  for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
    const std::size_t n = spec.counts[cls];
    const std::size_t n_train = n * 7 / 10, n_val = n / 10;
    for (std::size_t i = 0; i < n; ++i) {
      const Split s = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
      auto& sp = ds.split(s);
      sp.pixels.resize(sp.pixels.size() + bytes);
      RngStream rng = root.substream({cls, i});
      render_texture(sp.pixels.data() + sp.pixels.size() - bytes, spec.image_size, spec.channels, cls, rng);
      sp.labels.push_back(static_cast<std::int64_t>(cls));
    }
  }
  // interleave classes within each split
  for (auto s : kAllSplits) {
    auto& sp = ds.split(s);
    std::vector<std::size_t> order(sp.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream rng = root.substream({0xFFFFu, static_cast<std::uint64_t>(s)});
    shuffle(order, rng);
    ImageSplit shuffled;
    shuffled.pixels.resize(sp.pixels.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
      std::copy_n(sp.pixels.data() + order[i] * bytes, bytes, shuffled.pixels.data() + i * bytes);
      shuffled.labels.push_back(sp.labels[order[i]]);
    }
    sp = std::move(shuffled);
  }
  return ds;
}

bool is_synthetic_spec(std::string_view text) { return text.starts_with("synthetic:"); }

SyntheticSpec parse_synthetic_spec(std::string_view text) {
  if (!is_synthetic_spec(text)) throw ValidationError("not a synthetic spec: " + std::string(text));
  std::string body(text.substr(std::string_view("synthetic:").size()));
  SyntheticSpec spec;
  bool have_c = false;
  auto parse_uint = [&](const std::string& key, const std::string& v) -> std::uint64_t {
    if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char ch) { return std::isdigit(ch); }))
      throw ValidationError("synthetic: bad value '" + v + "' for " + key);
    return std::stoull(v);
  };
  std::size_t start = 0;
  while (start <= body.size()) {
    auto comma = body.find(',', start);
    std::string item = body.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    start = comma == std::string::npos ? body.size() + 1 : comma + 1;
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string::npos) throw ValidationError("synthetic: expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "C") {
      spec.num_classes = parse_uint(key, value);
      have_c = true;
    } else if (key == "counts") {
      std::size_t s = 0;
      while (s <= value.size()) {
        auto colon = value.find(':', s);
        spec.counts.push_back(parse_uint(key, value.substr(s, colon == std::string::npos ? std::string::npos : colon - s)));
        s = colon == std::string::npos ? value.size() + 1 : colon + 1;
      }
    } else if (key == "size") {
      spec.image_size = parse_uint(key, value);
    } else if (key == "channels") {
      spec.channels = parse_uint(key, value);
    } else if (key == "seed") {
      spec.seed = parse_uint(key, value);
    } else {
      throw ValidationError("synthetic: unknown key '" + key + "'");
    }
  }
  if (!have_c) spec.num_classes = spec.counts.size();
  return spec;
}

ImageDataset open_dataset(std::string_view source) {
  if (is_synthetic_spec(source)) return make_synthetic_longtail(parse_synthetic_spec(source));
  return load_npz(std::filesystem::path(std::string(source)));
}

}  // namespace amimv
