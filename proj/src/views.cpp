#include "amimv/views.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "amimv/errors.hpp"

namespace amimv {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError("augment config: " + message);
}

void check_range(const Range& r, const char* name, double min_lo) {
  require(r.lo <= r.hi, std::string(name) + " range must satisfy lo <= hi");
  require(r.lo >= min_lo, std::string(name) + " range must be >= " + std::to_string(min_lo));
}

void check_probability(double p, const char* name) {
  require(p >= 0.0 && p <= 1.0, std::string(name) + " must lie in [0, 1]");
}

}  // namespace

void AugmentConfig::validate() const {
  check_probability(jitter_probability, "jitter_probability");
  check_probability(flip_probability, "flip_probability");
  check_probability(blur_probability, "blur_probability");
  require(jitter_brightness >= 0 && jitter_contrast >= 0 && jitter_saturation >= 0,
          "jitter magnitudes must be non-negative");
  require(jitter_hue >= 0 && jitter_hue <= 0.5, "jitter_hue must lie in [0, 0.5]");
  require(crop_output >= 1, "crop_output must be >= 1");
  check_range(crop_scale, "crop_scale", 0.0);
  require(crop_scale.hi <= 1.0 && crop_scale.hi > 0.0, "crop_scale upper bound must lie in (0, 1]");
  check_range(crop_aspect, "crop_aspect", 1e-9);
  require(blur_kernel % 2 == 1, "blur_kernel must be odd");
  check_range(blur_sigma, "blur_sigma", 1e-9);
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"jitter_brightness", c.jitter_brightness},
                     {"jitter_contrast", c.jitter_contrast},
                     {"jitter_saturation", c.jitter_saturation},
                     {"jitter_hue", c.jitter_hue},
                     {"jitter_probability", c.jitter_probability},
                     {"crop_output", c.crop_output},
                     {"crop_scale", {c.crop_scale.lo, c.crop_scale.hi}},
                     {"crop_aspect", {c.crop_aspect.lo, c.crop_aspect.hi}},
                     {"flip_probability", c.flip_probability},
                     {"blur_kernel", c.blur_kernel},
                     {"blur_sigma", {c.blur_sigma.lo, c.blur_sigma.hi}},
                     {"blur_probability", c.blur_probability},
                     {"standardize_augmented", c.standardize_augmented}};
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  if (!j.is_object()) throw ValidationError("augment config must be a JSON object");
  auto range = [](const nlohmann::json& v, const std::string& key) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
      throw ValidationError("augment config: " + key + " must be a [lo, hi] pair");
    return Range{v[0].get<double>(), v[1].get<double>()};
  };
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "jitter_brightness") c.jitter_brightness = v.get<double>();
      else if (key == "jitter_contrast") c.jitter_contrast = v.get<double>();
      else if (key == "jitter_saturation") c.jitter_saturation = v.get<double>();
      else if (key == "jitter_hue") c.jitter_hue = v.get<double>();
      else if (key == "jitter_probability") c.jitter_probability = v.get<double>();
      else if (key == "crop_output") c.crop_output = v.get<std::size_t>();
      else if (key == "crop_scale") c.crop_scale = range(v, key);
      else if (key == "crop_aspect") c.crop_aspect = range(v, key);
      else if (key == "flip_probability") c.flip_probability = v.get<double>();
      else if (key == "blur_kernel") c.blur_kernel = v.get<std::size_t>();
      else if (key == "blur_sigma") c.blur_sigma = range(v, key);
      else if (key == "blur_probability") c.blur_probability = v.get<double>();
      else if (key == "standardize_augmented") c.standardize_augmented = v.get<bool>();
      else throw ValidationError("unknown config key augment." + key);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("augment config: bad value for " + key);
    }
  }
  c.validate();
}

FloatImage to_float_image(const ImageRef& image) {
  FloatImage out{image.channels, image.height, image.width, {}};
  out.data.resize(image.channels * image.height * image.width);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c)
        out.at(c, y, x) = image.at(y, x, c) / 255.0;
  return out;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;
};

std::vector<Tap> bilinear_taps(std::size_t offset, std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {offset + i0, offset + i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

FloatImage resize_bilinear(const FloatImage& src, std::size_t top, std::size_t left, std::size_t crop_h,
                           std::size_t crop_w, std::size_t out_h, std::size_t out_w) {
  if (crop_h == 0 || crop_w == 0 || top + crop_h > src.height || left + crop_w > src.width)
    throw DimensionError("resize window out of bounds");
  const auto ty = bilinear_taps(top, crop_h, out_h);
  const auto tx = bilinear_taps(left, crop_w, out_w);
  FloatImage out{src.channels, out_h, out_w, std::vector<double>(src.channels * out_h * out_w)};
  for (std::size_t c = 0; c < src.channels; ++c)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        const double top_row = src.at(c, a.i0, b.i0) * (1.0 - b.w1) + src.at(c, a.i0, b.i1) * b.w1;
        const double bottom_row = src.at(c, a.i1, b.i0) * (1.0 - b.w1) + src.at(c, a.i1, b.i1) * b.w1;
        out.at(c, y, x) = top_row * (1.0 - a.w1) + bottom_row * a.w1;
      }
    }
  return out;
}

CropBox sample_crop(std::size_t height, std::size_t width, Range scale, Range aspect, RngStream& rng) {
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(aspect.lo), log_hi = std::log(aspect.hi);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale.lo, scale.hi);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<long>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<long>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && static_cast<std::size_t>(w) <= width && static_cast<std::size_t>(h) <= height) {
      const std::size_t top = rng.below(height - h + 1);
      const std::size_t left = rng.below(width - w + 1);
      return {top, left, static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
    }
  }
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  std::size_t w = width, h = height;
  if (in_ratio < aspect.lo) {
    h = std::max<std::size_t>(1, std::lround(static_cast<double>(w) / aspect.lo));
  } else if (in_ratio > aspect.hi) {
    w = std::max<std::size_t>(1, std::lround(static_cast<double>(h) * aspect.hi));
  }
  return {(height - h) / 2, (width - w) / 2, h, w};
}

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double luma(const FloatImage& img, std::size_t y, std::size_t x) {
  if (img.channels == 1) return img.at(0, y, x);
  return 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
}

}  // namespace

void adjust_brightness(FloatImage& img, double f) {
  for (auto& v : img.data) v = clamp01(v * f);
}

void adjust_contrast(FloatImage& img, double f) {
  double mean = 0.0;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) mean += luma(img, y, x);
  mean /= static_cast<double>(img.height * img.width);
  for (auto& v : img.data) v = clamp01(f * v + (1.0 - f) * mean);
}

void adjust_saturation(FloatImage& img, double f) {
  if (img.channels != 3) return;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double gray = luma(img, y, x);
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = clamp01(f * img.at(c, y, x) + (1.0 - f) * gray);
    }
}

void adjust_hue(FloatImage& img, double shift) {
  if (img.channels != 3) return;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
      const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
      const double delta = mx - mn;
      const double v = mx;
      const double s = mx > 0.0 ? delta / mx : 0.0;
      double h = 0.0;
      if (delta > 0.0) {
        if (mx == r) h = (g - b) / delta;
        else if (mx == g) h = 2.0 + (b - r) / delta;
        else h = 4.0 + (r - g) / delta;
        h /= 6.0;
      }
      h += shift;
      h -= std::floor(h);
      const double h6 = h * 6.0;
      const auto sector = static_cast<int>(std::floor(h6)) % 6;
      const double frac = h6 - std::floor(h6);
      const double p = v * (1.0 - s), q = v * (1.0 - s * frac), t = v * (1.0 - s * (1.0 - frac));
      double rgb[3];
      switch (sector) {
        case 0: rgb[0] = v, rgb[1] = t, rgb[2] = p; break;
        case 1: rgb[0] = q, rgb[1] = v, rgb[2] = p; break;
        case 2: rgb[0] = p, rgb[1] = v, rgb[2] = t; break;
        case 3: rgb[0] = p, rgb[1] = q, rgb[2] = v; break;
        case 4: rgb[0] = t, rgb[1] = p, rgb[2] = v; break;
        default: rgb[0] = v, rgb[1] = p, rgb[2] = q; break;
      }
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = clamp01(rgb[c]);
    }
}

void color_jitter(FloatImage& img, const AugmentConfig& config, RngStream& rng) {
  const bool apply = rng.bernoulli(config.jitter_probability);
  std::array<int, 4> order{0, 1, 2, 3};
  shuffle(order, rng);
  auto factor = [&](double v) { return rng.uniform(std::max(0.0, 1.0 - v), 1.0 + v); };
  const double fb = factor(config.jitter_brightness);
  const double fc = factor(config.jitter_contrast);
  const double fs = factor(config.jitter_saturation);
  const double fh = rng.uniform(-config.jitter_hue, config.jitter_hue);
  if (!apply) return;
  for (int op : order) {
    switch (op) {
      case 0: if (config.jitter_brightness > 0) adjust_brightness(img, fb); break;
      case 1: if (config.jitter_contrast > 0) adjust_contrast(img, fc); break;
      case 2: if (config.jitter_saturation > 0) adjust_saturation(img, fs); break;
      case 3: if (config.jitter_hue > 0) adjust_hue(img, fh); break;
    }
  }
}

void flip_horizontal(FloatImage& img) {
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y) {
      double* row = &img.at(c, y, 0);
      std::reverse(row, row + img.width);
    }
}

namespace {

std::vector<double> gaussian_weights_1d(double sigma, std::size_t k) {
  const long half = static_cast<long>(k / 2);
  std::vector<double> w(k);
  double total = 0.0;
  for (long i = -half; i <= half; ++i) {
    w[i + half] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    total += w[i + half];
  }
  for (auto& v : w) v /= total;
  return w;
}

std::size_t reflect(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n) - 2;
  i = ((i % period) + period) % period;
  return static_cast<std::size_t>(i < static_cast<long>(n) ? i : period - i);
}

}  // namespace

void gaussian_blur(FloatImage& img, double sigma, std::size_t k) {
  if (k % 2 == 0) throw ValidationError("blur kernel size must be odd, got " + std::to_string(k));
  const auto w = gaussian_weights_1d(sigma, k);
  const long half = static_cast<long>(k / 2);
  std::vector<double> tmp(img.height * img.width);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (long d = -half; d <= half; ++d)
          acc += w[d + half] * img.at(c, y, reflect(static_cast<long>(x) + d, img.width));
        tmp[y * img.width + x] = acc;
      }
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (long d = -half; d <= half; ++d)
          acc += w[d + half] * tmp[reflect(static_cast<long>(y) + d, img.height) * img.width + x];
        img.at(c, y, x) = acc;
      }
  }
}

void standardize(FloatImage& img, const ChannelStats& stats) {
  if (stats.mean.size() != img.channels || stats.std.size() != img.channels)
    throw DimensionError("channel statistics for " + std::to_string(stats.mean.size()) +
                         " channels applied to a " + std::to_string(img.channels) + "-channel image");
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      auto& v = img.data[c * plane + i];
      v = (v - stats.mean[c]) / stats.std[c];
    }
}

Tensor to_tensor(const FloatImage& img) {
  return Tensor::from_buffer(std::vector<float>(img.data.begin(), img.data.end()),
                             {img.channels, img.height, img.width});
}

Tensor gaussian_kernel(double sigma, std::size_t k) {
  if (k % 2 == 0) throw ValidationError("gaussian kernel size must be odd, got " + std::to_string(k));
  if (!(sigma > 0.0)) throw ValidationError("gaussian kernel sigma must be positive");
  const long half = static_cast<long>(k / 2);
  std::vector<double> w(k * k);
  double total = 0.0;
  for (long i = -half; i <= half; ++i)
    for (long j = -half; j <= half; ++j) {
      const double v = std::exp(-static_cast<double>(i * i + j * j) / (2.0 * sigma * sigma));
      w[(i + half) * k + (j + half)] = v;
      total += v;
    }
  for (auto& v : w) v /= total;
  return Tensor::from_buffer(std::move(w), {k, k});
}

namespace {

FloatImage normalized_image(const ImageRef& image, const ChannelStats& stats, std::size_t output_size) {
  FloatImage img = to_float_image(image);
  if (img.height != output_size || img.width != output_size)
    img = resize_bilinear(img, 0, 0, img.height, img.width, output_size, output_size);
  standardize(img, stats);
  return img;
}

FloatImage augmented_image(const ImageRef& image, const ChannelStats& stats, const AugmentConfig& config,
                           const RngStream& rng) {
  FloatImage img = to_float_image(image);

  RngStream jitter_rng = rng.substream({kJitter});
  color_jitter(img, config, jitter_rng);

  RngStream crop_rng = rng.substream({kCrop});
  const auto box = sample_crop(img.height, img.width, config.crop_scale, config.crop_aspect, crop_rng);
  img = resize_bilinear(img, box.top, box.left, box.height, box.width, config.crop_output, config.crop_output);

  RngStream flip_rng = rng.substream({kFlip});
  if (flip_rng.bernoulli(config.flip_probability)) flip_horizontal(img);

  RngStream blur_rng = rng.substream({kBlur});
  const bool blur = blur_rng.bernoulli(config.blur_probability);
  const double sigma = blur_rng.uniform(config.blur_sigma.lo, config.blur_sigma.hi);
  if (blur) gaussian_blur(img, sigma, config.blur_kernel);

  if (config.standardize_augmented) standardize(img, stats);
  return img;
}

Tensor stack(const std::vector<FloatImage>& images) {
  if (images.empty()) throw ValidationError("cannot stack an empty batch");
  const auto& first = images.front();
  std::vector<float> data;
  data.reserve(images.size() * first.data.size());
  for (const auto& img : images)
    for (double v : img.data) data.push_back(static_cast<float>(v));
  return Tensor::from_buffer(std::move(data), {images.size(), first.channels, first.height, first.width});
}

enum ViewRole : std::uint64_t { kAnchorAugment = 0, kCounterpartAugment = 1, kPairing = 0xA11 };

}  // namespace

Tensor normalize_view(const ImageRef& image, const ChannelStats& stats, std::size_t output_size) {
  return to_tensor(normalized_image(image, stats, output_size));
}

Tensor augment_view(const ImageRef& image, const ChannelStats& stats, const AugmentConfig& config,
                    const RngStream& rng) {
  return to_tensor(augmented_image(image, stats, config, rng));
}

std::vector<std::size_t> random_derangement(std::size_t n, RngStream& rng) {
  if (n < 2) throw ValidationError("a derangement needs at least 2 elements, got " + std::to_string(n));
  std::vector<std::size_t> p(n);
  for (;;) {
    std::iota(p.begin(), p.end(), std::size_t{0});
    shuffle(p, rng);
    bool fixed = false;
    for (std::size_t i = 0; i < n && !fixed; ++i) fixed = p[i] == i;
    if (!fixed) return p;
  }
}

AMIMVBatch build_amimv_batch(std::span<const ImageRef> images, const ChannelStats& stats,
                             const AugmentConfig& config, const RngStream& rng) {
  const std::size_t n = images.size();
  if (n < 2)
    throw ValidationError("an AMIMV batch needs at least 2 images to pair distinct counterparts, got " +
                          std::to_string(n));
  AMIMVBatch batch;
  RngStream pairing_rng = rng.substream({kPairing});
  batch.pairing = random_derangement(n, pairing_rng);

  std::vector<FloatImage> normalized, anchor_aug, counterpart_aug;
  normalized.reserve(n);
  for (std::size_t i = 0; i < n; ++i) normalized.push_back(normalized_image(images[i], stats, config.crop_output));
  for (std::size_t i = 0; i < n; ++i) {
    anchor_aug.push_back(augmented_image(images[i], stats, config, rng.substream({i, kAnchorAugment})));
    const std::size_t j = batch.pairing[i];
    counterpart_aug.push_back(augmented_image(images[j], stats, config, rng.substream({i, kCounterpartAugment})));
  }
  std::vector<FloatImage> counterpart_norm;
  counterpart_norm.reserve(n);
  for (std::size_t i = 0; i < n; ++i) counterpart_norm.push_back(normalized[batch.pairing[i]]);

  batch.v1n = stack(normalized);
  batch.v1a = stack(anchor_aug);
  batch.v2n = stack(counterpart_norm);
  batch.v2a = stack(counterpart_aug);
  return batch;
}

std::array<Tensor, 2> build_two_view_batch(std::span<const ImageRef> images, const ChannelStats& stats,
                                           const AugmentConfig& config, const RngStream& rng) {
  if (images.empty()) throw ValidationError("empty batch");
  std::vector<FloatImage> first, second;
  for (std::size_t i = 0; i < images.size(); ++i) {
    first.push_back(augmented_image(images[i], stats, config, rng.substream({i, kAnchorAugment})));
    second.push_back(augmented_image(images[i], stats, config, rng.substream({i, kCounterpartAugment})));
  }
  return {stack(first), stack(second)};
}

Tensor normalized_batch(std::span<const ImageRef> images, const ChannelStats& stats, std::size_t output_size) {
  std::vector<FloatImage> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(normalized_image(img, stats, output_size));
  return stack(out);
}

}  // namespace amimv
