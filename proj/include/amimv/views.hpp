#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"

#include "amimv/dataset.hpp"
#include "amimv/rng.hpp"
#include "amimv/tensor.hpp"

namespace amimv {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugmentConfig {
  double jitter_brightness = 0.1;
  double jitter_contrast = 0.1;
  double jitter_saturation = 0.1;
  double jitter_hue = 0.01;
  double jitter_probability = 0.8;
  std::size_t crop_output = 64;
  Range crop_scale{0.2, 1.0};
  Range crop_aspect{3.0 / 4.0, 4.0 / 3.0};
  double flip_probability = 0.5;
  std::size_t blur_kernel = 3;
  Range blur_sigma{0.1, 1.0};
  double blur_probability = 1.0;
  bool standardize_augmented = true;

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, AugmentConfig& c);

// Substream keys for the stochastic transforms of one view.
enum TransformId : std::uint64_t { kJitter = 0, kCrop = 1, kFlip = 2, kBlur = 3 };

/// Planar image in double precision, values nominally in [0, 1].
struct FloatImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;  // [C, H, W]

  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
};

FloatImage to_float_image(const ImageRef& image);
/// Bilinear resample with half-pixel centres (align_corners = false) of the
/// window [top, top+crop_h) x [left, left+crop_w) to out_h x out_w.
FloatImage resize_bilinear(const FloatImage& src, std::size_t top, std::size_t left, std::size_t crop_h,
                           std::size_t crop_w, std::size_t out_h, std::size_t out_w);

struct CropBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};
/// Ten rejection attempts at a scale/aspect window, then a centre crop.
CropBox sample_crop(std::size_t height, std::size_t width, Range scale, Range aspect, RngStream& rng);

void adjust_brightness(FloatImage& img, double factor);
/// Blends toward the mean luma of the whole image.
void adjust_contrast(FloatImage& img, double factor);
/// Blends toward per-pixel luma; no-op for one channel.
void adjust_saturation(FloatImage& img, double factor);
/// Rotates hue by `turns` through HSV; no-op for one channel.
void adjust_hue(FloatImage& img, double turns);
/// Applies the four adjustments in a random order with probability
/// jitter_probability. Zero magnitudes skip their adjustment.
void color_jitter(FloatImage& img, const AugmentConfig& config, RngStream& rng);
void flip_horizontal(FloatImage& img);
/// Separable blur with reflect padding.
void gaussian_blur(FloatImage& img, double sigma, std::size_t k);
void standardize(FloatImage& img, const ChannelStats& stats);
Tensor to_tensor(const FloatImage& img);

/// k x k float64 weights summing to 1. Even k is a ValidationError.
Tensor gaussian_kernel(double sigma, std::size_t k);

/// Deterministic view: rescale, resize to output_size, z-score per channel.
Tensor normalize_view(const ImageRef& image, const ChannelStats& stats, std::size_t output_size);

/// Jitter, crop-resize, flip, blur, then (optionally) z-score. Each transform
/// draws from rng.substream({TransformId}).
Tensor augment_view(const ImageRef& image, const ChannelStats& stats, const AugmentConfig& config,
                    const RngStream& rng);

struct AMIMVBatch {
  Tensor v1n, v1a, v2n, v2a;       // [N, C, S, S]
  std::vector<std::size_t> pairing;  // anchor i -> counterpart pairing[i]
};

/// Uniform over permutations with no fixed points (rejection sampling).
std::vector<std::size_t> random_derangement(std::size_t n, RngStream& rng);

/// rng is the batch-level stream; item views use substreams keyed by
/// (item, role) so results do not depend on evaluation order.
AMIMVBatch build_amimv_batch(std::span<const ImageRef> images, const ChannelStats& stats,
                             const AugmentConfig& config, const RngStream& rng);

/// Two independent augmentations of each image, for the single-image baseline.
std::array<Tensor, 2> build_two_view_batch(std::span<const ImageRef> images, const ChannelStats& stats,
                                           const AugmentConfig& config, const RngStream& rng);

/// Stacks normalize_view outputs into [N, C, S, S].
Tensor normalized_batch(std::span<const ImageRef> images, const ChannelStats& stats, std::size_t output_size);

}  // namespace amimv
