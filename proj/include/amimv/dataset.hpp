#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace amimv {

enum class Split { train = 0, val = 1, test = 2 };

inline constexpr std::array<Split, 3> kAllSplits{Split::train, Split::val, Split::test};

std::string_view split_name(Split split);
/// Throws ValidationError for anything but "train", "val", "test".
Split parse_split(std::string_view name);

/// Non-owning view of one image in height-width-channel byte order.
struct ImageRef {
  std::span<const std::uint8_t> pixels;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

struct ImageSplit {
  std::vector<std::uint8_t> pixels;  // [N, H, W, C]
  std::vector<std::int64_t> labels;  // [N]

  std::size_t size() const { return labels.size(); }
};

/// Per-channel mean and population std on the [0, 1] pixel scale.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct ImageDataset {
  std::string name;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::size_t num_classes = 0;
  std::array<ImageSplit, 3> splits;
  std::optional<ChannelStats> channel_stats;
  // NPY dtype the labels were read with, reused on save.
  std::string label_descr = "<i8";

  const ImageSplit& split(Split s) const { return splits[static_cast<int>(s)]; }
  ImageSplit& split(Split s) { return splits[static_cast<int>(s)]; }
  std::size_t image_bytes() const { return height * width * channels; }
  ImageRef image(Split s, std::size_t index) const;
};

struct LabelHistogram {
  std::vector<std::size_t> counts;

  std::size_t total() const;
  std::size_t nonzero_classes() const;
};

/// Loads a MedMNIST-style archive with members train_images, train_labels,
/// val_images, val_labels, test_images, test_labels. Labels of shape [N, 1]
/// are flattened; num_classes is one past the largest label.
ImageDataset load_npz(const std::filesystem::path& path);
void save_npz(const ImageDataset& dataset, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_dataset(const ImageDataset& dataset);

/// Checks label ranges, split geometry, and that at least two classes occur.
void validate(const ImageDataset& dataset);

/// Train-split statistics; std is floored at 1e-6.
ChannelStats compute_channel_stats(const ImageDataset& dataset);

LabelHistogram label_histogram(const ImageDataset& dataset, Split split);
LabelHistogram label_histogram(const ImageDataset& dataset, std::string_view split);

struct SyntheticSpec {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;  // per class, before splitting
  std::size_t image_size = 28;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
};

/// Renders each class as a noisy Gaussian blob with class-specific geometry.
/// Every class is split floor(0.7 n) / floor(0.1 n) / remainder into
/// train / val / test. Deterministic in the seed.
ImageDataset make_synthetic_longtail(const SyntheticSpec& spec);

/// Parses "synthetic:C=4,counts=700:70:70:70,size=28[,channels=1][,seed=0]".
SyntheticSpec parse_synthetic_spec(std::string_view text);
bool is_synthetic_spec(std::string_view text);

/// A synthetic spec string or a path to an .npz archive.
ImageDataset open_dataset(std::string_view source);

}  // namespace amimv
