#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "amimv/dataset.hpp"
#include "amimv/model.hpp"
#include "amimv/tensor.hpp"

namespace amimv {

struct FeatureSet {
  Tensor features;                   // [N, D] float64
  std::vector<std::int64_t> labels;  // [N]
};

/// Pre-projector features of the query encoder on normalized views. An empty
/// split or a channel mismatch is a ValidationError.
FeatureSet extract_features(const EncoderPair& pair, const ImageDataset& dataset, Split split,
                            std::size_t view_size, std::size_t chunk = 256);

struct ProbeConfig {
  double lr = 0.005;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double weight_decay = 0.01;
  // Optional z-scoring of features with train statistics; off by default so
  // the probe is a plain linear layer on the frozen features.
  bool standardize = false;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

struct LinearProbe {
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;
  Tensor weight;  // [D, C] float64
  Tensor bias;    // [C]
  std::vector<std::string> warnings;

  std::size_t num_classes() const { return bias.numel(); }
  /// Logits [N, C].
  Tensor scores(const Tensor& features) const;
};

/// Softmax regression trained with AdamW on a cosine schedule without warmup.
/// Classes absent from the labels still get a weight column, trained only as
/// negatives, and are listed in warnings.
LinearProbe linear_probe(const Tensor& features, std::span<const std::int64_t> labels, std::size_t num_classes,
                         const ProbeConfig& config);

struct EvalReport {
  std::size_t num_classes = 0;
  std::size_t num_samples = 0;
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;  // NaN for classes with no samples
  std::vector<double> per_class_auc;       // NaN for classes with no samples
  double macro_auc = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
};

/// One-vs-rest rank AUC with half credit for ties. Needs both a positive and
/// a negative sample, otherwise ValidationError.
double roc_auc(std::span<const double> scores, std::span<const bool> positive);

/// Argmax predictions (ties to the lowest index), accuracy, per-class
/// accuracy, AUC macro-averaged over classes present in labels, confusion.
EvalReport classification_metrics(const Tensor& scores, std::span<const std::int64_t> labels);

struct AlignmentUniformity {
  double alignment = 0.0;
  double uniformity = 0.0;
};

/// log mean over distinct unordered row pairs of exp(-2 |zi - zj|^2), rows
/// L2-normalized first. Fewer than two rows is a ValidationError.
double uniformity(const Tensor& z);

/// Rows of left and right are positive pairs. Alignment is the mean squared
/// distance of normalized pairs; uniformity is taken over the union of both
/// sides. Fewer than two pairs is a ValidationError.
AlignmentUniformity alignment_uniformity(const Tensor& left, const Tensor& right);

struct PcaResult {
  std::vector<double> coords;                   // [N, k] row-major
  std::vector<std::vector<double>> components;  // k unit vectors of length D
  std::vector<double> explained_variance;
  std::vector<double> explained_ratio;
};

/// Projection of mean-centred rows onto the top-k principal directions. Each
/// component's largest-magnitude entry is made positive.
PcaResult pca_project(const Tensor& features, std::size_t k = 2);

/// Header "scope,class,count,accuracy,auc"; one overall row then one per class.
std::string eval_csv(const EvalReport& report);
nlohmann::json eval_json(const EvalReport& report);
EvalReport eval_from_json(const nlohmann::json& j);
std::string confusion_csv(const EvalReport& report);
std::vector<std::vector<std::size_t>> parse_confusion_csv(const std::string& text);

}  // namespace amimv
