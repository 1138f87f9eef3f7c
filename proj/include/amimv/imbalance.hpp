#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

#include "amimv/dataset.hpp"

namespace amimv {

enum class ImbalanceCategory { fairly_balanced, partially_imbalanced, imbalanced };

std::string_view category_code(ImbalanceCategory c);  // "FB", "PI", "I"
ImbalanceCategory parse_category(std::string_view code);

struct ImbalanceReport {
  double ir = 0.0;   // max / smallest nonzero count
  double cv = 0.0;   // sample std of counts / mean count
  double ne = 0.0;   // Shannon entropy / ln C
  double gi = 0.0;   // Gini coefficient of counts
  double rcr = 0.0;  // 100 * min / total
  std::size_t min_count = 0;
  std::size_t max_count = 0;
  std::size_t total = 0;
  std::size_t num_classes = 0;
  std::optional<ImbalanceCategory> category;
};

/// Throws ValidationError when fewer than two classes are nonzero.
ImbalanceReport imbalance_metrics(const LabelHistogram& hist);

struct CategoryThresholds {
  double imbalanced_ir = 7.0;
  double partial_ir = 4.0;
  double partial_rcr = 20.0;
  std::size_t partial_min_count = 2000;
  // Dataset name (lower case) -> category; takes precedence over the rule.
  std::map<std::string, ImbalanceCategory> overrides;

  /// Thresholds with the published MedMNIST 2D labels preloaded.
  static CategoryThresholds medmnist_defaults();
};

ImbalanceCategory categorize(const ImbalanceReport& report, const CategoryThresholds& thresholds,
                             std::string_view dataset_name = {});

std::string imbalance_csv_header();
/// One row: name, IR, CV, NE, GI, RCR (two decimals), category code.
std::string imbalance_csv_row(std::string_view name, const ImbalanceReport& report);
nlohmann::json imbalance_json(std::string_view name, const ImbalanceReport& report);

}  // namespace amimv
