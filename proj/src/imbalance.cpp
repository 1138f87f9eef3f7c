#include "amimv/imbalance.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <vector>

#include "amimv/errors.hpp"

namespace amimv {

std::string_view category_code(ImbalanceCategory c) {
  switch (c) {
    case ImbalanceCategory::fairly_balanced: return "FB";
    case ImbalanceCategory::partially_imbalanced: return "PI";
    case ImbalanceCategory::imbalanced: return "I";
  }
  return "?";
}

ImbalanceCategory parse_category(std::string_view code) {
  if (code == "FB") return ImbalanceCategory::fairly_balanced;
  if (code == "PI") return ImbalanceCategory::partially_imbalanced;
  if (code == "I") return ImbalanceCategory::imbalanced;
  throw ValidationError("unknown imbalance category '" + std::string(code) + "'");
}

ImbalanceReport imbalance_metrics(const LabelHistogram& hist) {
  if (hist.nonzero_classes() < 2)
    throw ValidationError("imbalance metrics need at least 2 classes with nonzero counts, got " +
                          std::to_string(hist.nonzero_classes()));
  const auto& x = hist.counts;
  const std::size_t c = x.size();
  const double total = static_cast<double>(hist.total());

  ImbalanceReport r;
  r.num_classes = c;
  r.total = hist.total();
  r.max_count = *std::max_element(x.begin(), x.end());
  r.min_count = r.max_count;
  for (auto v : x)
    if (v > 0) r.min_count = std::min(r.min_count, v);

  r.ir = static_cast<double>(r.max_count) / static_cast<double>(r.min_count);

  const double mean = total / static_cast<double>(c);
  double ss = 0.0;
  for (auto v : x) ss += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  r.cv = std::sqrt(ss / static_cast<double>(c - 1)) / mean;

  double h = 0.0;
  for (auto v : x) {
    if (v == 0) continue;
    const double p = static_cast<double>(v) / total;
    h -= p * std::log(p);
  }
  r.ne = h / std::log(static_cast<double>(c));

  std::vector<std::size_t> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  double weighted = 0.0;
  for (std::size_t i = 0; i < c; ++i) weighted += static_cast<double>(i + 1) * static_cast<double>(sorted[i]);
  const double cd = static_cast<double>(c);
  r.gi = 2.0 * weighted / (cd * total) - (cd + 1.0) / cd;
  r.gi = std::max(r.gi, 0.0);  // rounding noise on perfectly uniform counts

  r.rcr = 100.0 * static_cast<double>(r.min_count) / total;
  return r;
}

CategoryThresholds CategoryThresholds::medmnist_defaults() {
  using enum ImbalanceCategory;
  CategoryThresholds t;
  t.overrides = {
      {"pathmnist", fairly_balanced},       {"bloodmnist", fairly_balanced},
      {"octmnist", fairly_balanced},        {"breastmnist", partially_imbalanced},
      {"pneumoniamnist", partially_imbalanced}, {"organamnist", partially_imbalanced},
      {"organcmnist", partially_imbalanced},    {"organsmnist", partially_imbalanced},
      {"retinamnist", imbalanced},          {"tissuemnist", imbalanced},
      {"dermamnist", imbalanced},
  };
  return t;
}

ImbalanceCategory categorize(const ImbalanceReport& r, const CategoryThresholds& t,
                             std::string_view dataset_name) {
  if (!dataset_name.empty()) {
    std::string key(dataset_name);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return std::tolower(ch); });
    // accept file stems such as "dermamnist_64"
    for (const auto& [name, cat] : t.overrides)
      if (key == name || key.starts_with(name + "_")) return cat;
  }
  if (r.ir >= t.imbalanced_ir) return ImbalanceCategory::imbalanced;
  const bool few_rare = r.min_count < t.partial_min_count;
  if ((r.rcr >= t.partial_rcr && few_rare) || (r.ir >= t.partial_ir) || few_rare)
    return ImbalanceCategory::partially_imbalanced;
  return ImbalanceCategory::fairly_balanced;
}

std::string imbalance_csv_header() { return "dataset,IR,CV,NE,GI,RCR,category"; }

std::string imbalance_csv_row(std::string_view name, const ImbalanceReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, ",%.2f,%.2f,%.2f,%.2f,%.2f,", r.ir, r.cv, r.ne, r.gi, r.rcr);
  std::string row(name);
  row += buf;
  if (r.category) row += category_code(*r.category);
  return row;
}

nlohmann::json imbalance_json(std::string_view name, const ImbalanceReport& r) {
  nlohmann::json j{{"dataset", name},       {"ir", r.ir},
                   {"cv", r.cv},            {"ne", r.ne},
                   {"gi", r.gi},            {"rcr", r.rcr},
                   {"min_count", r.min_count}, {"max_count", r.max_count},
                   {"total", r.total},      {"num_classes", r.num_classes}};
  j["category"] = r.category ? nlohmann::json(category_code(*r.category)) : nlohmann::json(nullptr);
  return j;
}

}  // namespace amimv
