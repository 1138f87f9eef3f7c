#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "amimv/eval.hpp"

namespace amimv {

struct EmbeddingPoint {
  double x = 0.0;
  double y = 0.0;
  std::int64_t label = 0;
};

/// Standalone SVG 1.1 documents. Bars carry class="bar", heatmap cells
/// class="cell" with a class="count" text each, scatter points class="point".
std::string per_class_svg(const std::vector<double>& per_class_accuracy);
std::string confusion_svg(const std::vector<std::vector<std::size_t>>& confusion);
std::string embedding_svg(const std::vector<EmbeddingPoint>& points);

/// Header "x,y,label".
std::string embedding_csv(const std::vector<EmbeddingPoint>& points);
std::vector<EmbeddingPoint> parse_embedding_csv(const std::string& text);

}  // namespace amimv
