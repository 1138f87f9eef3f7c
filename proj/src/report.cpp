#include "amimv/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "amimv/errors.hpp"

namespace amimv {

namespace {

// Categorical palette for class colours.
constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string header(double width, double height, const std::string& title) {
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"no\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << num(width) << "\" height=\""
     << num(height) << "\" viewBox=\"0 0 " << num(width) << ' ' << num(height) << "\">\n"
     << "<title>" << title << "</title>\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << num(width) << "\" height=\"" << num(height) << "\" fill=\"#ffffff\"/>\n";
  return os.str();
}

std::string text(double x, double y, const std::string& body, const std::string& extra = "") {
  std::ostringstream os;
  os << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-family=\"sans-serif\" font-size=\"11\""
     << (extra.empty() ? "" : " " + extra) << '>' << body << "</text>\n";
  return os.str();
}

const char* colour(std::int64_t label) {
  const auto n = static_cast<std::int64_t>(std::size(kPalette));
  return kPalette[((label % n) + n) % n];
}

}  // namespace

std::string per_class_svg(const std::vector<double>& acc) {
  if (acc.empty()) throw ValidationError("per-class chart needs at least one class");
  const double left = 50, top = 30, plot_h = 200, bar_w = 36, gap = 14;
  const double width = left + static_cast<double>(acc.size()) * (bar_w + gap) + 20, height = top + plot_h + 50;
  std::ostringstream os;
  os << header(width, height, "Per-class accuracy");
  os << text(left, 18, "Per-class accuracy", "font-weight=\"bold\"");
  for (int tick = 0; tick <= 4; ++tick) {
    const double y = top + plot_h * (1.0 - tick / 4.0);
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(y) << "\" x2=\"" << num(width - 10) << "\" y2=\"" << num(y)
       << "\" stroke=\"#dddddd\"/>\n";
    os << text(8, y + 4, num(tick / 4.0));
  }
  for (std::size_t c = 0; c < acc.size(); ++c) {
    const double v = std::isnan(acc[c]) ? 0.0 : std::clamp(acc[c], 0.0, 1.0);
    const double x = left + static_cast<double>(c) * (bar_w + gap) + gap / 2, h = plot_h * v;
    os << "<rect class=\"bar\" x=\"" << num(x) << "\" y=\"" << num(top + plot_h - h) << "\" width=\"" << num(bar_w)
       << "\" height=\"" << num(h) << "\" fill=\"" << colour(static_cast<std::int64_t>(c)) << "\"/>\n";
    os << text(x + 4, top + plot_h + 16, std::to_string(c));
    os << text(x, top + plot_h - h - 4, std::isnan(acc[c]) ? "n/a" : num(acc[c]));
  }
  os << text(left, height - 10, "class");
  os << "</svg>\n";
  return os.str();
}

std::string confusion_svg(const std::vector<std::vector<std::size_t>>& m) {
  const std::size_t c = m.size();
  if (c == 0) throw ValidationError("confusion chart needs at least one class");
  for (const auto& row : m)
    if (row.size() != c) throw ValidationError("confusion matrix must be square");
  std::size_t peak = 0;
  for (const auto& row : m) peak = std::max(peak, *std::max_element(row.begin(), row.end()));
  const double cell = 40, left = 60, top = 40;
  const double width = left + cell * static_cast<double>(c) + 20, height = top + cell * static_cast<double>(c) + 40;
  std::ostringstream os;
  os << header(width, height, "Confusion matrix");
  os << text(left, 18, "Confusion matrix (rows: truth, columns: prediction)", "font-weight=\"bold\"");
  for (std::size_t t = 0; t < c; ++t) {
    os << text(left - 20, top + cell * (static_cast<double>(t) + 0.5) + 4, std::to_string(t));
    os << text(left + cell * (static_cast<double>(t) + 0.4), top - 6, std::to_string(t));
    for (std::size_t p = 0; p < c; ++p) {
      const double share = peak ? static_cast<double>(m[t][p]) / static_cast<double>(peak) : 0.0;
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - 0.85 * share)));
      char fill[8];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      const double x = left + cell * static_cast<double>(p), y = top + cell * static_cast<double>(t);
      os << "<rect class=\"cell\" x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(cell)
         << "\" height=\"" << num(cell) << "\" fill=\"" << fill << "\" stroke=\"#ffffff\"/>\n";
      os << text(x + cell / 2, y + cell / 2 + 4, std::to_string(m[t][p]),
                 std::string("class=\"count\" text-anchor=\"middle\" fill=\"") +
                     (share > 0.6 ? "#ffffff" : "#000000") + "\"");
    }
  }
  os << "</svg>\n";
  return os.str();
}

std::string embedding_svg(const std::vector<EmbeddingPoint>& points) {
  if (points.empty()) throw ValidationError("embedding chart needs at least one point");
  double x0 = points[0].x, x1 = x0, y0 = points[0].y, y1 = y0;
  for (const auto& p : points) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const double span_x = x1 > x0 ? x1 - x0 : 1.0, span_y = y1 > y0 ? y1 - y0 : 1.0;
  const double size = 360, margin = 30;
  std::vector<std::int64_t> labels;
  for (const auto& p : points) labels.push_back(p.label);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  const double width = size + 2 * margin + 80, height = size + 2 * margin;
  std::ostringstream os;
  os << header(width, height, "PCA embedding");
  os << text(margin, 18, "Test features, first two principal components", "font-weight=\"bold\"");
  os << "<rect x=\"" << num(margin) << "\" y=\"" << num(margin) << "\" width=\"" << num(size) << "\" height=\""
     << num(size) << "\" fill=\"none\" stroke=\"#999999\"/>\n";
  for (const auto& p : points) {
    const double px = margin + size * (p.x - x0) / span_x;
    const double py = margin + size * (1.0 - (p.y - y0) / span_y);
    os << "<circle class=\"point\" cx=\"" << num(px) << "\" cy=\"" << num(py) << "\" r=\"2.5\" fill=\""
       << colour(p.label) << "\" fill-opacity=\"0.7\"/>\n";
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = margin + 14 * static_cast<double>(i) + 6;
    os << "<circle cx=\"" << num(size + margin + 16) << "\" cy=\"" << num(y) << "\" r=\"4\" fill=\""
       << colour(labels[i]) << "\"/>\n";
    os << text(size + margin + 26, y + 4, "class " + std::to_string(labels[i]));
  }
  os << "</svg>\n";
  return os.str();
}

std::string embedding_csv(const std::vector<EmbeddingPoint>& points) {
  std::string out = "x,y,label\n";
  char line[96];
  for (const auto& p : points) {
    std::snprintf(line, sizeof line, "%.9g,%.9g,%lld\n", p.x, p.y, static_cast<long long>(p.label));
    out += line;
  }
  return out;
}

std::vector<EmbeddingPoint> parse_embedding_csv(const std::string& text_in) {
  std::istringstream in(text_in);
  std::string line;
  if (!std::getline(in, line) || line != "x,y,label") throw FormatError("embedding.csv: missing header x,y,label");
  std::vector<EmbeddingPoint> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EmbeddingPoint p;
    long long label = 0;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lld%c", &p.x, &p.y, &label, &tail) != 3)
      throw FormatError("embedding.csv: bad row '" + line + "'");
    p.label = label;
    points.push_back(p);
  }
  return points;
}

}  // namespace amimv
