#include "amimv/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "amimv/errors.hpp"
#include "amimv/ops.hpp"
#include "amimv/optim.hpp"
#include "amimv/rng.hpp"
#include "amimv/tape.hpp"
#include "amimv/views.hpp"

namespace amimv {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMatrix to_matrix(const Tensor& t) {
  if (t.dim() != 2) throw DimensionError("expected a 2-D tensor, got " + shape_string(t.shape()));
  const auto v = t.values();
  return Eigen::Map<const RowMatrix>(v.data(), static_cast<Eigen::Index>(t.size(0)),
                                     static_cast<Eigen::Index>(t.size(1)));
}

Tensor from_matrix(const RowMatrix& m) {
  std::vector<double> v(m.data(), m.data() + m.size());
  return Tensor::from_buffer(std::move(v), {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
}

RowMatrix normalize_rows(RowMatrix m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) /= std::max(m.row(i).norm(), 1e-12);
  return m;
}

}  // namespace

FeatureSet extract_features(const EncoderPair& pair, const ImageDataset& dataset, Split split,
                            std::size_t view_size, std::size_t chunk) {
  const auto& part = dataset.split(split);
  if (part.size() == 0)
    throw ValidationError("dataset " + dataset.name + " has no " + std::string(split_name(split)) + " images");
  if (pair.config.input_channels != dataset.channels)
    throw ValidationError("encoder expects " + std::to_string(pair.config.input_channels) +
                          " input channels but dataset has " + std::to_string(dataset.channels));
  if (chunk == 0) throw ValidationError("feature extraction chunk must be positive");
  const ChannelStats stats = dataset.channel_stats.value_or(compute_channel_stats(dataset));

  NoGradGuard no_grad;
  std::vector<double> flat;
  std::size_t dim = 0;
  for (std::size_t begin = 0; begin < part.size(); begin += chunk) {
    const std::size_t end = std::min(part.size(), begin + chunk);
    std::vector<ImageRef> refs;
    for (std::size_t i = begin; i < end; ++i) refs.push_back(dataset.image(split, i));
    const auto out = encode(pair.config, pair.q, normalized_batch(refs, stats, view_size));
    dim = out.features.size(1);
    const auto v = out.features.values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return {Tensor::from_buffer(std::move(flat), {part.size(), dim}), part.labels};
}

void ProbeConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("probe.lr must be positive");
  if (epochs == 0) throw ValidationError("probe.epochs must be positive");
  if (batch_size == 0) throw ValidationError("probe.batch_size must be positive");
  if (!(weight_decay >= 0.0)) throw ValidationError("probe.weight_decay must be non-negative");
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"weight_decay", c.weight_decay},
                     {"standardize", c.standardize},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  if (!j.is_object()) throw ValidationError("probe config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "standardize") c.standardize = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ValidationError("unknown config key probe." + key);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("probe config: bad value for " + key);
    }
  }
  c.validate();
}

Tensor LinearProbe::scores(const Tensor& features) const {
  RowMatrix x = to_matrix(features);
  if (static_cast<std::size_t>(x.cols()) != feature_mean.size())
    throw DimensionError("probe expects " + std::to_string(feature_mean.size()) + " features, got " +
                         std::to_string(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    x.col(j) = (x.col(j).array() - feature_mean[j]) / feature_scale[j];
  const RowMatrix w = to_matrix(weight);
  const auto b = bias.values();
  RowMatrix logits = x * w;
  for (Eigen::Index c = 0; c < logits.cols(); ++c) logits.col(c).array() += b[c];
  return from_matrix(logits);
}

LinearProbe linear_probe(const Tensor& features, std::span<const std::int64_t> labels, std::size_t num_classes,
                         const ProbeConfig& config) {
  config.validate();
  if (features.dim() != 2 || features.size(0) != labels.size())
    throw DimensionError("probe features " + shape_string(features.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw ValidationError("linear probe needs at least one training sample");
  if (num_classes < 2) throw ValidationError("linear probe needs at least two classes");
  const std::size_t n = labels.size(), d = features.size(1);

  LinearProbe probe;
  std::vector<std::size_t> seen(num_classes, 0);
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw ValidationError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    ++seen[y];
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    if (seen[c] == 0) probe.warnings.push_back("class " + std::to_string(c) + " absent from probe training data");

  RowMatrix x = to_matrix(features);
  probe.feature_mean.assign(d, 0.0);
  probe.feature_scale.assign(d, 1.0);
  if (config.standardize) {
    for (std::size_t j = 0; j < d; ++j) {
      const double mu = x.col(j).mean();
      const double var = (x.col(j).array() - mu).square().mean();
      probe.feature_mean[j] = mu;
      probe.feature_scale[j] = std::max(std::sqrt(var), 1e-6);
      x.col(j) = (x.col(j).array() - mu) / probe.feature_scale[j];
    }
  }
  const Tensor xs = from_matrix(x);
  std::vector<double> onehot_all(n * num_classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) onehot_all[i * num_classes + labels[i]] = 1.0;
  const Tensor onehot = Tensor::from_buffer(std::move(onehot_all), {n, num_classes});

  probe.weight = Tensor::zeros({d, num_classes}, DType::float64).set_requires_grad(true);
  probe.bias = Tensor::zeros({num_classes}, DType::float64).set_requires_grad(true);
  AdamWState weight_state;
  weight_state.weight_decay = config.weight_decay;
  AdamWState bias_state;
  bias_state.weight_decay = 0.0;

  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  Schedule schedule;
  schedule.base_lr = config.lr;
  schedule.warmup_fraction = 0.0;
  schedule.total_steps = per_epoch * config.epochs;

  const RngStream root(config.seed);
  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = root.substream({epoch});
    shuffle(order, rng);
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, n - begin);
      const std::span<const std::size_t> idx(order.data() + begin, count);
      Tape tape;
      Tape::Scope scope(tape);
      const Tensor xb = ops::gather_rows(xs, idx);
      const Tensor yb = ops::gather_rows(onehot, idx);
      const Tensor logits = ops::add_bias(ops::matmul(xb, probe.weight), probe.bias);
      const Tensor loss = ops::mean(ops::sub(ops::logsumexp(logits), ops::sum_last(ops::mul(logits, yb))));
      probe.weight.zero_grad();
      probe.bias.zero_grad();
      backward(loss, tape);
      const double lr = lr_at(step, schedule);
      adamw_step({probe.weight}, weight_state, lr);
      adamw_step({probe.bias}, bias_state, lr);
      ++step;
    }
  }
  probe.weight = probe.weight.detach();
  probe.bias = probe.bias.detach();
  return probe;
}

double roc_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw DimensionError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U from mid-ranks.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) {
        rank_sum += mid_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("roc_auc needs both positive and negative samples");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

EvalReport classification_metrics(const Tensor& scores, std::span<const std::int64_t> labels) {
  if (scores.dim() != 2 || scores.size(0) != labels.size())
    throw DimensionError("scores " + shape_string(scores.shape()) + " do not match " + std::to_string(labels.size()) +
                         " labels");
  if (labels.empty()) throw ValidationError("classification metrics need at least one sample");
  const std::size_t n = labels.size(), c = scores.size(1);
  const auto s = scores.values();
  for (double v : s)
    if (!std::isfinite(v)) throw NumericError("classification scores contain a non-finite value");

  EvalReport r;
  r.num_classes = c;
  r.num_samples = n;
  r.confusion.assign(c, std::vector<std::size_t>(c, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ValidationError("label " + std::to_string(labels[i]) + " outside the score columns");
    std::size_t pred = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (s[i * c + k] > s[i * c + pred]) pred = k;
    ++r.confusion[labels[i]][pred];
    if (pred == static_cast<std::size_t>(labels[i])) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  r.per_class_accuracy.assign(c, kNaN);
  r.per_class_auc.assign(c, kNaN);
  double auc_sum = 0.0;
  std::size_t auc_classes = 0;
  std::vector<double> column(n);
  for (std::size_t k = 0; k < c; ++k) {
    const std::size_t row = std::accumulate(r.confusion[k].begin(), r.confusion[k].end(), std::size_t{0});
    if (row == 0) continue;
    r.per_class_accuracy[k] = static_cast<double>(r.confusion[k][k]) / static_cast<double>(row);
    if (row == n) continue;  // no negatives: one-vs-rest AUC undefined
    auto positive = std::make_unique<bool[]>(n);
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = s[i * c + k];
      positive[i] = labels[i] == static_cast<std::int64_t>(k);
    }
    r.per_class_auc[k] = roc_auc(column, std::span<const bool>(positive.get(), n));
    auc_sum += r.per_class_auc[k];
    ++auc_classes;
  }
  r.macro_auc = auc_classes ? auc_sum / static_cast<double>(auc_classes) : kNaN;
  return r;
}

double uniformity(const Tensor& z) {
  const RowMatrix m = normalize_rows(to_matrix(z));
  const Eigen::Index n = m.rows();
  if (n < 2) throw ValidationError("uniformity needs at least two embeddings");
  const RowMatrix gram = m * m.transpose();
  // |zi - zj|^2 = 2 - 2 <zi, zj> for unit rows; log-mean-exp with a max shift
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  double peak = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double sq = std::max(0.0, 2.0 - 2.0 * gram(i, j));
      terms.push_back(-2.0 * sq);
      peak = std::max(peak, terms.back());
    }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - peak);
  return peak + std::log(acc / static_cast<double>(terms.size()));
}

AlignmentUniformity alignment_uniformity(const Tensor& left, const Tensor& right) {
  if (left.shape() != right.shape() || left.dim() != 2)
    throw DimensionError("alignment expects two [N, d] tensors of equal shape");
  if (left.size(0) < 2) throw ValidationError("alignment/uniformity need at least two positive pairs");
  const RowMatrix l = normalize_rows(to_matrix(left)), r = normalize_rows(to_matrix(right));
  AlignmentUniformity out;
  out.alignment = (l - r).rowwise().squaredNorm().mean();
  RowMatrix pool(l.rows() * 2, l.cols());
  pool << l, r;
  out.uniformity = uniformity(from_matrix(pool));
  return out;
}

PcaResult pca_project(const Tensor& features, std::size_t k) {
  const RowMatrix x = to_matrix(features);
  const auto n = x.rows(), d = x.cols();
  if (n < 2) throw ValidationError("PCA needs at least two rows");
  if (static_cast<std::size_t>(d) < k) throw ValidationError("PCA: feature dimension below the number of components");
  if (k == 0) throw ValidationError("PCA needs at least one component");
  const RowMatrix centred = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd values = eig.eigenvalues();
  const double total = std::max(values.sum(), 0.0);

  PcaResult r;
  Eigen::MatrixXd basis(d, static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::Index src = d - 1 - static_cast<Eigen::Index>(c);
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(static_cast<Eigen::Index>(c)) = v;
    r.components.emplace_back(v.data(), v.data() + d);
    const double var = std::max(values(src), 0.0);
    r.explained_variance.push_back(var);
    r.explained_ratio.push_back(total > 0 ? var / total : 0.0);
  }
  const RowMatrix coords = centred * basis;
  r.coords.assign(coords.data(), coords.data() + coords.size());
  return r;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

nlohmann::json nullable(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

double from_nullable(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

}  // namespace

std::string eval_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "scope,class,count,accuracy,auc\n";
  os << "overall,," << r.num_samples << ',' << fmt(r.accuracy) << ',' << fmt(r.macro_auc) << '\n';
  for (std::size_t c = 0; c < r.num_classes; ++c) {
    const std::size_t row = std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t{0});
    os << "class," << c << ',' << row << ',' << fmt(r.per_class_accuracy[c]) << ',' << fmt(r.per_class_auc[c])
       << '\n';
  }
  return os.str();
}

nlohmann::json eval_json(const EvalReport& r) {
  nlohmann::json per_acc = nlohmann::json::array(), per_auc = nlohmann::json::array();
  for (std::size_t c = 0; c < r.num_classes; ++c) {
    per_acc.push_back(nullable(r.per_class_accuracy[c]));
    per_auc.push_back(nullable(r.per_class_auc[c]));
  }
  return {{"num_classes", r.num_classes},   {"num_samples", r.num_samples},
          {"accuracy", r.accuracy},         {"macro_auc", nullable(r.macro_auc)},
          {"per_class_accuracy", per_acc},  {"per_class_auc", per_auc},
          {"confusion", r.confusion}};
}

EvalReport eval_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.num_classes = j.at("num_classes").get<std::size_t>();
    r.num_samples = j.at("num_samples").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_auc = from_nullable(j.at("macro_auc"));
    for (const auto& v : j.at("per_class_accuracy")) r.per_class_accuracy.push_back(from_nullable(v));
    for (const auto& v : j.at("per_class_auc")) r.per_class_auc.push_back(from_nullable(v));
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    if (r.per_class_accuracy.size() != r.num_classes || r.per_class_auc.size() != r.num_classes ||
        r.confusion.size() != r.num_classes)
      throw FormatError("eval report: per-class arrays do not match num_classes");
    for (const auto& row : r.confusion)
      if (row.size() != r.num_classes) throw FormatError("eval report: confusion matrix is not square");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
}

std::string confusion_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "truth\\pred";
  for (std::size_t c = 0; c < r.num_classes; ++c) os << ',' << c;
  os << '\n';
  for (std::size_t t = 0; t < r.num_classes; ++t) {
    os << t;
    for (std::size_t p = 0; p < r.num_classes; ++p) os << ',' << r.confusion[t][p];
    os << '\n';
  }
  return os.str();
}

std::vector<std::vector<std::size_t>> parse_confusion_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("confusion.csv is empty");
  std::vector<std::vector<std::size_t>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');  // truth label
    std::vector<std::size_t> row;
    while (std::getline(cells, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stoull(cell, &used));
        if (used != cell.size()) throw FormatError("confusion.csv: bad count '" + cell + "'");
      } catch (const std::logic_error&) {
        throw FormatError("confusion.csv: bad count '" + cell + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  for (const auto& row : rows)
    if (row.size() != rows.size()) throw FormatError("confusion.csv is not square");
  return rows;
}

}  // namespace amimv
