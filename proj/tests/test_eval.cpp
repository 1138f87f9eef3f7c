#include <cmath>
#include <numeric>

#include "amimv/errors.hpp"
#include "amimv/eval.hpp"
#include "amimv/rng.hpp"
#include "doctest.h"

using namespace amimv;

namespace {

Tensor matrix(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from_values(flat, {rows.size(), rows.front().size()}, DType::float64);
}

// Direct pairwise count of (positive, negative) orderings.
double pairwise_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

double auc_of(const std::vector<double>& s, const std::vector<bool>& pos) {
  auto flags = std::make_unique<bool[]>(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) flags[i] = pos[i];
  return roc_auc(s, std::span<const bool>(flags.get(), pos.size()));
}

ImageDataset tiny_dataset() {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.counts = {20, 10, 10};
  spec.image_size = 12;
  spec.seed = 5;
  return make_synthetic_longtail(spec);
}

}  // namespace

TEST_CASE("roc_auc") {
  CHECK(auc_of({0.1, 0.4, 0.35, 0.8}, {false, false, true, true}) == 0.75);
  CHECK(auc_of({0.1, 0.2, 0.3, 0.4}, {false, false, true, true}) == 1.0);
  CHECK(auc_of({0.5, 0.5, 0.5}, {true, false, false}) == 0.5);
  CHECK_THROWS_AS(auc_of({0.1, 0.2}, {true, true}), ValidationError);

  RngStream rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(6));  // frequent ties
      pos[i] = rng.bernoulli(0.4);
    }
    pos[0] = true;
    pos[1] = false;
    const double a = auc_of(s, pos);
    CHECK(a == doctest::Approx(pairwise_auc(s, pos)).epsilon(1e-12));
    // invariant under a strictly increasing transform
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3.0 * s[i]) - 7.0;
    CHECK(auc_of(t, pos) == a);
  }
}

TEST_CASE("classification_metrics") {
  SUBCASE("binary example") {
    const auto r = classification_metrics(matrix({{0.9, 0.1}, {0.6, 0.4}, {0.65, 0.35}, {0.2, 0.8}}),
                                          std::vector<std::int64_t>{0, 0, 1, 1});
    CHECK(r.per_class_auc[1] == 0.75);
    CHECK(r.per_class_auc[0] == 0.75);
    CHECK(r.macro_auc == 0.75);
    CHECK(r.accuracy == 0.75);
    CHECK(r.confusion == std::vector<std::vector<std::size_t>>{{2, 0}, {1, 1}});
  }
  SUBCASE("perfect ranking") {
    const auto r = classification_metrics(matrix({{3, 1, 0}, {0, 2, 1}, {0, 1, 5}, {4, 0, 0}}),
                                          std::vector<std::int64_t>{0, 1, 2, 0});
    CHECK(r.accuracy == 1.0);
    CHECK(r.macro_auc == 1.0);
  }
  SUBCASE("all scores tied") {
    const auto r = classification_metrics(matrix({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}}),
                                          std::vector<std::int64_t>{0, 1, 2, 2});
    for (double a : r.per_class_auc) CHECK(a == 0.5);
    CHECK(r.macro_auc == 0.5);
    // ties go to class 0
    CHECK(r.confusion[2][0] == 2);
    CHECK(r.accuracy == 0.25);
  }
  SUBCASE("absent class excluded from macro mean") {
    const auto r = classification_metrics(matrix({{0.9, 0.1, 0.0}, {0.2, 0.8, 0.0}, {0.6, 0.4, 0.0}}),
                                          std::vector<std::int64_t>{0, 1, 1});
    CHECK(std::isnan(r.per_class_auc[2]));
    CHECK(std::isnan(r.per_class_accuracy[2]));
    CHECK(r.macro_auc == doctest::Approx((r.per_class_auc[0] + r.per_class_auc[1]) / 2));
  }
  SUBCASE("non-finite scores") {
    CHECK_THROWS_AS(classification_metrics(matrix({{NAN, 0.0}}), std::vector<std::int64_t>{0}), NumericError);
  }
}

TEST_CASE("confusion identities on random predictions") {
  RngStream rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(60), c = 2 + rng.below(6);
    std::vector<double> s(n * c);
    for (auto& v : s) v = static_cast<double>(rng.below(4)) + (rng.bernoulli(0.5) ? rng.uniform() : 0.0);
    std::vector<std::int64_t> y(n);
    for (auto& v : y) v = static_cast<std::int64_t>(rng.below(c));
    const auto r = classification_metrics(Tensor::from_buffer(s, {n, c}), y);

    std::size_t total = 0, trace = 0, correct = 0;
    for (std::size_t t = 0; t < c; ++t) {
      const std::size_t row = std::accumulate(r.confusion[t].begin(), r.confusion[t].end(), std::size_t{0});
      total += row;
      trace += r.confusion[t][t];
      if (row > 0) CHECK(r.per_class_accuracy[t] == static_cast<double>(r.confusion[t][t]) / row);
      else CHECK(std::isnan(r.per_class_accuracy[t]));
    }
    // independent argmax
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 0; k < c; ++k)
        if (s[i * c + k] > s[i * c + best]) best = k;
      correct += best == static_cast<std::size_t>(y[i]);
    }
    REQUIRE(total == n);
    CHECK(trace == correct);
    CHECK(r.accuracy == static_cast<double>(trace) / static_cast<double>(total));
  }
}

TEST_CASE("alignment and uniformity") {
  const Tensor a = matrix({{1, 0}, {0, 1}, {0.6, 0.8}});
  CHECK(alignment_uniformity(a, a).alignment == 0.0);
  CHECK(uniformity(matrix({{0, 3}, {0, 3}})) == 0.0);
  CHECK(uniformity(matrix({{1, 0}, {-1, 0}})) == doctest::Approx(-8.0).epsilon(1e-12));
  CHECK_THROWS_AS(uniformity(matrix({{1, 0}})), ValidationError);
  CHECK_THROWS_AS(alignment_uniformity(matrix({{1, 0}}), matrix({{0, 1}})), ValidationError);

  SUBCASE("direct oracle") {
    RngStream rng(8);
    std::vector<std::vector<double>> l(5, std::vector<double>(3)), r = l;
    for (auto* m : {&l, &r})
      for (auto& row : *m)
        for (auto& v : row) v = rng.normal();
    auto unit = [](std::vector<double> v) {
      double n = 0;
      for (double x : v) n += x * x;
      for (double& x : v) x /= std::sqrt(n);
      return v;
    };
    double align = 0.0;
    std::vector<std::vector<double>> pool;
    for (std::size_t i = 0; i < 5; ++i) {
      const auto u = unit(l[i]), w = unit(r[i]);
      for (std::size_t k = 0; k < 3; ++k) align += (u[k] - w[k]) * (u[k] - w[k]) / 5.0;
      pool.push_back(u);
    }
    for (std::size_t i = 0; i < 5; ++i) pool.push_back(unit(r[i]));
    double acc = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < pool.size(); ++i)
      for (std::size_t j = i + 1; j < pool.size(); ++j) {
        double sq = 0.0;
        for (std::size_t k = 0; k < 3; ++k) sq += (pool[i][k] - pool[j][k]) * (pool[i][k] - pool[j][k]);
        acc += std::exp(-2.0 * sq);
        pairs += 1.0;
      }
    const auto au = alignment_uniformity(matrix(l), matrix(r));
    CHECK(au.alignment == doctest::Approx(align).epsilon(1e-12));
    CHECK(au.uniformity == doctest::Approx(std::log(acc / pairs)).epsilon(1e-12));
  }
}

TEST_CASE("pca_project") {
  SUBCASE("points on a line") {
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 20; ++i) rows.push_back({1.0 + 2.0 * i, -0.5 * i, 3.0, 0.25 * i});
    const auto p = pca_project(matrix(rows));
    CHECK(p.explained_ratio[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(p.explained_ratio[1] <= 1e-9);
  }
  SUBCASE("orthonormal components, non-increasing variance") {
    RngStream rng(3);
    std::vector<std::vector<double>> rows(50, std::vector<double>(6));
    for (auto& r : rows)
      for (std::size_t j = 0; j < 6; ++j) r[j] = rng.normal() * (6.0 - j);
    const auto p = pca_project(matrix(rows), 3);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        double dot = 0.0;
        for (std::size_t j = 0; j < 6; ++j) dot += p.components[a][j] * p.components[b][j];
        CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) <= 1e-6);
      }
    CHECK(p.explained_variance[0] >= p.explained_variance[1]);
    CHECK(p.explained_variance[1] >= p.explained_variance[2]);
    CHECK(p.coords.size() == 150);
  }
  SUBCASE("anisotropic Gaussian") {
    RngStream rng(11);
    std::vector<std::vector<double>> rows(10000);
    for (auto& r : rows) r = {2.0 * rng.normal(), rng.normal()};
    const auto p = pca_project(matrix(rows));
    CHECK(std::abs(p.explained_ratio[0] - 0.8) <= 0.03);
    CHECK(std::abs(p.explained_ratio[1] - 0.2) <= 0.03);
  }
  CHECK_THROWS_AS(pca_project(matrix({{1.0}, {2.0}}), 2), ValidationError);
  CHECK_THROWS_AS(pca_project(matrix({{1.0, 2.0}})), ValidationError);
}

TEST_CASE("linear_probe") {
  ProbeConfig cfg;
  SUBCASE("separable toy problem") {
    RngStream rng(1);
    std::vector<std::vector<double>> rows;
    std::vector<std::int64_t> y;
    for (int i = 0; i < 200; ++i) {
      const int label = i % 2;
      rows.push_back({(label ? 1.0 : -1.0) + 0.3 * rng.normal(), rng.normal(), rng.normal()});
      y.push_back(label);
    }
    // enforce a margin so separability is exact
    for (auto& r : rows) r[0] += r[0] > 0 ? 0.2 : -0.2;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if ((rows[i][0] > 0) != (y[i] == 1)) rows[i][0] = -rows[i][0];
    const Tensor x = matrix(rows);
    const auto probe = linear_probe(x, y, 2, cfg);
    CHECK(classification_metrics(probe.scores(x), y).accuracy == 1.0);
    CHECK(probe.warnings.empty());
  }
  SUBCASE("constant features predict the majority class") {
    std::vector<std::vector<double>> rows(40, std::vector<double>{0.3, -1.2});
    std::vector<std::int64_t> y(40, 0);
    for (int i = 0; i < 10; ++i) y[i] = 2;
    const Tensor x = matrix(rows);
    const auto probe = linear_probe(x, y, 3, cfg);
    const auto r = classification_metrics(probe.scores(x), y);
    CHECK(r.accuracy == 0.75);
    for (const auto& row : r.confusion) CHECK(row[0] == std::accumulate(row.begin(), row.end(), std::size_t{0}));
    REQUIRE(probe.warnings.size() == 1);
    CHECK(probe.warnings[0].find("class 1") != std::string::npos);
  }
  SUBCASE("deterministic given seed") {
    RngStream rng(4);
    std::vector<std::vector<double>> rows(64, std::vector<double>(5));
    std::vector<std::int64_t> y(64);
    for (std::size_t i = 0; i < 64; ++i) {
      for (auto& v : rows[i]) v = rng.normal();
      y[i] = static_cast<std::int64_t>(rng.below(3));
    }
    cfg.epochs = 10;
    cfg.batch_size = 16;
    const auto a = linear_probe(matrix(rows), y, 3, cfg);
    const auto b = linear_probe(matrix(rows), y, 3, cfg);
    CHECK(a.weight.values() == b.weight.values());
    CHECK(a.bias.values() == b.bias.values());
    cfg.seed = 1;
    CHECK(linear_probe(matrix(rows), y, 3, cfg).weight.values() != a.weight.values());
  }
  CHECK_THROWS_AS(linear_probe(matrix({{1.0}}), std::vector<std::int64_t>{4}, 2, cfg), ValidationError);
}

TEST_CASE("extract_features") {
  const auto ds = tiny_dataset();
  EncoderConfig ec;
  auto pair = init_pair(ec, 3);
  const auto f = extract_features(pair, ds, Split::test, 12, 7);
  CHECK(f.features.size(0) == ds.split(Split::test).size());
  CHECK(f.features.size(1) == ec.feature_dim());
  CHECK(f.labels == ds.split(Split::test).labels);
  CHECK(f.features.dtype() == DType::float64);
  CHECK(extract_features(pair, ds, Split::test, 12, 7).features.values() == f.features.values());

  // chunking does not change per-row results beyond float rounding
  const auto whole = extract_features(pair, ds, Split::test, 12, 1000).features.values();
  const auto parts = f.features.values();
  for (std::size_t i = 0; i < whole.size(); ++i) CHECK(parts[i] == doctest::Approx(whole[i]).epsilon(1e-5));

  // key parameters do not influence features
  for (auto& p : pair.k)
    for (auto& v : p.value.mutable_data<float>()) v += 0.5f;
  CHECK(extract_features(pair, ds, Split::test, 12, 7).features.values() == f.features.values());

  ImageDataset empty = ds;
  empty.split(Split::val) = {};
  CHECK_THROWS_AS(extract_features(pair, empty, Split::val, 12), ValidationError);
  ec.input_channels = 3;
  CHECK_THROWS_AS(extract_features(init_pair(ec, 1), ds, Split::test, 12), ValidationError);
}

TEST_CASE("report serialization") {
  const auto r = classification_metrics(matrix({{0.9, 0.1, 0.0}, {0.2, 0.8, 0.0}, {0.6, 0.4, 0.0}}),
                                        std::vector<std::int64_t>{0, 1, 1});
  const auto j = eval_json(r);
  CHECK(j["per_class_auc"][2].is_null());
  const auto back = eval_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.confusion == r.confusion);
  CHECK(back.accuracy == r.accuracy);
  CHECK(std::isnan(back.per_class_accuracy[2]));
  CHECK(parse_confusion_csv(confusion_csv(r)) == r.confusion);
  CHECK(confusion_csv(r) == "truth\\pred,0,1,2\n0,1,0,0\n1,1,1,0\n2,0,0,0\n");
  const auto csv = eval_csv(r);
  CHECK(csv.rfind("scope,class,count,accuracy,auc\noverall,,3,0.666667,", 0) == 0);
  CHECK(csv.find("class,2,0,,\n") != std::string::npos);
  CHECK_THROWS_AS(parse_confusion_csv("h\n0,1,2\n"), FormatError);
  CHECK_THROWS_AS(eval_from_json(nlohmann::json{{"accuracy", 1}}), FormatError);
}
