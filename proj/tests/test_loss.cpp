#include <cmath>
#include <random>

#include "amimv/errors.hpp"
#include "amimv/loss.hpp"
#include "amimv/model.hpp"
#include "amimv/tape.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace amimv;
using amimv::testing::gradcheck;
using amimv::testing::random_tensor;

namespace {

Tensor rows(const std::vector<std::vector<double>>& r) {
  std::vector<double> flat;
  for (const auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor::from_values(flat, {r.size(), r.front().size()}, DType::float64);
}

// Direct evaluation of the pooled contrastive loss with plain loops.
double reference_nt_xent(const Tensor& left, const Tensor& right, double tau) {
  const std::size_t n = left.size(0), d = left.size(1);
  std::vector<std::vector<double>> pool;
  for (const auto* t : {&left, &right}) {
    const auto v = t->values();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(v.begin() + i * d, v.begin() + (i + 1) * d);
      double norm = 0.0;
      for (double x : row) norm += x * x;
      norm = std::max(std::sqrt(norm), 1e-12);
      for (double& x : row) x /= norm;
      pool.push_back(row);
    }
  }
  auto sim = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += pool[a][k] * pool[b][k];
    return s / tau;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < 2 * n; ++i) {
    double denom = 0.0;
    for (std::size_t k = 0; k < 2 * n; ++k)
      if (k != i) denom += std::exp(sim(i, k));
    total += -std::log(std::exp(sim(i, (i + n) % (2 * n))) / denom);
  }
  return total / static_cast<double>(2 * n);
}

Tensor query(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("fuse") {
  const auto m = fuse(rows({{1, 0}}), rows({{0, 1}}), FusionKind::mean_norm).values();
  CHECK(m[0] == doctest::Approx(std::sqrt(2.0) / 2).epsilon(1e-15));
  CHECK(m[1] == doctest::Approx(std::sqrt(2.0) / 2).epsilon(1e-15));

  std::mt19937_64 gen(1);
  const Tensor u = ops::l2_normalize(random_tensor(gen, {3, 5}));
  const auto same = fuse(u, u, FusionKind::mean_norm).values();
  const auto uv = u.values();
  for (std::size_t i = 0; i < uv.size(); ++i) CHECK(same[i] == doctest::Approx(uv[i]).epsilon(1e-14));

  const auto h = fuse(rows({{2, 0}}), rows({{3, 0}}), FusionKind::hadamard_norm).values();
  CHECK(h == std::vector<double>{1.0, 0.0});

  const auto c = fuse(rows({{3, 0}}), rows({{0, 4}}), FusionKind::concat);
  CHECK(c.shape() == Shape{1, 4});
  CHECK(c.values() == std::vector<double>{0.6, 0.0, 0.0, 0.8});

  CHECK_THROWS_AS(fuse(rows({{1, 0}}), rows({{1, 0, 0}}), FusionKind::mean_norm), DimensionError);
  CHECK(parse_fusion("hadamard_norm") == FusionKind::hadamard_norm);
  CHECK_THROWS_AS(parse_fusion("sum"), ValidationError);
}

TEST_CASE("nt_xent closed forms") {
  CHECK(nt_xent(rows({{1, 2}}), rows({{-3, 1}}), 0.2).item() == 0.0);

  for (std::size_t n : {2u, 4u, 8u}) {
    for (double tau : {0.05, 0.2, 1.0, 7.0}) {
      const Tensor same = rows(std::vector<std::vector<double>>(n, {0.3, -0.2, 0.9}));
      CHECK(std::abs(nt_xent(same, same, tau).item() - std::log(2.0 * n - 1.0)) <= 1e-6);
    }
  }
  const Tensor e = rows({{1, 0}, {0, 1}});
  CHECK(nt_xent(e, e, 1.0).item() == doctest::Approx(std::log(1.0 + 2.0 * std::exp(-1.0))).epsilon(1e-12));
  CHECK(std::abs(nt_xent(e, e, 1.0).item() - 0.5514) <= 1e-4);

  CHECK_THROWS_AS(nt_xent(Tensor::zeros({0, 3}, DType::float64), Tensor::zeros({0, 3}, DType::float64), 0.2),
                  ValidationError);
  CHECK_THROWS_AS(nt_xent(rows({{1, 0}}), rows({{1, 0}, {0, 1}}), 0.2), DimensionError);
}

TEST_CASE("nt_xent matches a direct evaluation") {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + gen() % 9, d = 1 + gen() % 6;
    const double tau = 0.05 + (gen() % 100) / 50.0;
    const Tensor a = random_tensor(gen, {n, d}), b = random_tensor(gen, {n, d});
    const double got = nt_xent(a, b, tau).item();
    CHECK(got == doctest::Approx(reference_nt_xent(a, b, tau)).epsilon(1e-10));
    CHECK(got >= 0.0);
    // float32 path agrees to single precision
    CHECK(nt_xent(a.to(DType::float32), b.to(DType::float32), tau).item() ==
          doctest::Approx(got).epsilon(1e-4));
  }
}

TEST_CASE("nt_xent is invariant to instance order") {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + gen() % 7;
    const Tensor a = random_tensor(gen, {n, 4}), b = random_tensor(gen, {n, 4});
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), gen);
    CHECK(nt_xent(ops::gather_rows(a, perm), ops::gather_rows(b, perm), 0.3).item() ==
          doctest::Approx(nt_xent(a, b, 0.3).item()).epsilon(1e-12));
  }
}

TEST_CASE("nt_xent gradients") {
  std::mt19937_64 gen(5);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + gen() % 4;
    const auto r = gradcheck([](const std::vector<Tensor>& in) { return nt_xent(in[0], in[1], 0.5); },
                             {random_tensor(gen, {n, 3}), random_tensor(gen, {n, 3})});
    worst = std::max(worst, r.max_rel_error);
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("amimv_loss") {
  std::mt19937_64 gen(6);
  const LossConfig cfg;
  CHECK(cfg.tau == 0.2);
  CHECK(cfg.fusion == FusionKind::mean_norm);

  SUBCASE("identical unit inputs give ln 3") {
    const Tensor u = rows({{0.6, 0.8}, {0.6, 0.8}});
    CHECK(std::abs(amimv_loss(query(u.clone()), query(u.clone()), u.detach(), u.detach(), cfg).item() -
                   std::log(3.0)) <= 1e-6);
  }
  SUBCASE("composition is exact") {
    for (auto kind : {FusionKind::mean_norm, FusionKind::hadamard_norm, FusionKind::concat}) {
      for (int trial = 0; trial < 10; ++trial) {
        const LossConfig c{0.1 + 0.1 * trial, kind};
        const Tensor z1n = random_tensor(gen, {5, 4}), z2a = random_tensor(gen, {5, 4});
        const Tensor z1a = random_tensor(gen, {5, 4}), z2n = random_tensor(gen, {5, 4});
        const double composed = nt_xent(fuse(z1n, z2a, kind), fuse(z1a, z2n, kind), c.tau).item();
        CHECK(amimv_loss(z1n, z2a, z1a.detach(), z2n.detach(), c).item() == composed);
      }
    }
  }
  SUBCASE("gradient flows only through the query branch") {
    Tensor z1n = query(random_tensor(gen, {4, 3})), z2a = query(random_tensor(gen, {4, 3}));
    Tensor z1a = random_tensor(gen, {4, 3}).detach(), z2n = random_tensor(gen, {4, 3}).detach();
    Tape tape;
    {
      Tape::Scope scope(tape);
      backward(amimv_loss(z1n, z2a, z1a, z2n, cfg), tape);
    }
    auto norm = [](const Tensor& t) {
      double s = 0.0;
      for (double v : t.values()) s += v * v;
      return s;
    };
    CHECK(norm(z1n.grad()) > 0.0);
    CHECK(norm(z2a.grad()) > 0.0);
    CHECK(norm(z1a.grad()) == 0.0);
    CHECK(norm(z2n.grad()) == 0.0);
  }
  SUBCASE("swapped markers are rejected") {
    const Tensor a = random_tensor(gen, {2, 3});
    CHECK_THROWS_AS(amimv_loss(a.detach(), query(a.clone()), a.detach(), a.detach(), cfg), ContractError);
    CHECK_THROWS_AS(amimv_loss(query(a.clone()), query(a.clone()), query(a.clone()), a.detach(), cfg),
                    ContractError);
  }
  SUBCASE("end-to-end gradcheck") {
    double worst = 0.0;
    for (auto kind : {FusionKind::mean_norm, FusionKind::hadamard_norm, FusionKind::concat}) {
      for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + gen() % 3;
        const Tensor z1a = random_tensor(gen, {n, 3}).detach(), z2n = random_tensor(gen, {n, 3}).detach();
        const LossConfig c{0.5, kind};
        const auto r = gradcheck(
            [&](const std::vector<Tensor>& in) { return amimv_loss(in[0], in[1], z1a, z2n, c); },
            {testing::random_away_from_zero(gen, {n, 3}), testing::random_away_from_zero(gen, {n, 3})});
        worst = std::max(worst, r.max_rel_error);
      }
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("key encoder receives no gradient") {
  EncoderConfig enc;
  enc.projector_hidden = 32;
  enc.projector_output = 16;
  auto pair = init_pair(enc, 2);
  std::mt19937_64 gen(8);
  const Tensor v1n = random_tensor(gen, {3, 1, 8, 8}).to(DType::float32);
  const Tensor v2a = random_tensor(gen, {3, 1, 8, 8}).to(DType::float32);
  const Tensor v1a = random_tensor(gen, {3, 1, 8, 8}).to(DType::float32);
  const Tensor v2n = random_tensor(gen, {3, 1, 8, 8}).to(DType::float32);
  Tape tape;
  {
    Tape::Scope scope(tape);
    const auto q = encode(enc, pair.q, ops::concat({v1n, v2a}, 0)).projections;
    Tensor k;
    {
      NoGradGuard no_grad;
      k = encode(enc, pair.k, ops::concat({v1a, v2n}, 0)).projections;
    }
    CHECK(k.is_detached());
    const Tensor loss = amimv_loss(ops::slice_rows(q, 0, 3), ops::slice_rows(q, 3, 3), ops::slice_rows(k, 0, 3),
                                   ops::slice_rows(k, 3, 3), LossConfig{});
    backward(loss, tape);
  }
  for (const auto& p : pair.k) CHECK_FALSE(p.value.has_grad());
  bool any = false;
  for (const auto& p : pair.q)
    for (double g : p.value.grad().values()) any = any || g != 0.0;
  CHECK(any);
}

TEST_CASE("loss config json") {
  const nlohmann::json j = LossConfig{};
  CHECK(j == nlohmann::json{{"tau", 0.2}, {"fusion", "mean_norm"}});
  CHECK(nlohmann::json{{"fusion", "concat"}}.get<LossConfig>().fusion == FusionKind::concat);
  CHECK_THROWS_AS((nlohmann::json{{"tau", 0.0}}.get<LossConfig>()), ValidationError);
  CHECK_THROWS_AS((nlohmann::json{{"margin", 1}}.get<LossConfig>()), ValidationError);
}
