#include "amimv/loss.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "amimv/errors.hpp"
#include "amimv/ops.hpp"

namespace amimv {

std::string_view fusion_name(FusionKind kind) {
  switch (kind) {
    case FusionKind::mean_norm: return "mean_norm";
    case FusionKind::hadamard_norm: return "hadamard_norm";
    case FusionKind::concat: return "concat";
  }
  return "?";
}

FusionKind parse_fusion(std::string_view name) {
  for (auto k : {FusionKind::mean_norm, FusionKind::hadamard_norm, FusionKind::concat})
    if (fusion_name(k) == name) return k;
  throw ValidationError("unknown fusion '" + std::string(name) + "' (expected mean_norm, hadamard_norm or concat)");
}

void LossConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("loss.tau must be a positive finite number");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"tau", c.tau}, {"fusion", fusion_name(c.fusion)}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  if (!j.is_object()) throw ValidationError("loss config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "tau") c.tau = v.get<double>();
      else if (key == "fusion") c.fusion = parse_fusion(v.get<std::string>());
      else throw ValidationError("unknown config key loss." + key);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("loss config: bad value for " + key);
    }
  }
  c.validate();
}

Tensor fuse(const Tensor& za, const Tensor& zb, FusionKind kind) {
  if (za.shape() != zb.shape() || za.dim() != 2)
    throw DimensionError("fuse expects two [N, d] tensors of equal shape, got " + shape_string(za.shape()) +
                         " and " + shape_string(zb.shape()));
  switch (kind) {
    case FusionKind::mean_norm: return ops::l2_normalize(ops::scale(ops::add(za, zb), 0.5));
    case FusionKind::hadamard_norm: return ops::l2_normalize(ops::mul(za, zb));
    case FusionKind::concat: return ops::l2_normalize(ops::concat({za, zb}, 1));
  }
  throw ContractError("unhandled fusion kind");
}

Tensor nt_xent(const Tensor& z_left, const Tensor& z_right, double tau) {
  if (z_left.shape() != z_right.shape() || z_left.dim() != 2)
    throw DimensionError("nt_xent expects two [N, d] tensors of equal shape, got " +
                         shape_string(z_left.shape()) + " and " + shape_string(z_right.shape()));
  const std::size_t n = z_left.size(0);
  if (n == 0) throw ValidationError("nt_xent needs at least one pair");
  if (!(tau > 0.0)) throw ValidationError("nt_xent temperature must be positive");

  const Tensor pool = ops::concat({ops::l2_normalize(z_left), ops::l2_normalize(z_right)}, 0);
  const Tensor sim = ops::scale(ops::matmul(pool, ops::transpose(pool)), 1.0 / tau);

  // self-similarity is excluded from every denominator
  std::vector<double> mask(4 * n * n, 0.0);
  for (std::size_t i = 0; i < 2 * n; ++i) mask[i * 2 * n + i] = -std::numeric_limits<double>::infinity();
  const Tensor denominators = ops::logsumexp(ops::add(sim, Tensor::from_values(mask, {2 * n, 2 * n}, sim.dtype())));

  std::vector<std::size_t> partner(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) partner[i] = (i + n) % (2 * n);
  const Tensor positives =
      ops::scale(ops::sum_last(ops::mul(pool, ops::gather_rows(pool, partner))), 1.0 / tau);
  return ops::mean(ops::sub(denominators, positives));
}

Tensor amimv_loss(const Tensor& z1n, const Tensor& z2a, const Tensor& z1a, const Tensor& z2n,
                  const LossConfig& config) {
  if (z1n.is_detached() || z2a.is_detached())
    throw ContractError("amimv_loss: query-branch inputs (z1n, z2a) must not be detached");
  if (!z1a.is_detached() || !z2n.is_detached() || z1a.requires_grad() || z2n.requires_grad())
    throw ContractError("amimv_loss: key-branch inputs (z1a, z2n) must be detached");
  config.validate();
  return nt_xent(fuse(z1n, z2a, config.fusion), fuse(z1a, z2n, config.fusion), config.tau);
}

}  // namespace amimv
