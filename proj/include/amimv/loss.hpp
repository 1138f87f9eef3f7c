#pragma once

#include <string_view>

#include "json.hpp"

#include "amimv/tensor.hpp"

namespace amimv {

enum class FusionKind { mean_norm, hadamard_norm, concat };

std::string_view fusion_name(FusionKind kind);
FusionKind parse_fusion(std::string_view name);

struct LossConfig {
  double tau = 0.2;
  FusionKind fusion = FusionKind::mean_norm;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// mean_norm: l2n((a + b) / 2); hadamard_norm: l2n(a * b); concat: l2n([a, b]).
Tensor fuse(const Tensor& za, const Tensor& zb, FusionKind kind);

/// Normalized temperature-scaled cross entropy over the 2N pool formed by
/// the rows of both inputs; row i of each side is the other's positive.
/// Returns the mean over all 2N anchors.
Tensor nt_xent(const Tensor& z_left, const Tensor& z_right, double tau);

/// nt_xent(fuse(z1n, z2a), fuse(z1a, z2n)). The key-branch inputs z1a and z2n
/// must be detached and the query-branch inputs must not be; anything else is
/// a ContractError.
Tensor amimv_loss(const Tensor& z1n, const Tensor& z2a, const Tensor& z1a, const Tensor& z2n,
                  const LossConfig& config);

}  // namespace amimv
