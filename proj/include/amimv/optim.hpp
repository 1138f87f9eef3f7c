#pragma once

#include <cstdint>
#include <vector>

#include "amimv/tensor.hpp"

namespace amimv {

/// 0.75 * batch_size / 256.
double scaled_base_lr(std::size_t batch_size);

struct Schedule {
  double base_lr = 0.375;
  double warmup_fraction = 0.1;
  double warmup_start = 1e-4;
  std::uint64_t total_steps = 1;

  /// ceil(warmup_fraction * total_steps), kept below total_steps.
  std::uint64_t warmup_steps() const;
};

/// Linear warmup from warmup_start to base_lr, then cosine decay to 0 at
/// total_steps. Steps outside [0, total_steps] are a ContractError.
double lr_at(std::uint64_t step, const Schedule& schedule);

struct SgdState {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::vector<double>> velocity;
};

/// v <- mu v + g; p <- p - lr (v + wd p). Gradients are read from params.
void sgd_step(const std::vector<Tensor>& params, SgdState& state, double lr);

struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Bias-corrected adaptive moments with decoupled weight decay.
void adamw_step(const std::vector<Tensor>& params, AdamWState& state, double lr);

}  // namespace amimv
