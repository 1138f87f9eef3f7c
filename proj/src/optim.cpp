#include "amimv/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "amimv/errors.hpp"

namespace amimv {

double scaled_base_lr(std::size_t batch_size) { return 0.75 * static_cast<double>(batch_size) / 256.0; }

std::uint64_t Schedule::warmup_steps() const {
  if (total_steps <= 1 || warmup_fraction <= 0.0) return 0;
  const auto w = static_cast<std::uint64_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  return std::min(w, total_steps - 1);
}

double lr_at(std::uint64_t step, const Schedule& s) {
  if (s.total_steps == 0) throw ContractError("schedule has no steps");
  if (step > s.total_steps)
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  const std::uint64_t warm = s.warmup_steps();
  if (step == s.total_steps) return 0.0;
  if (step < warm)
    return s.warmup_start + (s.base_lr - s.warmup_start) * static_cast<double>(step) / static_cast<double>(warm);
  const double u = static_cast<double>(step - warm) / static_cast<double>(s.total_steps - warm);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

namespace {

void ensure_buffers(std::vector<std::vector<double>>& buffers, const std::vector<Tensor>& params) {
  if (buffers.empty()) {
    for (const auto& p : params) buffers.emplace_back(p.numel(), 0.0);
    return;
  }
  if (buffers.size() != params.size()) throw ContractError("optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (buffers[i].size() != params[i].numel()) throw ContractError("optimizer state shape mismatch");
}

template <class Update>
void for_each_param(const std::vector<Tensor>& params, Update&& update) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    const Tensor g = p.grad();
    dispatch_dtype(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pd = p.mutable_data<T>();
      const auto gd = g.data<T>();
      for (std::size_t j = 0; j < pd.size(); ++j) {
        const double next = update(i, j, static_cast<double>(pd[j]), static_cast<double>(gd[j]));
        pd[j] = static_cast<T>(next);
      }
    });
  }
}

}  // namespace

void sgd_step(const std::vector<Tensor>& params, SgdState& state, double lr) {
  ensure_buffers(state.velocity, params);
  const double mu = state.momentum, wd = state.weight_decay;
  for_each_param(params, [&](std::size_t i, std::size_t j, double p, double g) {
    double& v = state.velocity[i][j];
    v = mu * v + g;
    return p - lr * (v + wd * p);
  });
}

void adamw_step(const std::vector<Tensor>& params, AdamWState& state, double lr) {
  ensure_buffers(state.m, params);
  ensure_buffers(state.v, params);
  ++state.t;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for_each_param(params, [&](std::size_t i, std::size_t j, double p, double g) {
    double& m = state.m[i][j];
    double& v = state.v[i][j];
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double m_hat = m / c1, v_hat = v / c2;
    return p - lr * (m_hat / (std::sqrt(v_hat) + state.eps) + state.weight_decay * p);
  });
}

}  // namespace amimv
