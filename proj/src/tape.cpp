#include "amimv/tape.hpp"

#include <algorithm>

namespace amimv {

namespace {

thread_local Tape* active_tape = nullptr;
thread_local bool grad_mode = true;

void ensure_grad(detail::TensorImpl& impl) {
  if (impl.grad) return;
  std::visit(
      [&](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        impl.grad_values<T>();
      },
      impl.data);
}

}  // namespace

Tape::Scope::Scope(Tape& tape) : previous_(active_tape) { active_tape = &tape; }

Tape::Scope::~Scope() { active_tape = previous_; }

Tape* Tape::active() { return active_tape; }

void Tape::record(std::string op, std::vector<ImplPtr> inputs, ImplPtr output,
                  std::function<void()> backward) {
  entries_.push_back(
      Entry{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }

NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

bool grad_enabled() { return grad_mode; }

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : "<undefined>"));
  const auto& entries = tape.entries();
  auto producer = std::find_if(entries.rbegin(), entries.rend(), [&](const auto& e) {
    return e.output == loss.impl();
  });
  if (producer == entries.rend())
    throw ContractError("backward: loss was not produced through this tape");

  // Intermediate grads start fresh; leaf grads accumulate across calls.
  for (auto it = producer; it != entries.rend(); ++it) it->output->grad.reset();
  auto& root = *loss.impl();
  std::visit(
      [&](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        root.grad_values<T>()[0] = T(1);
      },
      root.data);

  for (auto it = producer; it != entries.rend(); ++it) {
    if (it->output->grad) it->backward();
    for (const auto& input : it->inputs)
      if (input->requires_grad) ensure_grad(*input);
  }
}

}  // namespace amimv
