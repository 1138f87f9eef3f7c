#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "amimv/tensor.hpp"

namespace amimv {

/// Ordered record of differentiable operations for one training step.
///
/// Operations record themselves into the tape that is active on the calling
/// thread (see Tape::Scope) whenever gradient mode is on and at least one
/// input requires a gradient. backward() replays the entries in reverse.
class Tape {
 public:
  using ImplPtr = std::shared_ptr<detail::TensorImpl>;

  struct Entry {
    std::string op;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    // Reads output->grad and accumulates into the inputs' grads.
    std::function<void()> backward;
  };

  /// Makes a tape the active recorder for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string op, std::vector<ImplPtr> inputs, ImplPtr output,
              std::function<void()> backward);

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  static Tape* active();

 private:
  std::vector<Entry> entries_;
};

/// Disables recording for its lifetime; outputs computed inside carry the
/// no-gradient marker.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Populates grad of every requires_grad tensor that reaches `loss` through
/// `tape`. Leaves recorded on the tape but unreachable from the loss end up
/// with an all-zero grad.
void backward(const Tensor& loss, Tape& tape);

}  // namespace amimv
