#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "mx/tensor.hpp"

namespace mx {

// Per-pass gradient buffers. Gradients flow through these buffers during a
// backward pass and are added into each tensor's persistent grad at the end,
// so repeated backward calls accumulate (the documented contract) while
// upstream gradients read during the pass stay pass-local.
template <typename Scalar>
class GradStore {
 public:
  using Array = ArrayX<Scalar>;

  const Array* find(const Tensor<Scalar>& t) const {
    auto it = bufs_.find(t.storage_id());
    return it == bufs_.end() ? nullptr : &it->second.g;
  }

  Array& accum(const Tensor<Scalar>& t) {
    auto it = bufs_.find(t.storage_id());
    if (it == bufs_.end()) {
      it = bufs_.emplace(t.storage_id(), Slot{t, Array::Zero(t.numel())}).first;
    }
    return it->second.g;
  }

  // Ensures a zero buffer exists so that unreachable-but-recorded tensors end
  // the pass with an allocated zero gradient.
  void touch(const Tensor<Scalar>& t) {
    if (t.requires_grad()) accum(t);
  }

  void flush_to_persistent() {
    for (auto& [id, slot] : bufs_) {
      (void)id;
      slot.holder.ensure_grad() += slot.g;
    }
  }

 private:
  struct Slot {
    Tensor<Scalar> holder;  // keeps storage alive
    Array g;
  };
  std::unordered_map<const void*, Slot> bufs_;
};

// Ordered record of executed differentiable ops. Ops append themselves during
// the forward pass; backward() replays the record once, in reverse. A tape is
// active for the thread that constructed it and must not be shared across
// threads while live.
template <typename Scalar>
class Tape {
 public:
  using Node = std::function<void(GradStore<Scalar>&)>;

  Tape() { stack().push_back(this); }
  ~Tape() { stack().pop_back(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return stack().empty() ? nullptr : stack().back(); }

  void record(Node fn) { nodes_.push_back(std::move(fn)); }

  std::size_t num_ops() const { return nodes_.size(); }

  static void push_suspend() { stack().push_back(nullptr); }
  static void pop_suspend() { stack().pop_back(); }

  // Seeds d(loss)/d(loss) = 1 and visits every recorded op exactly once in
  // reverse order. Gradients of tensors not on the path to `loss` come out
  // zero (allocated). Accumulates into persistent grads without zeroing.
  void backward(const Tensor<Scalar>& loss) {
    require(loss.numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    GradStore<Scalar> gs;
    if (loss.requires_grad()) gs.accum(loss).setConstant(Scalar(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(gs);
    gs.flush_to_persistent();
  }

 private:
  static std::vector<Tape*>& stack() {
    static thread_local std::vector<Tape*> s;
    return s;
  }
  std::vector<Node> nodes_;
};

// Suspends recording on the current thread (used by evaluation passes,
// teacher ensembles and finite-difference re-execution).
template <typename Scalar>
class NoGrad {
 public:
  NoGrad() { Tape<Scalar>::push_suspend(); }
  ~NoGrad() { Tape<Scalar>::pop_suspend(); }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

}  // namespace mx
