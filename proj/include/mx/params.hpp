#pragma once

#include <map>
#include <string>

#include "mx/tensor.hpp"

namespace mx {

// Named trainable parameters with momentum buffers and freeze flags. Names are
// unique and stage-scoped (e.g. "backbone.stage2.0.weight") so that the
// parameter set of exit i is a prefix-closed subset of that of exit j >= i.
template <typename Scalar>
class ParamSet {
 public:
  struct Entry {
    Tensor<Scalar> tensor;
    ArrayX<Scalar> momentum;
    bool frozen = false;
  };

  void add(const std::string& name, Tensor<Scalar> t) {
    require(t.defined(), "ParamSet::add: undefined tensor for '" + name + "'");
    auto [it, inserted] = entries_.emplace(name, Entry{std::move(t), {}, false});
    require(inserted, "ParamSet::add: duplicate parameter name '" + name + "'");
    it->second.tensor.set_requires_grad(true);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor<Scalar>& get(const std::string& name) {
    auto it = entries_.find(name);
    require(it != entries_.end(), "ParamSet: unknown parameter '" + name + "'");
    return it->second.tensor;
  }

  std::size_t size() const { return entries_.size(); }

  void set_frozen(const std::string& name, bool frozen) {
    auto it = entries_.find(name);
    require(it != entries_.end(), "ParamSet: unknown parameter '" + name + "'");
    it->second.frozen = frozen;
  }

  void freeze_all(bool frozen) {
    for (auto& [name, e] : entries_) {
      (void)name;
      e.frozen = frozen;
    }
  }

  // Freeze state applied to every parameter whose name starts with `prefix`.
  void set_frozen_prefix(const std::string& prefix, bool frozen) {
    for (auto& [name, e] : entries_)
      if (name.rfind(prefix, 0) == 0) e.frozen = frozen;
  }

  bool is_frozen(const std::string& name) const {
    auto it = entries_.find(name);
    require(it != entries_.end(), "ParamSet: unknown parameter '" + name + "'");
    return it->second.frozen;
  }

  void zero_grads() {
    for (auto& [name, e] : entries_) {
      (void)name;
      e.tensor.zero_grad();
    }
  }

  // Iteration is in sorted name order (map order), so updates are
  // deterministic.
  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& [name, e] : entries_) fn(name, e);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [name, e] : entries_) fn(name, e);
  }

 private:
  std::map<std::string, Entry> entries_;
};

// SGD with momentum and decoupled-from-nothing weight decay folded into the
// gradient: v <- momentum*v + (grad + weight_decay*w); w <- w - lr*v.
// Frozen parameters are untouched; a trainable parameter without a gradient
// is an error (it means backward never ran for it).
template <typename Scalar>
void sgd_step(ParamSet<Scalar>& params, Scalar lr, Scalar momentum, Scalar weight_decay) {
  require(lr >= Scalar(0), "sgd_step: learning rate must be non-negative");
  params.for_each([&](const std::string& name, typename ParamSet<Scalar>::Entry& e) {
    if (e.frozen) return;
    require(e.tensor.has_grad(), "sgd_step: missing grad on trainable param '" + name + "'");
    if (e.momentum.size() == 0) e.momentum = ArrayX<Scalar>::Zero(e.tensor.numel());
    e.momentum = momentum * e.momentum + (e.tensor.grad() + weight_decay * e.tensor.array());
    e.tensor.array() -= lr * e.momentum;
  });
}

}  // namespace mx
