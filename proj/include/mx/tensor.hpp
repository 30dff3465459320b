#pragma once

#include <memory>
#include <optional>
#include <random>
#include <utility>

#include "mx/common.hpp"

namespace mx {

// Dense row-major tensor with optional gradient storage. Copies are shallow:
// a Tensor is a handle to shared storage, so ops can retain their inputs for
// the backward pass without copying data. Storage produced by an op is never
// mutated afterwards; parameter updates happen through the same handle once
// the recording tape is gone.
template <typename Scalar>
class Tensor {
 public:
  using Array = ArrayX<Scalar>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t(std::move(shape));
    t.s_->data.setZero();
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, Scalar value, bool requires_grad = false) {
    Tensor t(std::move(shape));
    t.s_->data.setConstant(value);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(Scalar value) { return full({}, value); }

  static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false) {
    Tensor t(std::move(shape));
    require(static_cast<long long>(values.size()) == t.numel(),
            "tensor: value count " + std::to_string(values.size()) + " does not match shape " +
                shape_str(t.shape()));
    for (long long i = 0; i < t.numel(); ++i) t.s_->data[i] = values[static_cast<std::size_t>(i)];
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Shape shape, std::mt19937& rng, double stddev = 1.0, bool requires_grad = false) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (long long i = 0; i < t.numel(); ++i) t.s_->data[i] = static_cast<Scalar>(static_cast<float>(dist(rng)));
    t.s_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  long long numel() const { return s_->data.size(); }

  Array& array() { return s_->data; }
  const Array& array() const { return s_->data; }
  Scalar* data() { return s_->data.data(); }
  const Scalar* data() const { return s_->data.data(); }

  Scalar item() const {
    require(numel() == 1, "item(): tensor is not scalar, shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  bool is_leaf() const { return s_->is_leaf; }

  Tensor& set_requires_grad(bool v) {
    s_->requires_grad = v;
    return *this;
  }

  // Marks this tensor as the output of a recorded op.
  void mark_graph_output() {
    s_->requires_grad = true;
    s_->is_leaf = false;
  }

  bool has_grad() const { return s_->grad.has_value(); }

  Array& grad() {
    require(has_grad(), "grad(): no gradient allocated");
    return *s_->grad;
  }
  const Array& grad() const {
    require(has_grad(), "grad(): no gradient allocated");
    return *s_->grad;
  }

  Array& ensure_grad() {
    if (!s_->grad) s_->grad.emplace(Array::Zero(s_->data.size()));
    return *s_->grad;
  }

  void zero_grad() {
    if (s_->grad) s_->grad->setZero();
  }

  // Deep copy with no gradient tracking; cuts any graph connection.
  Tensor detach() const {
    Tensor t(shape());
    t.s_->data = s_->data;
    return t;
  }

  // Deep copy preserving the requires_grad flag (result is a fresh leaf).
  Tensor clone() const {
    Tensor t(shape());
    t.s_->data = s_->data;
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  template <typename T2>
  Tensor<T2> cast() const {
    Tensor<T2> t = Tensor<T2>::zeros(shape());
    for (long long i = 0; i < numel(); ++i) t.array()[i] = static_cast<T2>(s_->data[i]);
    return t;
  }

  // Stable identity for gradient bookkeeping.
  const void* storage_id() const { return s_.get(); }

 private:
  struct Storage {
    explicit Storage(Shape sh) : shape(std::move(sh)) {
      for (int d : shape) require(d >= 0, "tensor: negative extent in shape " + shape_str(shape));
      data.resize(static_cast<Eigen::Index>(mx::numel(shape)));
    }
    Shape shape;
    Array data;
    std::optional<Array> grad;
    bool requires_grad = false;
    bool is_leaf = true;
  };

  explicit Tensor(Shape shape) : s_(std::make_shared<Storage>(std::move(shape))) {}

  std::shared_ptr<Storage> s_;
};

}  // namespace mx
