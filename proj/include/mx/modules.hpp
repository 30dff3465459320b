#pragma once

#include <functional>
#include <memory>
#include <random>
#include <string>

#include "mx/layers.hpp"
#include "mx/ops.hpp"
#include "mx/params.hpp"

namespace mx {

// Runtime counterparts of the layer specs. Modules own parameter tensors
// (shared handles, so an optimizer sees updates immediately) and are built
// from the same specs the cost model reads.
//
// Initialization draws are made in float and cast to the module scalar, so a
// float and a double module built from the same seed sit at the same point.

template <typename S>
using StateVisitor = std::function<void(const std::string&, Tensor<S>&)>;

template <typename S>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<S> forward(const Tensor<S>& x) = 0;
  // Trainable parameters only.
  virtual void visit_params(const std::string& prefix, const StateVisitor<S>& fn) = 0;
  // Parameters plus persistent buffers (running statistics); checkpoint state.
  virtual void visit_state(const std::string& prefix, const StateVisitor<S>& fn) { visit_params(prefix, fn); }
  virtual void set_training(bool) {}
};

namespace detail {

template <typename S>
Tensor<S> he_normal(Shape shape, long long fan_in, std::mt19937& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (long long i = 0; i < t.numel(); ++i) t.array()[i] = static_cast<S>(static_cast<float>(dist(rng)));
  return t;
}

}  // namespace detail

template <typename S>
class Conv2d : public Module<S> {
 public:
  Conv2d(const ConvSpec& spec, std::mt19937& rng)
      : spec_(spec),
        weight(detail::he_normal<S>({spec.out_ch, spec.in_ch, spec.kernel, spec.kernel},
                                    static_cast<long long>(spec.in_ch) * spec.kernel * spec.kernel, rng)) {
    if (spec.bias) bias = Tensor<S>::zeros({spec.out_ch});
  }
  Tensor<S> forward(const Tensor<S>& x) override {
    return conv2d(x, weight, bias, spec_.stride, spec_.padding);
  }
  void visit_params(const std::string& prefix, const StateVisitor<S>& fn) override {
    fn(prefix + "weight", weight);
    if (bias.defined()) fn(prefix + "bias", bias);
  }

  ConvSpec spec_;
  Tensor<S> weight, bias;
};

template <typename S>
class BatchNorm2d : public Module<S> {
 public:
  explicit BatchNorm2d(const BatchNormSpec& spec)
      : gamma(Tensor<S>::full({spec.channels}, S(1))),
        beta(Tensor<S>::zeros({spec.channels})),
        running_mean(Tensor<S>::zeros({spec.channels})),
        running_var(Tensor<S>::full({spec.channels}, S(1))) {}
  Tensor<S> forward(const Tensor<S>& x) override {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, training_, eps, momentum);
  }
  void visit_params(const std::string& prefix, const StateVisitor<S>& fn) override {
    fn(prefix + "gamma", gamma);
    fn(prefix + "beta", beta);
  }
  void visit_state(const std::string& prefix, const StateVisitor<S>& fn) override {
    visit_params(prefix, fn);
    fn(prefix + "running_mean", running_mean);
    fn(prefix + "running_var", running_var);
  }
  void set_training(bool t) override { training_ = t; }

  Tensor<S> gamma, beta, running_mean, running_var;
  S eps = S(1e-5);
  S momentum = S(0.1);
  bool training_ = true;
};

template <typename S>
class ReLULayer : public Module<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x) override { return relu(x); }
  void visit_params(const std::string&, const StateVisitor<S>&) override {}
};

template <typename S>
class MaxPool2d : public Module<S> {
 public:
  explicit MaxPool2d(const MaxPoolSpec& spec) : spec_(spec) {}
  Tensor<S> forward(const Tensor<S>& x) override {
    return maxpool2d(x, spec_.kernel, spec_.stride, spec_.padding);
  }
  void visit_params(const std::string&, const StateVisitor<S>&) override {}
  MaxPoolSpec spec_;
};

template <typename S>
class GlobalAvgPoolLayer : public Module<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x) override { return global_avg_pool(x); }
  void visit_params(const std::string&, const StateVisitor<S>&) override {}
};

template <typename S>
class FlattenLayer : public Module<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x) override {
    require(x.ndim() == 4, "flatten: input must be 4-D");
    return reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2) * x.dim(3)});
  }
  void visit_params(const std::string&, const StateVisitor<S>&) override {}
};

template <typename S>
class Linear : public Module<S> {
 public:
  Linear(const LinearSpec& spec, std::mt19937& rng)
      : weight(detail::he_normal<S>({spec.out_features, spec.in_features}, spec.in_features, rng)) {
    if (spec.bias) bias = Tensor<S>::zeros({spec.out_features});
  }
  Tensor<S> forward(const Tensor<S>& x) override { return linear(x, weight, bias); }
  void visit_params(const std::string& prefix, const StateVisitor<S>& fn) override {
    fn(prefix + "weight", weight);
    if (bias.defined()) fn(prefix + "bias", bias);
  }
  Tensor<S> weight, bias;
};

// Bottleneck trunk (1x1 reduce, 3x3, 1x1 expand, each with BN), an SE gate on
// the expanded features, a projection shortcut when the shape changes, and the
// post-add ReLU.
template <typename S>
class SEBottleneck : public Module<S> {
 public:
  SEBottleneck(const SEBottleneckSpec& spec, std::mt19937& rng)
      : spec_(spec),
        conv_reduce(ConvSpec{spec.in_ch, spec.out_ch / 4, 1, 1, 0, false}, rng),
        bn_reduce(BatchNormSpec{spec.out_ch / 4}),
        conv_spatial(ConvSpec{spec.out_ch / 4, spec.out_ch / 4, 3, spec.stride, 1, false}, rng),
        bn_spatial(BatchNormSpec{spec.out_ch / 4}),
        conv_expand(ConvSpec{spec.out_ch / 4, spec.out_ch, 1, 1, 0, false}, rng),
        bn_expand(BatchNormSpec{spec.out_ch}),
        se_fc1(LinearSpec{spec.out_ch, spec.out_ch / spec.se_ratio, true}, rng),
        se_fc2(LinearSpec{spec.out_ch / spec.se_ratio, spec.out_ch, true}, rng) {
    if (spec.stride != 1 || spec.in_ch != spec.out_ch) {
      proj_conv = std::make_unique<Conv2d<S>>(ConvSpec{spec.in_ch, spec.out_ch, 3, spec.stride, 1, false}, rng);
      proj_bn = std::make_unique<BatchNorm2d<S>>(BatchNormSpec{spec.out_ch});
    }
  }

  Tensor<S> trunk(const Tensor<S>& x) {
    Tensor<S> t = relu(bn_reduce.forward(conv_reduce.forward(x)));
    t = relu(bn_spatial.forward(conv_spatial.forward(t)));
    return bn_expand.forward(conv_expand.forward(t));
  }

  Tensor<S> gate(const Tensor<S>& t) {
    Tensor<S> s = global_avg_pool(t);
    s = relu(se_fc1.forward(s));
    return sigmoid(se_fc2.forward(s));
  }

  Tensor<S> forward(const Tensor<S>& x) override {
    Tensor<S> t = trunk(x);
    t = channelwise_multiply(t, gate(t));
    Tensor<S> sc = proj_conv ? proj_bn->forward(proj_conv->forward(x)) : x;
    return relu(add(t, sc));
  }

  void visit_params(const std::string& p, const StateVisitor<S>& fn) override {
    conv_reduce.visit_params(p + "conv_reduce.", fn);
    bn_reduce.visit_params(p + "bn_reduce.", fn);
    conv_spatial.visit_params(p + "conv_spatial.", fn);
    bn_spatial.visit_params(p + "bn_spatial.", fn);
    conv_expand.visit_params(p + "conv_expand.", fn);
    bn_expand.visit_params(p + "bn_expand.", fn);
    se_fc1.visit_params(p + "se_fc1.", fn);
    se_fc2.visit_params(p + "se_fc2.", fn);
    if (proj_conv) {
      proj_conv->visit_params(p + "proj_conv.", fn);
      proj_bn->visit_params(p + "proj_bn.", fn);
    }
  }
  void visit_state(const std::string& p, const StateVisitor<S>& fn) override {
    conv_reduce.visit_state(p + "conv_reduce.", fn);
    bn_reduce.visit_state(p + "bn_reduce.", fn);
    conv_spatial.visit_state(p + "conv_spatial.", fn);
    bn_spatial.visit_state(p + "bn_spatial.", fn);
    conv_expand.visit_state(p + "conv_expand.", fn);
    bn_expand.visit_state(p + "bn_expand.", fn);
    se_fc1.visit_state(p + "se_fc1.", fn);
    se_fc2.visit_state(p + "se_fc2.", fn);
    if (proj_conv) {
      proj_conv->visit_state(p + "proj_conv.", fn);
      proj_bn->visit_state(p + "proj_bn.", fn);
    }
  }
  void set_training(bool t) override {
    bn_reduce.set_training(t);
    bn_spatial.set_training(t);
    bn_expand.set_training(t);
    if (proj_bn) proj_bn->set_training(t);
  }

  SEBottleneckSpec spec_;
  Conv2d<S> conv_reduce;
  BatchNorm2d<S> bn_reduce;
  Conv2d<S> conv_spatial;
  BatchNorm2d<S> bn_spatial;
  Conv2d<S> conv_expand;
  BatchNorm2d<S> bn_expand;
  Linear<S> se_fc1, se_fc2;
  std::unique_ptr<Conv2d<S>> proj_conv;
  std::unique_ptr<BatchNorm2d<S>> proj_bn;
};

template <typename S>
class BasicBlock : public Module<S> {
 public:
  BasicBlock(const BasicBlockSpec& spec, std::mt19937& rng)
      : conv1(ConvSpec{spec.in_ch, spec.out_ch, 3, spec.stride, 1, false}, rng),
        bn1(BatchNormSpec{spec.out_ch}),
        conv2(ConvSpec{spec.out_ch, spec.out_ch, 3, 1, 1, false}, rng),
        bn2(BatchNormSpec{spec.out_ch}) {
    if (spec.stride != 1 || spec.in_ch != spec.out_ch) {
      proj_conv = std::make_unique<Conv2d<S>>(ConvSpec{spec.in_ch, spec.out_ch, 1, spec.stride, 0, false}, rng);
      proj_bn = std::make_unique<BatchNorm2d<S>>(BatchNormSpec{spec.out_ch});
    }
  }
  Tensor<S> forward(const Tensor<S>& x) override {
    Tensor<S> t = relu(bn1.forward(conv1.forward(x)));
    t = bn2.forward(conv2.forward(t));
    Tensor<S> sc = proj_conv ? proj_bn->forward(proj_conv->forward(x)) : x;
    return relu(add(t, sc));
  }
  void visit_params(const std::string& p, const StateVisitor<S>& fn) override {
    conv1.visit_params(p + "conv1.", fn);
    bn1.visit_params(p + "bn1.", fn);
    conv2.visit_params(p + "conv2.", fn);
    bn2.visit_params(p + "bn2.", fn);
    if (proj_conv) {
      proj_conv->visit_params(p + "proj_conv.", fn);
      proj_bn->visit_params(p + "proj_bn.", fn);
    }
  }
  void visit_state(const std::string& p, const StateVisitor<S>& fn) override {
    conv1.visit_state(p + "conv1.", fn);
    bn1.visit_state(p + "bn1.", fn);
    conv2.visit_state(p + "conv2.", fn);
    bn2.visit_state(p + "bn2.", fn);
    if (proj_conv) {
      proj_conv->visit_state(p + "proj_conv.", fn);
      proj_bn->visit_state(p + "proj_bn.", fn);
    }
  }
  void set_training(bool t) override {
    bn1.set_training(t);
    bn2.set_training(t);
    if (proj_bn) proj_bn->set_training(t);
  }

  Conv2d<S> conv1;
  BatchNorm2d<S> bn1;
  Conv2d<S> conv2;
  BatchNorm2d<S> bn2;
  std::unique_ptr<Conv2d<S>> proj_conv;
  std::unique_ptr<BatchNorm2d<S>> proj_bn;
};

template <typename S>
std::unique_ptr<Module<S>> build_module(const LayerSpec& spec, std::mt19937& rng) {
  return std::visit(
      [&rng](const auto& s) -> std::unique_ptr<Module<S>> {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, ConvSpec>) return std::make_unique<Conv2d<S>>(s, rng);
        else if constexpr (std::is_same_v<T, BatchNormSpec>) return std::make_unique<BatchNorm2d<S>>(s);
        else if constexpr (std::is_same_v<T, ReluSpec>) return std::make_unique<ReLULayer<S>>();
        else if constexpr (std::is_same_v<T, MaxPoolSpec>) return std::make_unique<MaxPool2d<S>>(s);
        else if constexpr (std::is_same_v<T, GlobalAvgPoolSpec>) return std::make_unique<GlobalAvgPoolLayer<S>>();
        else if constexpr (std::is_same_v<T, FlattenSpec>) return std::make_unique<FlattenLayer<S>>();
        else if constexpr (std::is_same_v<T, LinearSpec>) return std::make_unique<Linear<S>>(s, rng);
        else if constexpr (std::is_same_v<T, SEBottleneckSpec>) return std::make_unique<SEBottleneck<S>>(s, rng);
        else return std::make_unique<BasicBlock<S>>(s, rng);
      },
      spec);
}

// Ordered composition of modules; children are named by position. Forward
// invocations are counted, which the exit-cost contract tests use to show
// that untouched stages execute nothing.
template <typename S>
class Sequential : public Module<S> {
 public:
  Sequential() = default;
  Sequential(const LayerGraph& graph, std::mt19937& rng) {
    for (const auto& l : graph) children.push_back(build_module<S>(l, rng));
  }
  Tensor<S> forward(const Tensor<S>& x) override {
    ++forward_calls;
    Tensor<S> cur = x;
    for (auto& c : children) cur = c->forward(cur);
    return cur;
  }
  void visit_params(const std::string& p, const StateVisitor<S>& fn) override {
    for (std::size_t i = 0; i < children.size(); ++i)
      children[i]->visit_params(p + std::to_string(i) + ".", fn);
  }
  void visit_state(const std::string& p, const StateVisitor<S>& fn) override {
    for (std::size_t i = 0; i < children.size(); ++i)
      children[i]->visit_state(p + std::to_string(i) + ".", fn);
  }
  void set_training(bool t) override {
    for (auto& c : children) c->set_training(t);
  }

  std::vector<std::unique_ptr<Module<S>>> children;
  long long forward_calls = 0;
};

}  // namespace mx
