#pragma once

#include <random>

#include "mx/gradcheck.hpp"
#include "mx/modules.hpp"

namespace mxtest {

// Direct six-nested-loop convolution, the reference the GEMM path is checked
// against. Deliberately naive and independent of ops.hpp internals.
template <typename S>
mx::Tensor<S> conv2d_loop_oracle(const mx::Tensor<S>& x, const mx::Tensor<S>& w, const mx::Tensor<S>& b,
                                 int stride, int pad) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const int Ho = (H + 2 * pad - Kh) / stride + 1;
  const int Wo = (W + 2 * pad - Kw) / stride + 1;
  mx::Tensor<S> y = mx::Tensor<S>::zeros({N, O, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo) {
          double acc = b.defined() ? static_cast<double>(b.array()[o]) : 0.0;
          for (int c = 0; c < C; ++c)
            for (int kh = 0; kh < Kh; ++kh)
              for (int kw = 0; kw < Kw; ++kw) {
                const int ih = ho * stride - pad + kh;
                const int iw = wo * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += static_cast<double>(x.array()[((static_cast<long long>(n) * C + c) * H + ih) * W + iw]) *
                       static_cast<double>(w.array()[((static_cast<long long>(o) * C + c) * Kh + kh) * Kw + kw]);
              }
          y.array()[((static_cast<long long>(n) * O + o) * Ho + ho) * Wo + wo] = static_cast<S>(acc);
        }
  return y;
}

inline mx::Tensor<float> randf(mx::Shape shape, unsigned seed, double stddev = 1.0) {
  std::mt19937 rng(seed);
  return mx::Tensor<float>::randn(std::move(shape), rng, stddev);
}

// Finite-difference check of a whole layer graph: analytic gradients from the
// S-typed module against central differences on a 64-bit twin built from the
// same seed. The loss is a fixed random weighting of the output so every
// output element matters.
template <typename S>
double grad_check_module(const mx::LayerGraph& graph, const mx::Shape& in_shape, unsigned seed,
                         double step, bool training) {
  using namespace mx;
  std::mt19937 rng_a(seed), rng_b(seed);
  Sequential<S> net_s(graph, rng_a);
  Sequential<double> net_d(graph, rng_b);
  net_s.set_training(training);
  net_d.set_training(training);

  Tensor<float> x0 = randf(in_shape, seed + 101, 0.7);
  Tensor<S> xs = x0.template cast<S>();
  xs.set_requires_grad(true);
  Tensor<double> xd = x0.cast<double>();

  Tensor<float> r0;  // output weighting, fixed after the first forward
  {
    NoGrad<S> guard;
    Tensor<S> y = net_s.forward(xs);
    r0 = randf(y.shape(), seed + 202, 1.0);
  }
  Tensor<S> rs = r0.template cast<S>();
  Tensor<double> rd = r0.cast<double>();

  std::vector<Tensor<S>> params_s;
  net_s.visit_params("", [&](const std::string&, Tensor<S>& t) { params_s.push_back(t); });
  std::vector<Tensor<double>> params_d;
  net_d.visit_params("", [&](const std::string&, Tensor<double>& t) { params_d.push_back(t); });

  std::vector<ArrayX<double>> analytic;
  {
    Tape<S> tape;
    Tensor<S> loss = mx::sum(mx::multiply(net_s.forward(xs), rs));
    tape.backward(loss);
    for (auto& p : params_s) {
      p.ensure_grad();
      analytic.push_back(p.grad().template cast<double>());
    }
    xs.ensure_grad();
    analytic.push_back(xs.grad().template cast<double>());
  }

  auto eval = [&]() {
    NoGrad<double> guard;
    return mx::sum(mx::multiply(net_d.forward(xd), rd)).item();
  };
  std::vector<Tensor<double>*> targets;
  for (auto& p : params_d) targets.push_back(&p);
  targets.push_back(&xd);

  double max_rel = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (long long e = 0; e < targets[i]->numel(); ++e) {
      const double orig = targets[i]->array()[e];
      targets[i]->array()[e] = orig + step;
      const double lp = eval();
      targets[i]->array()[e] = orig - step;
      const double lm = eval();
      targets[i]->array()[e] = orig;
      const double fd = (lp - lm) / (2.0 * step);
      const double a = analytic[i][e];
      max_rel = std::max(max_rel, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8}));
    }
  }
  return max_rel;
}

}  // namespace mxtest
