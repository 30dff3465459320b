#pragma once

#include <vector>

#include "mx/ops.hpp"
#include "mx/params.hpp"

namespace mx {

// Compares analytic gradients against central finite differences. The closure
// is re-executed in 64-bit for the differencing side regardless of the scalar
// type used for the analytic side, which is what keeps tolerances tight when
// the model itself runs in 32-bit.
//
// The closure must be generic over the scalar type:
//   f(const std::vector<Tensor<T>>&) -> Tensor<T>   (rank-0 loss)
//
// Returns max over elements of |a - f| / max(|a|, |f|, 1e-8).
template <typename S, typename F>
double grad_check(F&& f, const std::vector<Tensor<S>>& inputs, double step = 1e-3) {
  // Analytic pass in S.
  std::vector<Tensor<S>> xs;
  xs.reserve(inputs.size());
  for (const auto& t : inputs) {
    Tensor<S> c = t.clone();
    c.set_requires_grad(true);
    xs.push_back(c);
  }
  std::vector<ArrayX<double>> analytic;
  {
    Tape<S> tape;
    Tensor<S> loss = f(xs);
    require(loss.numel() == 1, "grad_check: closure must produce a scalar loss");
    tape.backward(loss);
  }
  for (auto& x : xs) {
    x.ensure_grad();
    analytic.push_back(x.grad().template cast<double>());
  }

  // Finite differences in double.
  std::vector<Tensor<double>> xd;
  xd.reserve(inputs.size());
  for (const auto& t : inputs) xd.push_back(t.template cast<double>());
  auto eval = [&]() -> double {
    NoGrad<double> guard;
    return f(xd).item();
  };
  double max_rel = 0.0;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    for (long long e = 0; e < xd[i].numel(); ++e) {
      const double orig = xd[i].array()[e];
      xd[i].array()[e] = orig + step;
      const double lp = eval();
      xd[i].array()[e] = orig - step;
      const double lm = eval();
      xd[i].array()[e] = orig;
      const double fd = (lp - lm) / (2.0 * step);
      const double a = analytic[i][e];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace mx
