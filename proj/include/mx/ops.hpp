#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "mx/tape.hpp"

namespace mx {

// Free-function tensor ops. Each op validates shapes, computes the forward
// result and, when a tape is active and an input requires grad, records a
// closure that routes upstream gradients to its inputs. All ops reject
// non-finite outputs; NaN/Inf is an error state, never propagated silently.

namespace detail {

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
  if (!t.array().isFinite().all())
    throw std::runtime_error(std::string(op) + ": produced non-finite values");
}

template <typename S>
bool recording(std::initializer_list<const Tensor<S>*> inputs) {
  if (Tape<S>::current() == nullptr) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// im2col for one sample: input plane (C,H,W) row-major -> col (C*Kh*Kw rows,
// Ho*Wo columns), written row-major with an outer row pitch so a batch can
// share one matrix. Out-of-range taps are zero.
template <typename S>
void im2col(const S* x, int C, int H, int W, int Kh, int Kw, int stride, int pad, int Ho, int Wo,
            S* col, long long row_pitch) {
  const long long P = static_cast<long long>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    const S* xc = x + static_cast<long long>(c) * H * W;
    for (int kh = 0; kh < Kh; ++kh) {
      for (int kw = 0; kw < Kw; ++kw) {
        const long long r = (static_cast<long long>(c) * Kh + kh) * Kw + kw;
        S* out = col + r * row_pitch;
        for (int ho = 0; ho < Ho; ++ho) {
          const int ih = ho * stride - pad + kh;
          S* orow = out + static_cast<long long>(ho) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(orow, orow + Wo, S(0));
            continue;
          }
          const S* xrow = xc + static_cast<long long>(ih) * W;
          // valid wo range: 0 <= wo*stride - pad + kw < W
          int wo_lo = 0;
          const int off = kw - pad;
          if (off < 0) wo_lo = (-off + stride - 1) / stride;
          int wo_hi = Wo;
          if (off + (Wo - 1) * stride >= W) wo_hi = (W - off + stride - 1) / stride;
          if (wo_hi < wo_lo) wo_hi = wo_lo;
          std::fill(orow, orow + wo_lo, S(0));
          if (stride == 1) {
            std::memcpy(orow + wo_lo, xrow + off + wo_lo, sizeof(S) * static_cast<std::size_t>(wo_hi - wo_lo));
          } else {
            for (int wo = wo_lo; wo < wo_hi; ++wo) orow[wo] = xrow[off + wo * stride];
          }
          std::fill(orow + wo_hi, orow + Wo, S(0));
          (void)P;
        }
      }
    }
  }
}

// Transpose of im2col: scatter-adds col gradients back into the input plane.
template <typename S>
void col2im(const S* col, long long row_pitch, int C, int H, int W, int Kh, int Kw, int stride, int pad,
            int Ho, int Wo, S* dx) {
  for (int c = 0; c < C; ++c) {
    S* xc = dx + static_cast<long long>(c) * H * W;
    for (int kh = 0; kh < Kh; ++kh) {
      for (int kw = 0; kw < Kw; ++kw) {
        const long long r = (static_cast<long long>(c) * Kh + kh) * Kw + kw;
        const S* in = col + r * row_pitch;
        for (int ho = 0; ho < Ho; ++ho) {
          const int ih = ho * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          const S* irow = in + static_cast<long long>(ho) * Wo;
          S* xrow = xc + static_cast<long long>(ih) * W;
          const int off = kw - pad;
          int wo_lo = 0;
          if (off < 0) wo_lo = (-off + stride - 1) / stride;
          int wo_hi = Wo;
          if (off + (Wo - 1) * stride >= W) wo_hi = (W - off + stride - 1) / stride;
          if (wo_hi < wo_lo) wo_hi = wo_lo;
          for (int wo = wo_lo; wo < wo_hi; ++wo) xrow[off + wo * stride] += irow[wo];
        }
      }
    }
  }
}

// Builds the (C*Kh*Kw) x (N*P) row-major patch matrix for a whole batch.
template <typename S>
MatRM<S> im2col_batch(const Tensor<S>& x, int Kh, int Kw, int stride, int pad, int Ho, int Wo) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long long P = static_cast<long long>(Ho) * Wo;
  const long long rows = static_cast<long long>(C) * Kh * Kw;
  MatRM<S> col(rows, N * P);
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + static_cast<long long>(n) * C * H * W, C, H, W, Kh, Kw, stride, pad, Ho, Wo,
           col.data() + static_cast<long long>(n) * P, col.cols());
  }
  return col;
}

}  // namespace detail

// --- convolution ------------------------------------------------------------

// 2-D convolution over NCHW input with OIKK weights. Output spatial extent is
// floor((H + 2*padding - K)/stride) + 1 per axis.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias, int stride,
                 int padding) {
  require(input.defined() && input.ndim() == 4,
          "conv2d: input must be 4-D NCHW, got " + (input.defined() ? shape_str(input.shape()) : "undefined"));
  require(weight.defined() && weight.ndim() == 4,
          "conv2d: weight must be 4-D OIKK, got " + (weight.defined() ? shape_str(weight.shape()) : "undefined"));
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int O = weight.dim(0), I = weight.dim(1), Kh = weight.dim(2), Kw = weight.dim(3);
  require(C == I, "conv2d: input channels " + std::to_string(C) + " do not match weight input channels " +
                      std::to_string(I));
  require(stride >= 1, "conv2d: stride must be positive, got " + std::to_string(stride));
  require(padding >= 0, "conv2d: padding must be non-negative, got " + std::to_string(padding));
  require(H + 2 * padding >= Kh && W + 2 * padding >= Kw,
          "conv2d: kernel " + std::to_string(Kh) + "x" + std::to_string(Kw) + " does not fit padded input " +
              std::to_string(H + 2 * padding) + "x" + std::to_string(W + 2 * padding));
  if (bias.defined())
    require(bias.ndim() == 1 && bias.dim(0) == O,
            "conv2d: bias shape " + shape_str(bias.shape()) + " does not match output channels " +
                std::to_string(O));
  const int Ho = (H + 2 * padding - Kh) / stride + 1;
  const int Wo = (W + 2 * padding - Kw) / stride + 1;
  const long long P = static_cast<long long>(Ho) * Wo;
  const long long CKK = static_cast<long long>(C) * Kh * Kw;

  Tensor<S> y = Tensor<S>::zeros({N, O, Ho, Wo});
  {
    MatRM<S> col = detail::im2col_batch(input, Kh, Kw, stride, padding, Ho, Wo);
    Eigen::Map<const MatRM<S>> Wm(weight.data(), O, CKK);
    MatRM<S> yall(O, static_cast<long long>(N) * P);
    yall.noalias() = Wm * col;
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> b(bias.data(), O);
      yall.colwise() += b;
    }
    for (int n = 0; n < N; ++n) {
      Eigen::Map<MatRM<S>> yn(y.data() + static_cast<long long>(n) * O * P, O, P);
      yn = yall.middleCols(static_cast<long long>(n) * P, P);
    }
  }
  detail::check_finite(y, "conv2d");

  if (detail::recording<S>({&input, &weight, &bias})) {
    y.mark_graph_output();
    Tensor<S> xs = input, ws = weight, bs = bias, ys = y;
    Tape<S>::current()->record([xs, ws, bs, ys, stride, padding, N, C, H, W, O, Kh, Kw, Ho, Wo, P,
                                CKK](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        gs.touch(ws);
        if (bs.defined()) gs.touch(bs);
        return;
      }
      MatRM<S> gyall(O, static_cast<long long>(N) * P);
      for (int n = 0; n < N; ++n)
        gyall.middleCols(static_cast<long long>(n) * P, P) =
            Eigen::Map<const MatRM<S>>(gy->data() + static_cast<long long>(n) * O * P, O, P);
      if (bs.defined() && bs.requires_grad()) {
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(gs.accum(bs).data(), O);
        gb += gyall.rowwise().sum();
      }
      if (ws.requires_grad() || xs.requires_grad()) {
        Eigen::Map<const MatRM<S>> Wm(ws.data(), O, CKK);
        if (ws.requires_grad() || xs.requires_grad()) {
          MatRM<S> col = detail::im2col_batch(xs, Kh, Kw, stride, padding, Ho, Wo);
          if (ws.requires_grad()) {
            Eigen::Map<MatRM<S>> gw(gs.accum(ws).data(), O, CKK);
            gw.noalias() += gyall * col.transpose();
          }
          if (xs.requires_grad()) {
            MatRM<S> gcol(CKK, static_cast<long long>(N) * P);
            gcol.noalias() = Wm.transpose() * gyall;
            auto& gx = gs.accum(xs);
            for (int n = 0; n < N; ++n)
              detail::col2im(gcol.data() + static_cast<long long>(n) * P, gcol.cols(), C, H, W, Kh, Kw,
                             stride, padding, Ho, Wo,
                             gx.data() + static_cast<long long>(n) * C * H * W);
          }
        }
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, int stride, int padding) {
  return conv2d(input, weight, Tensor<S>(), stride, padding);
}

// --- batch normalization ----------------------------------------------------

// 2-D batch norm. Train mode normalizes with batch statistics and updates the
// running buffers by exponential moving average (unbiased variance); eval mode
// normalizes with the running buffers. Train mode needs batch size >= 2.
template <typename S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                      S eps = S(1e-5), S momentum = S(0.1)) {
  require(x.defined() && x.ndim() == 4, "batchnorm2d: input must be 4-D NCHW");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gamma.ndim() == 1 && gamma.dim(0) == C,
          "batchnorm2d: gamma shape " + shape_str(gamma.shape()) + " does not match channels " + std::to_string(C));
  require(beta.ndim() == 1 && beta.dim(0) == C, "batchnorm2d: beta shape mismatch");
  require(running_mean.dim(0) == C && running_var.dim(0) == C, "batchnorm2d: running stat shape mismatch");
  require(!training || N >= 2, "batchnorm2d: train mode requires batch size >= 2, got " + std::to_string(N));

  const long long HW = static_cast<long long>(H) * W;
  const long long count = static_cast<long long>(N) * HW;
  ArrayX<S> mean(C), istd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < N; ++n) {
        Eigen::Map<const ArrayX<S>> plane(x.data() + (static_cast<long long>(n) * C + c) * HW, HW);
        sum += static_cast<double>(plane.template cast<double>().sum());
        sq += static_cast<double>(plane.template cast<double>().square().sum());
      }
      const double m = sum / static_cast<double>(count);
      double var = sq / static_cast<double>(count) - m * m;
      if (var < 0) var = 0;
      mean[c] = static_cast<S>(m);
      istd[c] = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      running_mean.array()[c] = (S(1) - momentum) * running_mean.array()[c] + momentum * static_cast<S>(m);
      running_var.array()[c] = (S(1) - momentum) * running_var.array()[c] + momentum * static_cast<S>(unbiased);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.array()[c];
      istd[c] = S(1) / static_cast<S>(std::sqrt(static_cast<double>(running_var.array()[c]) + static_cast<double>(eps)));
    }
  }

  Tensor<S> y = Tensor<S>::zeros({N, C, H, W});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      Eigen::Map<const ArrayX<S>> xin(x.data() + (static_cast<long long>(n) * C + c) * HW, HW);
      Eigen::Map<ArrayX<S>> out(y.data() + (static_cast<long long>(n) * C + c) * HW, HW);
      out = (xin - mean[c]) * istd[c] * gamma.array()[c] + beta.array()[c];
    }
  }
  detail::check_finite(y, "batchnorm2d");

  if (detail::recording<S>({&x, &gamma, &beta})) {
    y.mark_graph_output();
    Tensor<S> xs = x, gs_t = gamma, bs = beta, ys = y;
    Tape<S>::current()->record([xs, gs_t, bs, ys, mean, istd, training, N, C, HW, count](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        gs.touch(gs_t);
        gs.touch(bs);
        return;
      }
      ArrayX<S> sum_gy = ArrayX<S>::Zero(C), sum_gy_xhat = ArrayX<S>::Zero(C);
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          Eigen::Map<const ArrayX<S>> xin(xs.data() + (static_cast<long long>(n) * C + c) * HW, HW);
          Eigen::Map<const ArrayX<S>> g(gy->data() + (static_cast<long long>(n) * C + c) * HW, HW);
          sum_gy[c] += g.sum();
          sum_gy_xhat[c] += (g * (xin - mean[c]) * istd[c]).sum();
        }
      }
      if (bs.requires_grad()) gs.accum(bs) += sum_gy;
      if (gs_t.requires_grad()) gs.accum(gs_t) += sum_gy_xhat;
      if (xs.requires_grad()) {
        auto& gx = gs.accum(xs);
        for (int n = 0; n < N; ++n) {
          for (int c = 0; c < C; ++c) {
            Eigen::Map<const ArrayX<S>> xin(xs.data() + (static_cast<long long>(n) * C + c) * HW, HW);
            Eigen::Map<const ArrayX<S>> g(gy->data() + (static_cast<long long>(n) * C + c) * HW, HW);
            Eigen::Map<ArrayX<S>> gxp(gx.data() + (static_cast<long long>(n) * C + c) * HW, HW);
            if (training) {
              const S inv_count = S(1) / static_cast<S>(count);
              gxp += gs_t.array()[c] * istd[c] *
                     (g - inv_count * sum_gy[c] - (xin - mean[c]) * istd[c] * inv_count * sum_gy_xhat[c]);
            } else {
              gxp += g * gs_t.array()[c] * istd[c];
            }
          }
        }
      }
    });
  }
  return y;
}

// --- elementwise and pooling family ------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  y.array() = x.array().max(S(0));
  if (detail::recording<S>({&x})) {
    y.mark_graph_output();
    Tensor<S> xs = x, ys = y;
    Tape<S>::current()->record([xs, ys](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        return;
      }
      if (xs.requires_grad()) gs.accum(xs) += (xs.array() > S(0)).select(*gy, ArrayX<S>::Zero(gy->size()));
    });
  }
  return y;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  y.array() = (S(1) + (-x.array()).exp()).inverse();
  detail::check_finite(y, "sigmoid");
  if (detail::recording<S>({&x})) {
    y.mark_graph_output();
    Tensor<S> xs = x, ys = y;
    Tape<S>::current()->record([xs, ys](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        return;
      }
      if (xs.requires_grad()) gs.accum(xs) += *gy * ys.array() * (S(1) - ys.array());
    });
  }
  return y;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  y.array() = a.array() + b.array();
  detail::check_finite(y, "add");
  if (detail::recording<S>({&a, &b})) {
    y.mark_graph_output();
    Tensor<S> as = a, bs = b, ys = y;
    Tape<S>::current()->record([as, bs, ys](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(as);
        gs.touch(bs);
        return;
      }
      if (as.requires_grad()) gs.accum(as) += *gy;
      if (bs.requires_grad()) gs.accum(bs) += *gy;
    });
  }
  return y;
}

template <typename S>
Tensor<S> multiply(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(),
          "multiply: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  y.array() = a.array() * b.array();
  detail::check_finite(y, "multiply");
  if (detail::recording<S>({&a, &b})) {
    y.mark_graph_output();
    Tensor<S> as = a, bs = b, ys = y;
    Tape<S>::current()->record([as, bs, ys](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(as);
        gs.touch(bs);
        return;
      }
      if (as.requires_grad()) gs.accum(as) += *gy * bs.array();
      if (bs.requires_grad()) gs.accum(bs) += *gy * as.array();
    });
  }
  return y;
}

template <typename S>
Tensor<S> scalar_multiply(const Tensor<S>& x, S c) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  y.array() = x.array() * c;
  detail::check_finite(y, "scalar_multiply");
  if (detail::recording<S>({&x})) {
    y.mark_graph_output();
    Tensor<S> xs = x, ys = y;
    Tape<S>::current()->record([xs, ys, c](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        return;
      }
      if (xs.requires_grad()) gs.accum(xs) += *gy * c;
    });
  }
  return y;
}

// Per-(sample, channel) gating: x is NCHW, gate is NxC.
template <typename S>
Tensor<S> channelwise_multiply(const Tensor<S>& x, const Tensor<S>& gate) {
  require(x.ndim() == 4, "channelwise_multiply: x must be 4-D NCHW");
  require(gate.ndim() == 2 && gate.dim(0) == x.dim(0) && gate.dim(1) == x.dim(1),
          "channelwise_multiply: gate shape " + shape_str(gate.shape()) + " does not match input " +
              shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const long long HW = static_cast<long long>(x.dim(2)) * x.dim(3);
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      Eigen::Map<const ArrayX<S>> xin(x.data() + (static_cast<long long>(n) * C + c) * HW, HW);
      Eigen::Map<ArrayX<S>> out(y.data() + (static_cast<long long>(n) * C + c) * HW, HW);
      out = xin * gate.array()[n * C + c];
    }
  detail::check_finite(y, "channelwise_multiply");
  if (detail::recording<S>({&x, &gate})) {
    y.mark_graph_output();
    Tensor<S> xs = x, gt = gate, ys = y;
    Tape<S>::current()->record([xs, gt, ys, N, C, HW](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        gs.touch(gt);
        return;
      }
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          Eigen::Map<const ArrayX<S>> g(gy->data() + (static_cast<long long>(n) * C + c) * HW, HW);
          if (xs.requires_grad()) {
            Eigen::Map<ArrayX<S>> gx(gs.accum(xs).data() + (static_cast<long long>(n) * C + c) * HW, HW);
            gx += g * gt.array()[n * C + c];
          }
          if (gt.requires_grad()) {
            Eigen::Map<const ArrayX<S>> xin(xs.data() + (static_cast<long long>(n) * C + c) * HW, HW);
            gs.accum(gt)[n * C + c] += (g * xin).sum();
          }
        }
    });
  }
  return y;
}

// Max pooling; gradient is routed to the argmax position, first index winning
// ties (row-major scan within the window) for determinism.
template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, int kernel, int stride, int padding = 0) {
  require(x.ndim() == 4, "maxpool2d: input must be 4-D NCHW");
  require(kernel >= 1 && stride >= 1, "maxpool2d: kernel and stride must be positive");
  require(padding >= 0 && padding < kernel, "maxpool2d: padding must be in [0, kernel)");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H + 2 * padding >= kernel && W + 2 * padding >= kernel,
          "maxpool2d: kernel does not fit padded input");
  const int Ho = (H + 2 * padding - kernel) / stride + 1;
  const int Wo = (W + 2 * padding - kernel) / stride + 1;
  Tensor<S> y = Tensor<S>::zeros({N, C, Ho, Wo});
  std::vector<int> argmax(static_cast<std::size_t>(y.numel()));
  long long oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* plane = x.data() + (static_cast<long long>(n) * C + c) * H * W;
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo, ++oi) {
          S best = -std::numeric_limits<S>::infinity();
          int best_idx = -1;
          for (int kh = 0; kh < kernel; ++kh) {
            const int ih = ho * stride - padding + kh;
            if (ih < 0 || ih >= H) continue;
            for (int kw = 0; kw < kernel; ++kw) {
              const int iw = wo * stride - padding + kw;
              if (iw < 0 || iw >= W) continue;
              const S v = plane[ih * W + iw];
              if (v > best) {
                best = v;
                best_idx = ih * W + iw;
              }
            }
          }
          y.array()[oi] = best;
          argmax[static_cast<std::size_t>(oi)] = best_idx;
        }
    }
  detail::check_finite(y, "maxpool2d");
  if (detail::recording<S>({&x})) {
    y.mark_graph_output();
    Tensor<S> xs = x, ys = y;
    const long long plane_sz = static_cast<long long>(H) * W;
    const long long opl = static_cast<long long>(Ho) * Wo;
    Tape<S>::current()->record([xs, ys, argmax, N, C, plane_sz, opl](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        return;
      }
      if (!xs.requires_grad()) return;
      auto& gx = gs.accum(xs);
      long long oi = 0;
      for (long long nc = 0; nc < static_cast<long long>(N) * C; ++nc) {
        S* gplane = gx.data() + nc * plane_sz;
        for (long long p = 0; p < opl; ++p, ++oi) gplane[argmax[static_cast<std::size_t>(oi)]] += (*gy)[oi];
      }
    });
  }
  return y;
}

// Global average pooling: NCHW -> NxC.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  require(x.ndim() == 4, "global_avg_pool: input must be 4-D NCHW");
  const int N = x.dim(0), C = x.dim(1);
  const long long HW = static_cast<long long>(x.dim(2)) * x.dim(3);
  require(HW > 0, "global_avg_pool: empty spatial extent");
  Tensor<S> y = Tensor<S>::zeros({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      Eigen::Map<const ArrayX<S>> plane(x.data() + (static_cast<long long>(n) * C + c) * HW, HW);
      y.array()[n * C + c] = plane.mean();
    }
  detail::check_finite(y, "global_avg_pool");
  if (detail::recording<S>({&x})) {
    y.mark_graph_output();
    Tensor<S> xs = x, ys = y;
    Tape<S>::current()->record([xs, ys, N, C, HW](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        return;
      }
      if (!xs.requires_grad()) return;
      auto& gx = gs.accum(xs);
      const S inv = S(1) / static_cast<S>(HW);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          Eigen::Map<ArrayX<S>> gplane(gx.data() + (static_cast<long long>(n) * C + c) * HW, HW);
          gplane += (*gy)[n * C + c] * inv;
        }
    });
  }
  return y;
}

// Fully-connected layer: x is NxF, weight is OxF (row-major), bias is O.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  require(x.ndim() == 2, "linear: input must be 2-D NxF, got " + shape_str(x.shape()));
  require(weight.ndim() == 2, "linear: weight must be 2-D OxF");
  const int N = x.dim(0), F = x.dim(1), O = weight.dim(0);
  require(weight.dim(1) == F, "linear: input features " + std::to_string(F) +
                                  " do not match weight features " + std::to_string(weight.dim(1)));
  if (bias.defined())
    require(bias.ndim() == 1 && bias.dim(0) == O, "linear: bias shape mismatch");
  Tensor<S> y = Tensor<S>::zeros({N, O});
  {
    Eigen::Map<const MatRM<S>> Xm(x.data(), N, F);
    Eigen::Map<const MatRM<S>> Wm(weight.data(), O, F);
    Eigen::Map<MatRM<S>> Ym(y.data(), N, O);
    Ym.noalias() = Xm * Wm.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(bias.data(), O);
      Ym.rowwise() += b;
    }
  }
  detail::check_finite(y, "linear");
  if (detail::recording<S>({&x, &weight, &bias})) {
    y.mark_graph_output();
    Tensor<S> xs = x, ws = weight, bs = bias, ys = y;
    Tape<S>::current()->record([xs, ws, bs, ys, N, F, O](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        gs.touch(ws);
        if (bs.defined()) gs.touch(bs);
        return;
      }
      Eigen::Map<const MatRM<S>> G(gy->data(), N, O);
      if (xs.requires_grad()) {
        Eigen::Map<const MatRM<S>> Wm(ws.data(), O, F);
        Eigen::Map<MatRM<S>> gx(gs.accum(xs).data(), N, F);
        gx.noalias() += G * Wm;
      }
      if (ws.requires_grad()) {
        Eigen::Map<const MatRM<S>> Xm(xs.data(), N, F);
        Eigen::Map<MatRM<S>> gw(gs.accum(ws).data(), O, F);
        gw.noalias() += G.transpose() * Xm;
      }
      if (bs.defined() && bs.requires_grad()) {
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(gs.accum(bs).data(), O);
        gb += G.colwise().sum().transpose();
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight) {
  return linear(x, weight, Tensor<S>());
}

// Copy with a new shape (element count preserved).
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape: element count mismatch, " + shape_str(x.shape()) + " -> " +
                                         shape_str(shape));
  Tensor<S> y = Tensor<S>::zeros(std::move(shape));
  y.array() = x.array();
  if (detail::recording<S>({&x})) {
    y.mark_graph_output();
    Tensor<S> xs = x, ys = y;
    Tape<S>::current()->record([xs, ys](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        return;
      }
      if (xs.requires_grad()) gs.accum(xs) += *gy;
    });
  }
  return y;
}

// Sum of all elements, returned as a rank-0 tensor.
template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::scalar(x.array().sum());
  detail::check_finite(y, "sum");
  if (detail::recording<S>({&x})) {
    y.mark_graph_output();
    Tensor<S> xs = x, ys = y;
    Tape<S>::current()->record([xs, ys](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(xs);
        return;
      }
      if (xs.requires_grad()) gs.accum(xs) += (*gy)[0];
    });
  }
  return y;
}

// --- softmax / losses ---------------------------------------------------------

namespace detail {

// Row-wise log-softmax of z/tau for an NxK matrix, computed stably.
template <typename S>
MatRM<S> log_softmax_rows(const Tensor<S>& logits, S tau) {
  const int N = logits.dim(0), K = logits.dim(1);
  Eigen::Map<const MatRM<S>> Z(logits.data(), N, K);
  MatRM<S> out(N, K);
  for (int n = 0; n < N; ++n) {
    Eigen::Array<S, 1, Eigen::Dynamic> row = Z.row(n).array() / tau;
    const S m = row.maxCoeff();
    const S lse = m + std::log((row - m).exp().sum());
    out.row(n) = row - lse;
  }
  return out;
}

}  // namespace detail

// Temperature softmax over rows of an NxK logit matrix.
template <typename S>
Tensor<S> softmax(const Tensor<S>& logits, S tau = S(1)) {
  require(logits.ndim() == 2, "softmax: logits must be 2-D NxK, got " + shape_str(logits.shape()));
  require(tau > S(0), "softmax: temperature must be positive, got " + std::to_string(static_cast<double>(tau)));
  const int N = logits.dim(0), K = logits.dim(1);
  Tensor<S> y = Tensor<S>::zeros({N, K});
  {
    MatRM<S> ls = detail::log_softmax_rows(logits, tau);
    Eigen::Map<MatRM<S>> Y(y.data(), N, K);
    Y = ls.array().exp().matrix();
  }
  detail::check_finite(y, "softmax");
  if (detail::recording<S>({&logits})) {
    y.mark_graph_output();
    Tensor<S> zs = logits, ys = y;
    Tape<S>::current()->record([zs, ys, tau, N, K](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(zs);
        return;
      }
      if (!zs.requires_grad()) return;
      Eigen::Map<const MatRM<S>> P(ys.data(), N, K);
      Eigen::Map<const MatRM<S>> G(gy->data(), N, K);
      Eigen::Map<MatRM<S>> gz(gs.accum(zs).data(), N, K);
      for (int n = 0; n < N; ++n) {
        const S dot = (P.row(n).array() * G.row(n).array()).sum();
        gz.row(n).array() += P.row(n).array() * (G.row(n).array() - dot) / tau;
      }
    });
  }
  return y;
}

// Mean cross-entropy over the batch against integer labels.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2, "cross_entropy: logits must be 2-D NxK");
  const int N = logits.dim(0), K = logits.dim(1);
  require(static_cast<int>(labels.size()) == N, "cross_entropy: label count " + std::to_string(labels.size()) +
                                                    " does not match batch " + std::to_string(N));
  for (int n = 0; n < N; ++n)
    require(labels[static_cast<std::size_t>(n)] >= 0 && labels[static_cast<std::size_t>(n)] < K,
            "cross_entropy: label " + std::to_string(labels[static_cast<std::size_t>(n)]) +
                " out of range [0, " + std::to_string(K) + ")");
  MatRM<S> ls = detail::log_softmax_rows(logits, S(1));
  double loss = 0.0;
  for (int n = 0; n < N; ++n) loss -= static_cast<double>(ls(n, labels[static_cast<std::size_t>(n)]));
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(loss / N));
  detail::check_finite(y, "cross_entropy");
  if (detail::recording<S>({&logits})) {
    y.mark_graph_output();
    Tensor<S> zs = logits, ys = y;
    Tape<S>::current()->record([zs, ys, labels, N, K](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(zs);
        return;
      }
      if (!zs.requires_grad()) return;
      MatRM<S> ls = detail::log_softmax_rows(zs, S(1));
      Eigen::Map<MatRM<S>> gz(gs.accum(zs).data(), N, K);
      const S g = (*gy)[0] / static_cast<S>(N);
      for (int n = 0; n < N; ++n) {
        gz.row(n).array() += ls.row(n).array().exp() * g;
        gz(n, labels[static_cast<std::size_t>(n)]) -= g;
      }
    });
  }
  return y;
}

// Batch-mean KL divergence KL(softmax(p/tau) || softmax(q/tau)); p is the
// reference distribution. Both sides receive gradients unless detached.
template <typename S>
Tensor<S> kl_divergence(const Tensor<S>& p_logits, const Tensor<S>& q_logits, S tau = S(1)) {
  require(p_logits.ndim() == 2 && q_logits.ndim() == 2, "kl_divergence: logits must be 2-D NxK");
  require(p_logits.shape() == q_logits.shape(),
          "kl_divergence: shape mismatch " + shape_str(p_logits.shape()) + " vs " + shape_str(q_logits.shape()));
  require(tau > S(0), "kl_divergence: temperature must be positive");
  const int N = p_logits.dim(0), K = p_logits.dim(1);
  MatRM<S> lp = detail::log_softmax_rows(p_logits, tau);
  MatRM<S> lq = detail::log_softmax_rows(q_logits, tau);
  double loss = 0.0;
  for (int n = 0; n < N; ++n)
    loss += static_cast<double>((lp.row(n).array().exp() * (lp.row(n).array() - lq.row(n).array())).sum());
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(loss / N));
  detail::check_finite(y, "kl_divergence");
  if (detail::recording<S>({&p_logits, &q_logits})) {
    y.mark_graph_output();
    Tensor<S> ps = p_logits, qs = q_logits, ys = y;
    Tape<S>::current()->record([ps, qs, ys, tau, N, K](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(ps);
        gs.touch(qs);
        return;
      }
      MatRM<S> lp = detail::log_softmax_rows(ps, tau);
      MatRM<S> lq = detail::log_softmax_rows(qs, tau);
      const S g = (*gy)[0] / (tau * static_cast<S>(N));
      if (qs.requires_grad()) {
        Eigen::Map<MatRM<S>> gq(gs.accum(qs).data(), N, K);
        for (int n = 0; n < N; ++n)
          gq.row(n).array() += (lq.row(n).array().exp() - lp.row(n).array().exp()) * g;
      }
      if (ps.requires_grad()) {
        Eigen::Map<MatRM<S>> gp(gs.accum(ps).data(), N, K);
        for (int n = 0; n < N; ++n) {
          auto t = lp.row(n).array().exp();
          auto diff = lp.row(n).array() - lq.row(n).array();
          const S d = (t * diff).sum();
          gp.row(n).array() += t * (diff - d) * g;
        }
      }
    });
  }
  return y;
}

// Mean squared error over all elements.
template <typename S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  require(pred.shape() == target.shape(),
          "mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  require(pred.numel() > 0, "mse_loss: empty tensors");
  const double n = static_cast<double>(pred.numel());
  const double v =
      static_cast<double>((pred.array().template cast<double>() - target.array().template cast<double>()).square().sum()) / n;
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(v));
  detail::check_finite(y, "mse_loss");
  if (detail::recording<S>({&pred, &target})) {
    y.mark_graph_output();
    Tensor<S> ps = pred, ts = target, ys = y;
    Tape<S>::current()->record([ps, ts, ys](GradStore<S>& gs) {
      const auto* gy = gs.find(ys);
      if (!gy) {
        gs.touch(ps);
        gs.touch(ts);
        return;
      }
      const S g = (*gy)[0] * S(2) / static_cast<S>(ps.numel());
      if (ps.requires_grad()) gs.accum(ps) += (ps.array() - ts.array()) * g;
      if (ts.requires_grad()) gs.accum(ts) -= (ps.array() - ts.array()) * g;
    });
  }
  return y;
}

}  // namespace mx
