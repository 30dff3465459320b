#pragma once

#include "mx/model.hpp"
#include "mx/train.hpp"

namespace mx {

// Feature reconstructor: a linear 1x1 convolution F_0 followed by N
// nonlinear blocks F_1..F_N (3x3 conv + batch norm + ReLU each). N is the
// fuzziness level; N = 0 is the pure linear map.
struct ReconstructorSpec {
  int fuzziness = 0;
  int channels_in = 0;
  int channels_out = 0;
};

inline LayerGraph build_reconstructor(const ReconstructorSpec& spec) {
  require(spec.fuzziness >= 0, "reconstructor: fuzziness must be non-negative");
  require(spec.channels_in > 0 && spec.channels_out > 0, "reconstructor: channel counts must be positive");
  LayerGraph g;
  g.push_back(ConvSpec{spec.channels_in, spec.channels_out, 1, 1, 0, true});
  for (int i = 0; i < spec.fuzziness; ++i) {
    g.push_back(ConvSpec{spec.channels_out, spec.channels_out, 3, 1, 1, false});
    g.push_back(BatchNormSpec{spec.channels_out});
    g.push_back(ReluSpec{});
  }
  return g;
}

// Builds the reconstructor module. F_0 starts at the identity channel map
// (diagonal ones over the shared channels), so a self-probe is exact before
// any fitting.
template <typename S>
std::unique_ptr<Sequential<S>> make_reconstructor(const ReconstructorSpec& spec, unsigned seed) {
  std::mt19937 rng(seed);
  auto net = std::make_unique<Sequential<S>>(build_reconstructor(spec), rng);
  auto* f0 = dynamic_cast<Conv2d<S>*>(net->children[0].get());
  f0->weight.array().setZero();
  const int shared = std::min(spec.channels_in, spec.channels_out);
  for (int c = 0; c < shared; ++c)
    f0->weight.array()[static_cast<long long>(c) * spec.channels_in + c] = S(1);
  return net;
}

struct ProbeFitConfig {
  int epochs = 10;
  double lr = 0.01;
  double lr_decay = 0.1;   // multiplied in every decay_every epochs
  int decay_every = 3;
  int batch_size = 64;
  double momentum = 0.9;
  double holdout_fraction = 0.2;
  unsigned seed = 0;
};

template <typename S>
struct FitResult {
  std::unique_ptr<Sequential<S>> reconstructor;
  double holdout_mse = 0.0;
  double train_mse = 0.0;
};

// Fits the reconstructor to map paired source features onto target features
// by MSE. The pairs must come from identical inputs; the tail of the stack is
// held out for the reported MSE.
template <typename S>
FitResult<S> fit_reconstructor(const Tensor<S>& source, const Tensor<S>& target,
                               const ReconstructorSpec& spec, const ProbeFitConfig& cfg) {
  require(source.ndim() == 4 && target.ndim() == 4, "fit_reconstructor: features must be 4-D stacks");
  require(source.dim(0) == target.dim(0),
          "fit_reconstructor: unpaired feature sets (" + std::to_string(source.dim(0)) + " vs " +
              std::to_string(target.dim(0)) + " samples)");
  require(source.dim(1) == spec.channels_in && target.dim(1) == spec.channels_out,
          "fit_reconstructor: channel mismatch with spec");
  require(source.dim(2) == target.dim(2) && source.dim(3) == target.dim(3),
          "fit_reconstructor: spatial extents differ between source and target");
  const int N = source.dim(0);
  const int n_hold = std::max(1, static_cast<int>(N * cfg.holdout_fraction));
  const int n_fit = N - n_hold;
  require(n_fit >= 2, "fit_reconstructor: too few samples to fit");

  FitResult<S> out;
  out.reconstructor = make_reconstructor<S>(spec, cfg.seed);
  ParamSet<S> params;
  out.reconstructor->visit_params("recon.", [&params](const std::string& n, Tensor<S>& t) { params.add(n, t); });

  auto slice = [](const Tensor<S>& t, int from, int count) {
    Tensor<S> s = Tensor<S>::zeros({count, t.dim(1), t.dim(2), t.dim(3)});
    const long long stride = t.numel() / t.dim(0);
    std::copy_n(t.data() + from * stride, count * stride, s.data());
    return s;
  };

  std::mt19937 rng(cfg.seed + 1);
  std::vector<int> order(static_cast<std::size_t>(n_fit));
  std::iota(order.begin(), order.end(), 0);
  const long long stride = source.numel() / N;
  const long long tstride = target.numel() / N;

  double lr = cfg.lr;
  for (int e = 0; e < cfg.epochs; ++e) {
    if (e > 0 && cfg.decay_every > 0 && e % cfg.decay_every == 0) lr *= cfg.lr_decay;
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < n_fit; start += cfg.batch_size) {
      const int end = std::min(n_fit, start + cfg.batch_size);
      if (end - start < 2) break;
      Tensor<S> xb = Tensor<S>::zeros({end - start, source.dim(1), source.dim(2), source.dim(3)});
      Tensor<S> tb = Tensor<S>::zeros({end - start, target.dim(1), target.dim(2), target.dim(3)});
      for (int i = start; i < end; ++i) {
        const int src = order[static_cast<std::size_t>(i)];
        std::copy_n(source.data() + src * stride, stride, xb.data() + (i - start) * stride);
        std::copy_n(target.data() + src * tstride, tstride, tb.data() + (i - start) * tstride);
      }
      Tape<S> tape;
      Tensor<S> loss = mse_loss(out.reconstructor->forward(xb), tb);
      tape.backward(loss);
      sgd_step(params, static_cast<S>(lr), static_cast<S>(cfg.momentum), S(0));
      params.zero_grads();
    }
  }

  out.reconstructor->set_training(false);
  {
    NoGrad<S> guard;
    Tensor<S> fit_x = slice(source, 0, n_fit), fit_t = slice(target, 0, n_fit);
    out.train_mse = static_cast<double>(mse_loss(out.reconstructor->forward(fit_x), fit_t).item());
    Tensor<S> hx = slice(source, n_fit, n_hold), ht = slice(target, n_fit, n_hold);
    out.holdout_mse = static_cast<double>(mse_loss(out.reconstructor->forward(hx), ht).item());
  }
  return out;
}

// Stage-i feature stack of a model over a dataset (eval mode, no recording).
template <typename S>
Tensor<S> collect_features(MultiExitModel<S>& model, const Dataset& ds, int stage, int batch_size = 64) {
  require(stage >= 1 && stage <= model.num_stages(), "collect_features: stage out of range");
  model.set_training(false);
  NoGrad<S> guard;
  Tensor<S> out;
  long long stride = 0;
  for (int start = 0; start < ds.n; start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(ds.n, start + batch_size); ++i) idx.push_back(i);
    Tensor<S> z = model.forward_stages(make_batch<S>(ds, idx), 1, stage);
    if (!out.defined()) {
      out = Tensor<S>::zeros({ds.n, z.dim(1), z.dim(2), z.dim(3)});
      stride = z.numel() / z.dim(0);
    }
    std::copy_n(z.data(), z.numel(), out.data() + start * stride);
  }
  return out;
}

// Accuracy of the baseline when its stage-i features are replaced by
// reconstructions from the branched model's stage-i features. Neither model's
// parameters are touched.
template <typename S>
double substitution_accuracy(MultiExitModel<S>& baseline, MultiExitModel<S>& branched, int stage,
                             Sequential<S>& reconstructor, const Dataset& ds, int batch_size = 64) {
  require(stage >= 1 && stage <= baseline.num_stages(), "substitution_accuracy: stage out of range [1, " +
                                                            std::to_string(baseline.num_stages()) + "]");
  baseline.set_training(false);
  branched.set_training(false);
  reconstructor.set_training(false);
  NoGrad<S> guard;
  long long correct = 0;
  for (int start = 0; start < ds.n; start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(ds.n, start + batch_size); ++i) idx.push_back(i);
    Tensor<S> z = branched.forward_stages(make_batch<S>(ds, idx), 1, stage);
    Tensor<S> zhat = reconstructor.forward(z);
    Tensor<S> h = baseline.forward_stages(zhat, stage + 1, baseline.num_stages());
    Tensor<S> logits = baseline.forward_final(h);
    const std::vector<int> labels = batch_labels(ds, idx);
    correct += static_cast<long long>(std::lround(top1_accuracy(logits, labels) * labels.size()));
  }
  return static_cast<double>(correct) / ds.n;
}

struct ProbeResult {
  int stage = 0;
  int fuzziness = 0;
  std::vector<double> accuracies;  // one per repeat
  std::vector<double> mses;        // holdout MSE per repeat
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  double mse_mean = 0.0;
};

// Full substitution evaluation at one (stage, fuzziness) point: fit the
// reconstructor `repeats` times with fresh seeds on features from `fit_ds`,
// evaluate each substitution on `eval_ds`, and report mean and std. At least
// 3 repeats are required by the reporting protocol.
template <typename S>
ProbeResult substitute_eval(MultiExitModel<S>& baseline, MultiExitModel<S>& branched, int stage,
                            int fuzziness, const Dataset& fit_ds, const Dataset& eval_ds, int repeats,
                            ProbeFitConfig fit_cfg) {
  require(repeats >= 3, "substitute_eval: protocol requires at least 3 repeats");
  require(stage >= 1 && stage <= baseline.num_stages(),
          "substitute_eval: stage " + std::to_string(stage) + " out of range [1, " +
              std::to_string(baseline.num_stages()) + "]");
  Tensor<S> source = collect_features(branched, fit_ds, stage);
  Tensor<S> target = collect_features(baseline, fit_ds, stage);
  ReconstructorSpec spec{fuzziness, source.dim(1), target.dim(1)};
  ProbeResult r;
  r.stage = stage;
  r.fuzziness = fuzziness;
  for (int rep = 0; rep < repeats; ++rep) {
    ProbeFitConfig cfg = fit_cfg;
    cfg.seed = fit_cfg.seed + static_cast<unsigned>(rep) * 7919u;
    FitResult<S> fit = fit_reconstructor(source, target, spec, cfg);
    r.mses.push_back(fit.holdout_mse);
    r.accuracies.push_back(substitution_accuracy(baseline, branched, stage, *fit.reconstructor, eval_ds));
  }
  double sum = 0.0, sq = 0.0, msum = 0.0;
  for (double a : r.accuracies) {
    sum += a;
    sq += a * a;
  }
  for (double m : r.mses) msum += m;
  const double n = static_cast<double>(repeats);
  r.accuracy_mean = sum / n;
  r.accuracy_std = std::sqrt(std::max(0.0, sq / n - r.accuracy_mean * r.accuracy_mean));
  r.mse_mean = msum / n;
  return r;
}

}  // namespace mx
