#pragma once

#include <algorithm>
#include <numeric>
#include <optional>

#include "mx/data.hpp"
#include "mx/exit_policy.hpp"
#include "mx/model.hpp"

namespace mx {

enum class Strategy { cooperative, branches_only, stage_wise };
enum class TeacherKind { none, dk, ofa, med, wed };

Strategy strategy_from_string(const std::string& s);
TeacherKind teacher_from_string(const std::string& s);
const char* strategy_str(Strategy s);
const char* teacher_str(TeacherKind t);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr_initial = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lambda = 0.9;  // joint-loss weight in the distillation objective
  double tau = 1.0;     // softening temperature
  Strategy strategy = Strategy::cooperative;
  TeacherKind teacher = TeacherKind::none;
  std::string dk_checkpoint;     // baseline checkpoint path for the dk teacher
  bool kl_teacher_ref = true;    // KL(teacher || student); flag swaps the arguments
  bool augment_flip = true;      // horizontal flip on training batches
  unsigned seed = 0;

  std::string canonical_text() const;       // key=value lines, fixed order
  std::uint64_t digest() const;             // FNV over canonical_text()
};

// Flat key=value config file; '#' starts a comment. Unknown keys are errors.
TrainConfig parse_config_text(const std::string& text, TrainConfig base = {});
TrainConfig load_config_file(const std::string& path, TrainConfig base = {});

// Linear decay to zero: lr(e) = lr_initial * (1 - e / E), e in [0, E].
inline double lr_at(double lr_initial, int epoch, int total_epochs) {
  return lr_initial * (1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs));
}

// Weighted-ensemble coefficients alpha_j = j / sum(1..M), j = 1..M.
std::vector<double> wed_weights(int num_exits);

// --- losses -------------------------------------------------------------------

// Sum over exits of batch-mean cross-entropy (unweighted).
template <typename S>
Tensor<S> joint_loss_from_exits(const std::vector<Tensor<S>>& ys, const std::vector<int>& labels) {
  require(!ys.empty(), "joint_loss: no exits");
  Tensor<S> loss = cross_entropy(ys[0], labels);
  for (std::size_t i = 1; i < ys.size(); ++i) loss = add(loss, cross_entropy(ys[i], labels));
  return loss;
}

template <typename S>
Tensor<S> joint_loss(MultiExitModel<S>& model, const Tensor<S>& x, const std::vector<int>& labels) {
  auto ys = model.forward_all(x);
  return joint_loss_from_exits(ys, labels);
}

template <typename S>
struct TeacherOutput {
  Tensor<S> logits;        // pre-softmax, detached from the student graph
  double accuracy = 0.0;   // top-1 on the same batch
};

// Linear combination of exit logits; records on the tape like any op, so the
// caller decides whether the result stays differentiable.
template <typename S>
Tensor<S> weighted_ensemble(const std::vector<Tensor<S>>& ys, const std::vector<double>& weights) {
  require(ys.size() == weights.size(), "weighted_ensemble: weight count mismatch");
  Tensor<S> out = scalar_multiply(ys[0], static_cast<S>(weights[0]));
  for (std::size_t i = 1; i < ys.size(); ++i)
    out = add(out, scalar_multiply(ys[i], static_cast<S>(weights[i])));
  return out;
}

template <typename S>
double top1_accuracy(const Tensor<S>& logits, const std::vector<int>& labels) {
  const int N = logits.dim(0), K = logits.dim(1);
  long long correct = 0;
  for (int n = 0; n < N; ++n) {
    int best = 0;
    for (int c = 1; c < K; ++c)
      if (logits.array()[n * K + c] > logits.array()[n * K + best]) best = c;
    if (best == labels[static_cast<std::size_t>(n)]) ++correct;
  }
  return static_cast<double>(correct) / N;
}

// Teacher logits for distillation. ofa takes the end-stage exit, med the
// unweighted mean of all exits, wed the stage-weighted ensemble; all three are
// detached from the student graph. dk forwards the batch through a frozen
// baseline (required; error when absent).
template <typename S>
TeacherOutput<S> teacher_from_exits(TeacherKind kind, const std::vector<Tensor<S>>& ys,
                                    const std::vector<int>& labels,
                                    MultiExitModel<S>* dk_baseline, const Tensor<S>& x) {
  require(kind != TeacherKind::none, "teacher_from_exits: teacher kind is none");
  const int M = static_cast<int>(ys.size());
  TeacherOutput<S> out;
  NoGrad<S> guard;  // ensemble arithmetic must not feed gradients back
  switch (kind) {
    case TeacherKind::dk: {
      require(dk_baseline != nullptr, "dk teacher requires a frozen baseline checkpoint");
      std::vector<Tensor<S>> base = dk_baseline->forward_all(x);
      out.logits = base.back().detach();
      break;
    }
    case TeacherKind::ofa:
      out.logits = ys.back().detach();
      break;
    case TeacherKind::med: {
      std::vector<double> w(static_cast<std::size_t>(M), 1.0 / M);
      out.logits = weighted_ensemble(ys, w).detach();
      break;
    }
    case TeacherKind::wed:
      out.logits = weighted_ensemble(ys, wed_weights(M)).detach();
      break;
    default:
      fail("teacher_from_exits: bad kind");
  }
  out.accuracy = top1_accuracy(out.logits, labels);
  return out;
}

template <typename S>
TeacherOutput<S> teacher_logits(TeacherKind kind, MultiExitModel<S>& model, const Tensor<S>& x,
                                const std::vector<int>& labels,
                                MultiExitModel<S>* dk_baseline = nullptr) {
  auto ys = model.forward_all(x);
  return teacher_from_exits(kind, ys, labels, dk_baseline, x);
}

// lambda * joint + tau^2 * (1 - lambda) * sum_i KL(teacher || student_i).
// The teacher term carries no gradient into the teacher-forming logits.
template <typename S>
Tensor<S> distill_loss_from_exits(const std::vector<Tensor<S>>& ys, const std::vector<int>& labels,
                                  const Tensor<S>& teacher, double lambda, double tau,
                                  bool kl_teacher_ref = true) {
  Tensor<S> loss = scalar_multiply(joint_loss_from_exits(ys, labels), static_cast<S>(lambda));
  Tensor<S> kl_sum;
  for (const auto& y : ys) {
    Tensor<S> term = kl_teacher_ref ? kl_divergence(teacher, y, static_cast<S>(tau))
                                    : kl_divergence(y, teacher, static_cast<S>(tau));
    kl_sum = kl_sum.defined() ? add(kl_sum, term) : term;
  }
  return add(loss, scalar_multiply(kl_sum, static_cast<S>(tau * tau * (1.0 - lambda))));
}

template <typename S>
Tensor<S> distill_loss(MultiExitModel<S>& model, const Tensor<S>& x, const std::vector<int>& labels,
                       const TrainConfig& cfg, MultiExitModel<S>* dk_baseline = nullptr) {
  require(cfg.teacher != TeacherKind::none, "distill_loss: teacher kind is none");
  auto ys = model.forward_all(x);
  auto teacher = teacher_from_exits(cfg.teacher, ys, labels, dk_baseline, x);
  return distill_loss_from_exits(ys, labels, teacher.logits, cfg.lambda, cfg.tau, cfg.kl_teacher_ref);
}

// --- evaluation / training loop -------------------------------------------------

struct EvalResult {
  std::vector<double> exit_accuracy;        // per exit
  std::optional<double> teacher_accuracy;
};

template <typename S>
EvalResult evaluate(MultiExitModel<S>& model, const Dataset& ds, int batch_size = 64,
                    TeacherKind teacher = TeacherKind::none, MultiExitModel<S>* dk_baseline = nullptr) {
  require(ds.n > 0, "evaluate: empty dataset");
  model.set_training(false);
  NoGrad<S> guard;
  const int M = model.num_exits();
  std::vector<long long> correct(static_cast<std::size_t>(M), 0);
  long long teacher_correct = 0;
  for (int start = 0; start < ds.n; start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(ds.n, start + batch_size); ++i) idx.push_back(i);
    Tensor<S> x = make_batch<S>(ds, idx);
    const std::vector<int> labels = batch_labels(ds, idx);
    std::vector<Tensor<S>> ys = model.forward_all(x);
    for (int m = 0; m < M; ++m)
      correct[static_cast<std::size_t>(m)] += static_cast<long long>(
          std::lround(top1_accuracy(ys[static_cast<std::size_t>(m)], labels) * labels.size()));
    if (teacher != TeacherKind::none) {
      auto t = teacher_from_exits(teacher, ys, labels, dk_baseline, x);
      teacher_correct += static_cast<long long>(std::lround(t.accuracy * labels.size()));
    }
  }
  EvalResult r;
  for (int m = 0; m < M; ++m)
    r.exit_accuracy.push_back(static_cast<double>(correct[static_cast<std::size_t>(m)]) / ds.n);
  if (teacher != TeacherKind::none)
    r.teacher_accuracy = static_cast<double>(teacher_correct) / ds.n;
  return r;
}

struct EpochMetrics {
  int epoch = 0;            // global row index, 1-based
  std::string phase;        // "coop", "bo-backbone", "bo-branches", "sw-stage2", ...
  double lr = 0.0;
  double loss = 0.0;        // mean over batches of the phase loss
  std::vector<double> train_accuracy;  // per exit (only exits the phase touches are meaningful)
  std::vector<double> eval_accuracy;   // per exit, full model
  std::optional<double> teacher_accuracy;
};

std::vector<std::string> metrics_csv_header(int num_exits);
std::vector<std::vector<std::string>> metrics_csv_rows(const std::vector<EpochMetrics>& metrics);

namespace detail {

// One epoch of SGD over `loss_fn`. Batches are shuffled per epoch; partial
// batches smaller than 2 samples are dropped (batch norm needs 2+ in train
// mode). Returns (mean loss, per-exit train accuracy over seen batches).
template <typename S, typename LossFn>
std::pair<double, std::vector<double>> run_epoch(MultiExitModel<S>& model, const Dataset& ds,
                                                 const TrainConfig& cfg, double lr, std::mt19937& rng,
                                                 LossFn&& loss_fn, int num_tracked_exits) {
  std::vector<int> order(static_cast<std::size_t>(ds.n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::bernoulli_distribution flip_dist(0.5);

  double loss_sum = 0.0;
  long long batches = 0, seen = 0;
  std::vector<double> acc_sum(static_cast<std::size_t>(num_tracked_exits), 0.0);
  for (int start = 0; start < ds.n; start += cfg.batch_size) {
    const int end = std::min(ds.n, start + cfg.batch_size);
    if (end - start < 2) break;
    std::vector<int> idx(order.begin() + start, order.begin() + end);
    std::vector<char> flips(idx.size(), 0);
    if (cfg.augment_flip)
      for (auto& f : flips) f = flip_dist(rng) ? 1 : 0;
    Tensor<S> x = make_batch<S>(ds, idx, &flips);
    const std::vector<int> labels = batch_labels(ds, idx);

    Tape<S> tape;
    auto [loss, exit_logits] = loss_fn(x, labels);
    tape.backward(loss);
    sgd_step(model.params(), static_cast<S>(lr), static_cast<S>(cfg.momentum),
             static_cast<S>(cfg.weight_decay));
    model.params().zero_grads();

    loss_sum += static_cast<double>(loss.item());
    ++batches;
    seen += static_cast<long long>(labels.size());
    for (std::size_t m = 0; m < exit_logits.size() && m < acc_sum.size(); ++m)
      acc_sum[m] += top1_accuracy(exit_logits[m], labels) * static_cast<double>(labels.size());
  }
  require(batches > 0, "train: dataset too small for batch size " + std::to_string(cfg.batch_size));
  std::vector<double> acc;
  for (double a : acc_sum) acc.push_back(a / static_cast<double>(seen));
  return {loss_sum / static_cast<double>(batches), acc};
}

}  // namespace detail

// Trains in place and returns per-epoch metrics.
//
//   cooperative    - all exits jointly on the configured loss
//   branches_only  - backbone + final head on CE_M first, then frozen while
//                    the branches train on the sum of their CEs
//   stage_wise     - exits 1..M in turn on CE_i, earlier shared weights
//                    frozen (and their batch-norm stats pinned)
//
// Each phase/stage receives the full epoch budget with a fresh linear-decay
// schedule.
template <typename S>
std::vector<EpochMetrics> train(MultiExitModel<S>& model, const Dataset& train_ds, const Dataset& eval_ds,
                                const TrainConfig& cfg, MultiExitModel<S>* dk_baseline = nullptr) {
  require(train_ds.n > 0, "train: empty training set");
  require(cfg.epochs >= 1, "train: epochs must be positive");
  require(cfg.tau > 0.0, "train: tau must be positive");
  require(cfg.lambda >= 0.0 && cfg.lambda <= 1.0, "train: lambda must be in [0, 1]");
  if (cfg.teacher == TeacherKind::dk)
    require(dk_baseline != nullptr, "train: dk teacher requires a frozen baseline checkpoint");

  std::mt19937 rng(cfg.seed);
  std::vector<EpochMetrics> metrics;
  const int M = model.num_exits();

  auto eval_row = [&](EpochMetrics& row) {
    EvalResult ev = evaluate(model, eval_ds, cfg.batch_size, cfg.teacher, dk_baseline);
    row.eval_accuracy = ev.exit_accuracy;
    row.teacher_accuracy = ev.teacher_accuracy;
  };

  // Each phase sets its own train/eval module modes (frozen stages keep their
  // batch-norm statistics pinned); the mode setter re-applies them after every
  // evaluation pass.
  auto run_phase = [&](const std::string& phase, auto&& loss_fn, int tracked_exits,
                       const std::function<void()>& set_modes) {
    for (int e = 0; e < cfg.epochs; ++e) {
      set_modes();
      const double lr = lr_at(cfg.lr_initial, e, cfg.epochs);
      auto [loss, train_acc] =
          detail::run_epoch(model, train_ds, cfg, lr, rng, loss_fn, tracked_exits);
      EpochMetrics row;
      row.epoch = static_cast<int>(metrics.size()) + 1;
      row.phase = phase;
      row.lr = lr;
      row.loss = loss;
      row.train_accuracy = train_acc;
      eval_row(row);
      metrics.push_back(std::move(row));
    }
  };

  switch (cfg.strategy) {
    case Strategy::cooperative: {
      model.params().freeze_all(false);
      auto loss_fn = [&](const Tensor<S>& x, const std::vector<int>& labels) {
        std::vector<Tensor<S>> ys = model.forward_all(x);
        Tensor<S> loss;
        if (cfg.teacher == TeacherKind::none) {
          loss = joint_loss_from_exits(ys, labels);
        } else {
          auto teacher = teacher_from_exits(cfg.teacher, ys, labels, dk_baseline, x);
          loss = distill_loss_from_exits(ys, labels, teacher.logits, cfg.lambda, cfg.tau, cfg.kl_teacher_ref);
        }
        return std::make_pair(loss, ys);
      };
      run_phase("coop", loss_fn, M, [&] { model.set_training(true); });
      break;
    }
    case Strategy::branches_only: {
      // Phase 1: the plain backbone (phi_M, theta_M) on CE_M.
      model.params().freeze_all(true);
      model.params().set_frozen_prefix("backbone.", false);
      model.params().set_frozen_prefix("final.", false);
      auto phase1 = [&](const Tensor<S>& x, const std::vector<int>& labels) {
        Tensor<S> logits = model.forward_to_exit(x, M);
        return std::make_pair(cross_entropy(logits, labels), std::vector<Tensor<S>>{logits});
      };
      run_phase("bo-backbone", phase1, 1, [&] { model.set_training(true); });

      // Phase 2: backbone frozen (parameters and batch-norm statistics),
      // branches on the sum of their CEs.
      model.params().freeze_all(true);
      for (int i = 1; i < M; ++i)
        model.params().set_frozen_prefix("branch" + std::to_string(i) + ".", false);
      auto phase2 = [&](const Tensor<S>& x, const std::vector<int>& labels) {
        std::vector<Tensor<S>> ys;
        Tensor<S> h = x;
        for (int i = 1; i < M; ++i) {
          h = model.stage(i).forward(h);
          ys.push_back(model.branch(i).forward(h));
        }
        return std::make_pair(joint_loss_from_exits(ys, labels), ys);
      };
      run_phase("bo-branches", phase2, M - 1, [&] {
        model.set_training(true);
        for (int i = 1; i <= model.num_stages(); ++i) model.set_stage_training(i, false);
        model.final_classifier().set_training(false);
      });
      break;
    }
    case Strategy::stage_wise: {
      for (int i = 1; i <= M; ++i) {
        model.params().freeze_all(true);
        if (i < M) {
          model.params().set_frozen_prefix("backbone.stage" + std::to_string(i) + ".", false);
          model.params().set_frozen_prefix("branch" + std::to_string(i) + ".", false);
        } else {
          // phi_M \ phi_{M-1} covers every remaining backbone segment.
          for (int s = M; s <= model.num_stages(); ++s)
            model.params().set_frozen_prefix("backbone.stage" + std::to_string(s) + ".", false);
          model.params().set_frozen_prefix("final.", false);
        }
        auto loss_fn = [&, i](const Tensor<S>& x, const std::vector<int>& labels) {
          Tensor<S> logits = model.forward_to_exit(x, i);
          return std::make_pair(cross_entropy(logits, labels), std::vector<Tensor<S>>{logits});
        };
        run_phase("sw-stage" + std::to_string(i), loss_fn, 1, [&, i] {
          model.set_training(true);
          for (int s = 1; s < i; ++s) model.set_stage_training(s, false);
        });
      }
      break;
    }
  }
  model.set_training(false);
  return metrics;
}

}  // namespace mx
