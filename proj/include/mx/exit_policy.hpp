#pragma once

#include "mx/flops.hpp"
#include "mx/io.hpp"
#include "mx/model.hpp"

namespace mx {

// Per-exit confidence thresholds gamma_1..gamma_{M-1}; exit M is
// unconditional. A sample exits at the first i whose max-softmax confidence
// reaches gamma_i.
struct ExitPolicy {
  std::vector<double> gammas;
};

struct SimResult {
  double accuracy = 0.0;
  std::vector<double> exit_rates;       // sums to 1 exactly (counts / N)
  std::vector<long long> exit_counts;
  double af = 0.0;                      // adaptive average FLOPs
};

// Max softmax of a logit row, computed in double (shared by the live path and
// the trace replay so both take bit-identical decisions).
double max_softmax(const float* logits, int k);
// Argmax with first-index tie-breaking.
int argmax(const float* logits, int k);

// Replays the sequential threshold rule on a cached trace.
SimResult simulate(const LogitTrace& trace, const ExitPolicy& policy, const FlopsReport& report);

// Per-sample exit decisions only (exit index per sample, 1-based).
std::vector<int> simulate_exits(const LogitTrace& trace, const ExitPolicy& policy);

enum class ObjectiveKind { min_flops_at_accuracy, max_accuracy_at_flops };

struct CalibrationObjective {
  ObjectiveKind kind = ObjectiveKind::min_flops_at_accuracy;
  double target = 0.0;  // accuracy floor or FLOPs ceiling
};

struct CalibrationResult {
  ExitPolicy policy;
  SimResult achieved;
};

// Thrown when no grid policy satisfies the objective; carries the best
// attainable value (max accuracy or min FLOPs over the grid).
class InfeasibleObjective : public std::runtime_error {
 public:
  InfeasibleObjective(const std::string& msg, double best) : std::runtime_error(msg), best_attainable(best) {}
  double best_attainable;
};

// Exhaustive grid search over per-exit thresholds in {0, step, ..., 1}. Ties
// break toward lower AF, then the lexicographically smaller gamma vector.
CalibrationResult calibrate(const LogitTrace& trace, const FlopsReport& report,
                            const CalibrationObjective& objective, double grid_step = 0.05);

struct ConfidenceHistogram {
  int exit_index = 1;
  std::vector<double> bin_lo, bin_hi;       // over [1/K, 1]
  std::vector<long long> correct, incorrect;
};

ConfidenceHistogram confidence_histogram(const LogitTrace& trace, int exit_index, int bins);

// Per-exit top-1 accuracy over the whole trace (each exit scored on all
// samples).
std::vector<double> trace_exit_accuracies(const LogitTrace& trace);

// --- live-model counterparts --------------------------------------------------

// Runs exits sequentially on one sample (batch of 1), stopping at the first
// exit whose confidence clears its threshold; stages beyond the exit taken
// are never executed. The model is switched to eval mode.
template <typename S>
std::pair<int, int> predict_adaptive(MultiExitModel<S>& model, const Tensor<S>& x,
                                     const ExitPolicy& policy) {
  const int M = model.num_exits();
  require(static_cast<int>(policy.gammas.size()) == M - 1,
          "predict_adaptive: policy has " + std::to_string(policy.gammas.size()) +
              " thresholds, model wants " + std::to_string(M - 1));
  require(x.ndim() == 4 && x.dim(0) == 1, "predict_adaptive: x must be a single NCHW sample");
  model.set_training(false);
  NoGrad<S> guard;
  const int K = model.num_classes();
  std::vector<float> row(static_cast<std::size_t>(K));
  Tensor<S> h = x;
  for (int i = 1; i <= M; ++i) {
    Tensor<S> logits;
    if (i < M) {
      h = model.stage(i).forward(h);
      logits = model.branch(i).forward(h);
    } else {
      for (int s = i; s <= model.num_stages(); ++s) h = model.stage(s).forward(h);
      logits = model.forward_final(h);
    }
    for (int c = 0; c < K; ++c) row[static_cast<std::size_t>(c)] = static_cast<float>(logits.array()[c]);
    if (i == M || max_softmax(row.data(), K) >= policy.gammas[static_cast<std::size_t>(i - 1)])
      return {argmax(row.data(), K), i};
  }
  fail("predict_adaptive: unreachable");
}

// Runs every exit on every sample (one sample at a time, so a replayed
// simulation is bit-identical to live adaptive prediction) and caches the raw
// logits.
template <typename S>
LogitTrace export_trace(MultiExitModel<S>& model, const Dataset& ds) {
  require(ds.n > 0, "export_trace: empty dataset");
  require(ds.num_classes == model.num_classes(), "export_trace: dataset classes " +
                                                     std::to_string(ds.num_classes) + " do not match model " +
                                                     std::to_string(model.num_classes()));
  model.set_training(false);
  NoGrad<S> guard;
  const int M = model.num_exits(), K = model.num_classes();
  LogitTrace trace;
  trace.n = ds.n;
  trace.m = M;
  trace.k = K;
  trace.logits.resize(static_cast<std::size_t>(ds.n) * M * K);
  trace.labels = ds.labels;
  trace.fingerprint = model.fingerprint();
  for (int s = 0; s < ds.n; ++s) {
    Tensor<S> x = make_batch<S>(ds, {s});
    std::vector<Tensor<S>> ys = model.forward_all(x);
    for (int m = 0; m < M; ++m)
      for (int c = 0; c < K; ++c)
        trace.logits[static_cast<std::size_t>(trace.index(s, m) + c)] =
            static_cast<float>(ys[static_cast<std::size_t>(m)].array()[c]);
  }
  return trace;
}

}  // namespace mx
