#include "mx/exit_policy.hpp"

#include <cmath>

namespace mx {

double max_softmax(const float* logits, int k) {
  double zmax = logits[0];
  for (int i = 1; i < k; ++i) zmax = std::max(zmax, static_cast<double>(logits[i]));
  double denom = 0.0;
  for (int i = 0; i < k; ++i) denom += std::exp(static_cast<double>(logits[i]) - zmax);
  return 1.0 / denom;
}

int argmax(const float* logits, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

std::vector<int> simulate_exits(const LogitTrace& trace, const ExitPolicy& policy) {
  require(static_cast<int>(policy.gammas.size()) == trace.m - 1,
          "simulate: policy has " + std::to_string(policy.gammas.size()) + " thresholds, trace has " +
              std::to_string(trace.m) + " exits");
  std::vector<int> exits(static_cast<std::size_t>(trace.n));
  for (int s = 0; s < trace.n; ++s) {
    int taken = trace.m;
    for (int i = 1; i < trace.m; ++i) {
      const double conf = max_softmax(&trace.logits[static_cast<std::size_t>(trace.index(s, i - 1))], trace.k);
      if (conf >= policy.gammas[static_cast<std::size_t>(i - 1)]) {
        taken = i;
        break;
      }
    }
    exits[static_cast<std::size_t>(s)] = taken;
  }
  return exits;
}

SimResult simulate(const LogitTrace& trace, const ExitPolicy& policy, const FlopsReport& report) {
  require(report.num_exits == trace.m, "simulate: report has " + std::to_string(report.num_exits) +
                                           " exits, trace has " + std::to_string(trace.m));
  const std::vector<int> exits = simulate_exits(trace, policy);
  SimResult r;
  r.exit_counts.assign(static_cast<std::size_t>(trace.m), 0);
  long long correct = 0;
  for (int s = 0; s < trace.n; ++s) {
    const int e = exits[static_cast<std::size_t>(s)];
    ++r.exit_counts[static_cast<std::size_t>(e - 1)];
    const int pred = argmax(&trace.logits[static_cast<std::size_t>(trace.index(s, e - 1))], trace.k);
    if (pred == static_cast<int>(trace.labels[static_cast<std::size_t>(s)])) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(trace.n);
  r.exit_rates.resize(static_cast<std::size_t>(trace.m));
  for (int m = 0; m < trace.m; ++m)
    r.exit_rates[static_cast<std::size_t>(m)] =
        static_cast<double>(r.exit_counts[static_cast<std::size_t>(m)]) / static_cast<double>(trace.n);
  r.af = adaptive_flops(report, r.exit_rates);
  return r;
}

CalibrationResult calibrate(const LogitTrace& trace, const FlopsReport& report,
                            const CalibrationObjective& objective, double grid_step) {
  require(grid_step > 0.0 && grid_step <= 1.0, "calibrate: grid step must be in (0, 1]");
  require(trace.m >= 2, "calibrate: trace must have at least one intermediate exit");
  require(report.num_exits == trace.m, "calibrate: report/trace exit count mismatch");

  // Precompute per-sample, per-intermediate-exit confidence and per-exit
  // correctness so each grid point is a cheap scan.
  const int N = trace.n, M = trace.m;
  std::vector<double> conf(static_cast<std::size_t>(N) * (M - 1));
  std::vector<char> correct(static_cast<std::size_t>(N) * M);
  for (int s = 0; s < N; ++s) {
    for (int m = 0; m < M; ++m) {
      const float* row = &trace.logits[static_cast<std::size_t>(trace.index(s, m))];
      correct[static_cast<std::size_t>(s) * M + m] =
          argmax(row, trace.k) == static_cast<int>(trace.labels[static_cast<std::size_t>(s)]);
      if (m < M - 1) conf[static_cast<std::size_t>(s) * (M - 1) + m] = max_softmax(row, trace.k);
    }
  }

  std::vector<double> grid;
  const int steps = static_cast<int>(std::floor(1.0 / grid_step + 1e-9));
  for (int i = 0; i <= steps; ++i) grid.push_back(std::min(1.0, i * grid_step));

  auto evaluate = [&](const std::vector<double>& gammas) {
    std::vector<long long> counts(static_cast<std::size_t>(M), 0);
    long long ncorrect = 0;
    for (int s = 0; s < N; ++s) {
      int e = M;
      for (int i = 0; i < M - 1; ++i) {
        if (conf[static_cast<std::size_t>(s) * (M - 1) + i] >= gammas[static_cast<std::size_t>(i)]) {
          e = i + 1;
          break;
        }
      }
      ++counts[static_cast<std::size_t>(e - 1)];
      ncorrect += correct[static_cast<std::size_t>(s) * M + (e - 1)];
    }
    SimResult r;
    r.exit_counts = counts;
    r.exit_rates.resize(static_cast<std::size_t>(M));
    for (int m = 0; m < M; ++m)
      r.exit_rates[static_cast<std::size_t>(m)] = static_cast<double>(counts[static_cast<std::size_t>(m)]) / N;
    r.accuracy = static_cast<double>(ncorrect) / N;
    r.af = adaptive_flops(report, r.exit_rates);
    return r;
  };

  const bool min_af = objective.kind == ObjectiveKind::min_flops_at_accuracy;
  bool have_best = false;
  std::vector<double> best_gammas;
  SimResult best_result;
  double best_attainable = min_af ? 0.0 : std::numeric_limits<double>::infinity();

  std::vector<std::size_t> odo(static_cast<std::size_t>(M - 1), 0);
  while (true) {
    std::vector<double> gammas(static_cast<std::size_t>(M - 1));
    for (int i = 0; i < M - 1; ++i) gammas[static_cast<std::size_t>(i)] = grid[odo[static_cast<std::size_t>(i)]];
    const SimResult r = evaluate(gammas);
    if (min_af)
      best_attainable = std::max(best_attainable, r.accuracy);
    else
      best_attainable = std::min(best_attainable, r.af);
    const bool feasible = min_af ? r.accuracy >= objective.target : r.af <= objective.target;
    if (feasible) {
      bool better = false;
      if (!have_best) {
        better = true;
      } else if (min_af) {
        better = r.af < best_result.af || (r.af == best_result.af && gammas < best_gammas);
      } else {
        better = r.accuracy > best_result.accuracy ||
                 (r.accuracy == best_result.accuracy &&
                  (r.af < best_result.af || (r.af == best_result.af && gammas < best_gammas)));
      }
      if (better) {
        have_best = true;
        best_gammas = gammas;
        best_result = r;
      }
    }
    // odometer over the grid, last exit threshold fastest
    int pos = M - 2;
    for (; pos >= 0; --pos) {
      if (++odo[static_cast<std::size_t>(pos)] < grid.size()) break;
      odo[static_cast<std::size_t>(pos)] = 0;
    }
    if (pos < 0) break;
  }

  if (!have_best) {
    std::ostringstream os;
    os << "calibrate: objective infeasible ("
       << (min_af ? "no grid policy reaches accuracy " : "no grid policy fits FLOPs budget ")
       << objective.target << "); best attainable "
       << (min_af ? "accuracy " : "average FLOPs ") << best_attainable;
    throw InfeasibleObjective(os.str(), best_attainable);
  }
  return CalibrationResult{ExitPolicy{best_gammas}, best_result};
}

ConfidenceHistogram confidence_histogram(const LogitTrace& trace, int exit_index, int bins) {
  require(bins >= 2, "confidence_histogram: need at least 2 bins");
  require(exit_index >= 1 && exit_index <= trace.m,
          "confidence_histogram: exit " + std::to_string(exit_index) + " out of range [1, " +
              std::to_string(trace.m) + "]");
  ConfidenceHistogram h;
  h.exit_index = exit_index;
  const double lo = 1.0 / trace.k;
  const double width = (1.0 - lo) / bins;
  for (int b = 0; b < bins; ++b) {
    h.bin_lo.push_back(lo + b * width);
    h.bin_hi.push_back(b == bins - 1 ? 1.0 : lo + (b + 1) * width);
  }
  h.correct.assign(static_cast<std::size_t>(bins), 0);
  h.incorrect.assign(static_cast<std::size_t>(bins), 0);
  for (int s = 0; s < trace.n; ++s) {
    const float* row = &trace.logits[static_cast<std::size_t>(trace.index(s, exit_index - 1))];
    const double conf = max_softmax(row, trace.k);
    int b = static_cast<int>((conf - lo) / width);
    b = std::max(0, std::min(bins - 1, b));
    if (argmax(row, trace.k) == static_cast<int>(trace.labels[static_cast<std::size_t>(s)]))
      ++h.correct[static_cast<std::size_t>(b)];
    else
      ++h.incorrect[static_cast<std::size_t>(b)];
  }
  return h;
}

std::vector<double> trace_exit_accuracies(const LogitTrace& trace) {
  std::vector<double> acc(static_cast<std::size_t>(trace.m), 0.0);
  for (int m = 0; m < trace.m; ++m) {
    long long c = 0;
    for (int s = 0; s < trace.n; ++s) {
      const float* row = &trace.logits[static_cast<std::size_t>(trace.index(s, m))];
      if (argmax(row, trace.k) == static_cast<int>(trace.labels[static_cast<std::size_t>(s)])) ++c;
    }
    acc[static_cast<std::size_t>(m)] = static_cast<double>(c) / trace.n;
  }
  return acc;
}

}  // namespace mx
