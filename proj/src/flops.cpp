#include "mx/flops.hpp"

#include <cmath>

namespace mx {

FlopsReport flops_report(const ModelSpec& spec, const CostOptions& opt) {
  const BackboneSpec& bb = spec.backbone;
  const int M = spec.num_exits();
  FlopsReport r;
  r.num_exits = M;

  // Cumulative backbone cost through each stage.
  std::vector<long long> cum;
  FeatShape cur = bb.input_shape();
  long long acc = 0;
  for (const auto& stage : bb.stages) {
    acc += graph_macs(stage, cur, opt);
    cur = propagate(stage, cur);
    cum.push_back(acc);
  }
  const long long head = graph_macs(bb.final_classifier, cur, opt);
  r.backbone_total = acc + head;

  for (int m = 1; m < M; ++m) {
    const BranchSpec& b = spec.branches[static_cast<std::size_t>(m - 1)];
    const FeatShape zin{b.input_channels, b.input_spatial, b.input_spatial};
    const long long branch = graph_macs(build_branch(b), zin, opt);
    r.branch_only_flops.push_back(branch);
    r.backbone_through_stage.push_back(cum[static_cast<std::size_t>(b.stage_index - 1)]);
    r.classifier_flops.push_back(cum[static_cast<std::size_t>(b.stage_index - 1)] + branch);
    r.branch_total += branch;
  }
  r.backbone_through_stage.push_back(acc);
  r.classifier_flops.push_back(r.backbone_total);
  r.total = r.backbone_total + r.branch_total;

  for (int m = 1; m < M; ++m)
    require(r.classifier_flops[static_cast<std::size_t>(m)] > r.classifier_flops[static_cast<std::size_t>(m - 1)],
            "flops_report: classifier costs must be strictly increasing in the exit index");
  return r;
}

double adaptive_flops(const FlopsReport& report, const std::vector<double>& exit_rates) {
  const int M = report.num_exits;
  require(static_cast<int>(exit_rates.size()) == M,
          "adaptive_flops: rate vector length " + std::to_string(exit_rates.size()) +
              " does not match exit count " + std::to_string(M));
  double sum = 0.0;
  for (double r : exit_rates) {
    require(r >= 0.0, "adaptive_flops: exit rates must be non-negative");
    sum += r;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "adaptive_flops: exit rates sum to " + std::to_string(sum) +
                                           ", expected 1 within 1e-9");
  double af = 0.0;
  double traversed = 0.0;  // cost of branches passed through before exit m
  for (int m = 0; m < M; ++m) {
    af += exit_rates[static_cast<std::size_t>(m)] *
          (static_cast<double>(report.classifier_flops[static_cast<std::size_t>(m)]) + traversed);
    if (m < M - 1) traversed += static_cast<double>(report.branch_only_flops[static_cast<std::size_t>(m)]);
  }
  return af;
}

}  // namespace mx
