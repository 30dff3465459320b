#pragma once

#include "mx/model_spec.hpp"

namespace mx {

// Static per-exit cost accounting. classifier_flops[m] covers the backbone
// through stage m+1 plus branch m+1 (0-based storage, 1-based exits); the last
// entry is the full backbone including its own classifier. branch_only_flops
// holds the branch increments FLOPs(f_m - B_m) for the intermediate exits.
struct FlopsReport {
  int num_exits = 0;
  std::vector<long long> classifier_flops;        // size M, strictly increasing
  std::vector<long long> branch_only_flops;       // size M-1
  std::vector<long long> backbone_through_stage;  // size M (last excludes the final head)
  long long backbone_total = 0;                   // backbone + final classifier
  long long branch_total = 0;                     // sum of branch_only_flops
  long long total = 0;                            // backbone_total + branch_total
};

FlopsReport flops_report(const ModelSpec& spec, const CostOptions& opt = {});

// Average cost of the thresholded early-exit system: a sample exiting at exit
// m pays classifier m plus every earlier branch it traversed, weighted by the
// exit-rate distribution.
double adaptive_flops(const FlopsReport& report, const std::vector<double>& exit_rates);

}  // namespace mx
