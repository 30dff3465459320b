#pragma once

#include "mx/layers.hpp"

namespace mx {

// Branch building blocks: the SE-bottleneck, the cost-equalizing reduction
// convolution and whole branch classifiers assembled by level.

struct SEBSpec {
  int in_channels = 0;
  int out_channels = 0;
  int spatial_stride = 1;        // 1 (shape-preserving) or 2 (downsampling)
  int se_reduction_ratio = 16;
};

// Validates the spec and yields the block as a layer graph.
LayerGraph build_se_b(const SEBSpec& spec);

struct ReductionConv {
  int kernel = 0, stride = 0, padding = 0;
};

// Chooses the branch entry convolution for a stage: stride matches the
// spatial ratio, the kernel is the feasible size whose kernel^2 * in_channels
// is closest to the 3x3-at-penultimate-stage reference (9 * target_channels),
// and padding solves the output-size equation exactly. Throws when no integer
// padding solution exists.
ReductionConv reduction_conv_for_stage(int input_channels, int input_spatial, int target_channels,
                                       int target_spatial);

// A branch classifier attached at `stage_index`. Level 0 is the naive branch
// (global average pooling + fully-connected); level L >= 1 is the reduction
// conv, one downsampling SE-B, L-1 shape-preserving SE-Bs, pooling and the
// classifier head.
struct BranchSpec {
  int level = 0;
  int stage_index = 1;      // 1-based, in [1, M-1]
  int input_channels = 0;
  int input_spatial = 0;
  int num_classes = 0;
  int target_channels = 0;  // penultimate-stage channels
  int target_spatial = 0;   // penultimate-stage extent
  int se_reduction_ratio = 16;
  bool reduction_bn_relu = true;  // BN + ReLU after the reduction conv
  ReductionConv reduction;        // derived; filled by make_branch_spec
};

BranchSpec make_branch_spec(int level, int stage_index, int input_channels, int input_spatial,
                            int target_channels, int target_spatial, int num_classes,
                            int se_reduction_ratio = 16, bool reduction_bn_relu = true);

LayerGraph build_branch(const BranchSpec& spec);

}  // namespace mx
