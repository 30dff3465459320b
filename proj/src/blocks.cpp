#include "mx/blocks.hpp"

#include <cstdlib>
#include <limits>

namespace mx {

LayerGraph build_se_b(const SEBSpec& spec) {
  require(spec.in_channels > 0 && spec.out_channels > 0, "se-b: channel counts must be positive");
  require(spec.spatial_stride == 1 || spec.spatial_stride == 2, "se-b: spatial_stride must be 1 or 2");
  if (spec.spatial_stride == 2)
    require(spec.out_channels == 2 * spec.in_channels,
            "se-b: a downsampling block halves the extent and doubles the channels; got " +
                std::to_string(spec.in_channels) + "->" + std::to_string(spec.out_channels));
  require(spec.out_channels % 4 == 0,
          "se-b: out_channels " + std::to_string(spec.out_channels) + " not divisible by 4");
  require(spec.se_reduction_ratio > 0 && spec.out_channels % spec.se_reduction_ratio == 0,
          "se-b: out_channels " + std::to_string(spec.out_channels) +
              " not divisible by se_reduction_ratio " + std::to_string(spec.se_reduction_ratio));
  return {SEBottleneckSpec{spec.in_channels, spec.out_channels, spec.spatial_stride,
                           spec.se_reduction_ratio}};
}

ReductionConv reduction_conv_for_stage(int input_channels, int input_spatial, int target_channels,
                                       int target_spatial) {
  require(input_channels > 0 && target_channels > 0, "reduction conv: channel counts must be positive");
  require(input_spatial >= target_spatial,
          "reduction conv: input extent " + std::to_string(input_spatial) + " smaller than target " +
              std::to_string(target_spatial));
  require(target_spatial > 0 && input_spatial % target_spatial == 0,
          "reduction conv: input extent " + std::to_string(input_spatial) +
              " not divisible by target extent " + std::to_string(target_spatial));
  const int stride = input_spatial / target_spatial;
  // Reference cost: the penultimate stage keeps its 3x3 convolution, so
  // kernel^2 * in_channels should track 9 * target_channels across stages.
  const long long ref = 9LL * target_channels;
  int best_k = -1;
  long long best_dist = std::numeric_limits<long long>::max();
  int best_pad = 0;
  for (int k = 1; k <= input_spatial + 2 * 8; ++k) {
    const int need = (target_spatial - 1) * stride + k - input_spatial;
    if (need < 0 || need % 2 != 0) continue;  // no integer padding for this kernel
    const int pad = need / 2;
    if (pad >= k) continue;  // window would be all padding
    const long long dist = std::llabs(static_cast<long long>(k) * k * input_channels - ref);
    if (dist < best_dist) {
      best_dist = dist;
      best_k = k;
      best_pad = pad;
    }
  }
  require(best_k > 0, "reduction conv: no integer padding solution for " + std::to_string(input_spatial) +
                          " -> " + std::to_string(target_spatial) + " at stride " + std::to_string(stride));
  return ReductionConv{best_k, stride, best_pad};
}

BranchSpec make_branch_spec(int level, int stage_index, int input_channels, int input_spatial,
                            int target_channels, int target_spatial, int num_classes,
                            int se_reduction_ratio, bool reduction_bn_relu) {
  require(level >= 0, "branch: level must be non-negative, got " + std::to_string(level));
  require(num_classes > 0, "branch: num_classes must be positive");
  BranchSpec s;
  s.level = level;
  s.stage_index = stage_index;
  s.input_channels = input_channels;
  s.input_spatial = input_spatial;
  s.num_classes = num_classes;
  s.target_channels = target_channels;
  s.target_spatial = target_spatial;
  s.se_reduction_ratio = se_reduction_ratio;
  s.reduction_bn_relu = reduction_bn_relu;
  if (level >= 1)
    s.reduction = reduction_conv_for_stage(input_channels, input_spatial, target_channels, target_spatial);
  return s;
}

LayerGraph build_branch(const BranchSpec& spec) {
  require(spec.level >= 0, "branch: invalid level " + std::to_string(spec.level));
  LayerGraph g;
  if (spec.level == 0) {
    // Naive branch: exactly pooling + classifier.
    g.push_back(GlobalAvgPoolSpec{});
    g.push_back(LinearSpec{spec.input_channels, spec.num_classes, true});
    return g;
  }
  g.push_back(ConvSpec{spec.input_channels, spec.target_channels, spec.reduction.kernel,
                       spec.reduction.stride, spec.reduction.padding, !spec.reduction_bn_relu});
  if (spec.reduction_bn_relu) {
    g.push_back(BatchNormSpec{spec.target_channels});
    g.push_back(ReluSpec{});
  }
  const int wide = 2 * spec.target_channels;
  LayerGraph down = build_se_b(SEBSpec{spec.target_channels, wide, 2, spec.se_reduction_ratio});
  g.insert(g.end(), down.begin(), down.end());
  for (int i = 1; i < spec.level; ++i) {
    LayerGraph same = build_se_b(SEBSpec{wide, wide, 1, spec.se_reduction_ratio});
    g.insert(g.end(), same.begin(), same.end());
  }
  g.push_back(GlobalAvgPoolSpec{});
  g.push_back(LinearSpec{wide, spec.num_classes, true});
  return g;
}

}  // namespace mx
