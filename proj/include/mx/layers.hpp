#pragma once

#include <string>
#include <variant>
#include <vector>

#include "mx/common.hpp"

namespace mx {

// Static layer vocabulary. Architectures (backbones, branches, reconstructors)
// are described with these specs first; the cost model and the text summary
// walk the specs directly, and the runtime materializes them into modules.

struct ConvSpec {
  int in_ch = 0, out_ch = 0, kernel = 1, stride = 1, padding = 0;
  bool bias = true;
};

struct BatchNormSpec {
  int channels = 0;
};

struct ReluSpec {};

struct MaxPoolSpec {
  int kernel = 2, stride = 2, padding = 0;
};

struct GlobalAvgPoolSpec {};

struct FlattenSpec {};

struct LinearSpec {
  int in_features = 0, out_features = 0;
  bool bias = true;
};

// Bottleneck residual block with a squeeze-excitation gate on the expanded
// trunk. Internal width is out_ch/4; the SE squeeze width is out_ch/se_ratio.
// A stride-2 block halves the spatial extent and must double the channels;
// when the shape changes the shortcut is a 3x3 stride-matched projection
// convolution with batch norm.
struct SEBottleneckSpec {
  int in_ch = 0, out_ch = 0, stride = 1, se_ratio = 16;
};

// Plain two-conv residual block (backbone vocabulary); 1x1 projection shortcut
// when the shape changes.
struct BasicBlockSpec {
  int in_ch = 0, out_ch = 0, stride = 1;
};

using LayerSpec = std::variant<ConvSpec, BatchNormSpec, ReluSpec, MaxPoolSpec, GlobalAvgPoolSpec,
                               FlattenSpec, LinearSpec, SEBottleneckSpec, BasicBlockSpec>;
using LayerGraph = std::vector<LayerSpec>;

// Feature dims of one sample flowing through a graph. After a pooling or
// flatten collapse, h == w == 1 and c carries the feature count.
struct FeatShape {
  int c = 0, h = 0, w = 0;
  bool operator==(const FeatShape&) const = default;
};

std::string feat_str(const FeatShape& f);

// MAC counting convention: one multiply-accumulate = one FLOP.
//   conv:   K*K*Cin*Cout*Hout*Wout           (bias excluded)
//   linear: In*Out                           (bias excluded)
//   SE gate: 2*C^2/ratio + C*H*W             (two FCs plus the gating multiply)
//   BN / activations / pooling / residual adds: 0 by default
// `count_cheap_ops` switches the zero-cost group to one op per output element
// (two for BN: scale and shift; K*K per output for pooling).
struct CostOptions {
  bool count_cheap_ops = false;
};

// One row of an architecture description.
struct LayerDesc {
  std::string name;    // e.g. "conv 3x3, 64->128, stride 2, pad 1"
  FeatShape in, out;
  long long macs = 0;
};

// Shape propagation with validation; throws on any inconsistency.
FeatShape propagate(const LayerSpec& layer, const FeatShape& in);
FeatShape propagate(const LayerGraph& graph, const FeatShape& in);

// Expands composites and appends one row per primitive op.
FeatShape describe(const LayerSpec& layer, const FeatShape& in, const CostOptions& opt,
                   std::vector<LayerDesc>& out);
FeatShape describe(const LayerGraph& graph, const FeatShape& in, const CostOptions& opt,
                   std::vector<LayerDesc>& out);

long long graph_macs(const LayerGraph& graph, const FeatShape& in, const CostOptions& opt = {});
long long layer_macs(const LayerSpec& layer, const FeatShape& in, const CostOptions& opt = {});

}  // namespace mx
