#pragma once

#include <string>
#include <vector>

#include "mx/layers.hpp"

namespace mx {

// A staged backbone. Stages are the segments between consecutive branch
// points; branches attach after stages 1..M-1 (the first resolution drop and
// the final stage carry no branch), and the final classifier is the
// backbone's own head.
struct BackboneSpec {
  std::string name;
  int in_channels = 3;
  int input_spatial = 0;
  int num_classes = 0;
  std::vector<LayerGraph> stages;
  LayerGraph final_classifier;

  int num_stages() const { return static_cast<int>(stages.size()); }
  int eligible_branch_points() const { return num_stages() - 1; }
  FeatShape input_shape() const { return FeatShape{in_channels, input_spatial, input_spatial}; }
};

// Output dims after stage `stage_index` (1-based).
FeatShape stage_output(const BackboneSpec& spec, int stage_index);

// Validates per-stage shape propagation and the non-increasing-extent rule.
void validate_backbone(const BackboneSpec& spec);

BackboneSpec resnet18_spec(int num_classes = 1000, int input_spatial = 224);
BackboneSpec vgg16_spec(int num_classes = 1000, int input_spatial = 224);
BackboneSpec toynet_spec(int num_classes = 10, int input_spatial = 32);

// Lookup by name ("resnet18", "vgg16", "toynet"); throws on unknown names.
// A num_classes/input_spatial of 0 selects the backbone's default.
BackboneSpec backbone_by_name(const std::string& name, int num_classes = 0, int input_spatial = 0);

}  // namespace mx
