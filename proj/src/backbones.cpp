#include "mx/backbones.hpp"

namespace mx {

FeatShape stage_output(const BackboneSpec& spec, int stage_index) {
  require(stage_index >= 1 && stage_index <= spec.num_stages(),
          "stage_output: stage " + std::to_string(stage_index) + " out of range [1, " +
              std::to_string(spec.num_stages()) + "]");
  FeatShape cur = spec.input_shape();
  for (int i = 0; i < stage_index; ++i) cur = propagate(spec.stages[static_cast<std::size_t>(i)], cur);
  return cur;
}

void validate_backbone(const BackboneSpec& spec) {
  require(spec.num_stages() >= 1, "backbone '" + spec.name + "': needs at least one stage");
  FeatShape cur = spec.input_shape();
  int prev_extent = spec.input_spatial;
  for (const auto& stage : spec.stages) {
    cur = propagate(stage, cur);
    require(cur.h <= prev_extent, "backbone '" + spec.name + "': spatial extent must be non-increasing");
    prev_extent = cur.h;
  }
  FeatShape out = propagate(spec.final_classifier, cur);
  require(out.c == spec.num_classes && out.h == 1 && out.w == 1,
          "backbone '" + spec.name + "': final classifier emits " + feat_str(out) + ", expected " +
              std::to_string(spec.num_classes) + " classes");
}

BackboneSpec resnet18_spec(int num_classes, int input_spatial) {
  BackboneSpec b;
  b.name = "resnet18";
  b.num_classes = num_classes;
  b.input_spatial = input_spatial;
  // Stage 1 carries the stem: 7x7/64 stride-2 conv, 3x3 stride-2 max pool,
  // then two 64-channel basic blocks.
  b.stages.push_back({ConvSpec{3, 64, 7, 2, 3, false}, BatchNormSpec{64}, ReluSpec{},
                      MaxPoolSpec{3, 2, 1}, BasicBlockSpec{64, 64, 1}, BasicBlockSpec{64, 64, 1}});
  b.stages.push_back({BasicBlockSpec{64, 128, 2}, BasicBlockSpec{128, 128, 1}});
  b.stages.push_back({BasicBlockSpec{128, 256, 2}, BasicBlockSpec{256, 256, 1}});
  b.stages.push_back({BasicBlockSpec{256, 512, 2}, BasicBlockSpec{512, 512, 1}});
  b.final_classifier = {GlobalAvgPoolSpec{}, LinearSpec{512, num_classes, true}};
  validate_backbone(b);
  return b;
}

namespace {

void vgg_conv(LayerGraph& g, int in_ch, int out_ch) {
  g.push_back(ConvSpec{in_ch, out_ch, 3, 1, 1, false});
  g.push_back(BatchNormSpec{out_ch});
  g.push_back(ReluSpec{});
}

}  // namespace

BackboneSpec vgg16_spec(int num_classes, int input_spatial) {
  BackboneSpec b;
  b.name = "vgg16";
  b.num_classes = num_classes;
  b.input_spatial = input_spatial;
  // Branches sit after the second, third and fourth pooling layers, so the
  // first two conv blocks form stage 1.
  LayerGraph s1;
  vgg_conv(s1, 3, 64);
  vgg_conv(s1, 64, 64);
  s1.push_back(MaxPoolSpec{2, 2, 0});
  vgg_conv(s1, 64, 128);
  vgg_conv(s1, 128, 128);
  s1.push_back(MaxPoolSpec{2, 2, 0});
  b.stages.push_back(std::move(s1));

  LayerGraph s2;
  vgg_conv(s2, 128, 256);
  vgg_conv(s2, 256, 256);
  vgg_conv(s2, 256, 256);
  s2.push_back(MaxPoolSpec{2, 2, 0});
  b.stages.push_back(std::move(s2));

  LayerGraph s3;
  vgg_conv(s3, 256, 512);
  vgg_conv(s3, 512, 512);
  vgg_conv(s3, 512, 512);
  s3.push_back(MaxPoolSpec{2, 2, 0});
  b.stages.push_back(std::move(s3));

  LayerGraph s4;
  vgg_conv(s4, 512, 512);
  vgg_conv(s4, 512, 512);
  vgg_conv(s4, 512, 512);
  s4.push_back(MaxPoolSpec{2, 2, 0});
  b.stages.push_back(std::move(s4));

  const int tail = input_spatial / 32;
  b.final_classifier = {FlattenSpec{}, LinearSpec{512 * tail * tail, 4096, true}, ReluSpec{},
                        LinearSpec{4096, 4096, true}, ReluSpec{}, LinearSpec{4096, num_classes, true}};
  validate_backbone(b);
  return b;
}

BackboneSpec toynet_spec(int num_classes, int input_spatial) {
  BackboneSpec b;
  b.name = "toynet";
  b.num_classes = num_classes;
  b.input_spatial = input_spatial;
  auto stage = [](int in_ch, int out_ch) {
    LayerGraph g;
    g.push_back(ConvSpec{in_ch, out_ch, 3, 1, 1, false});
    g.push_back(BatchNormSpec{out_ch});
    g.push_back(ReluSpec{});
    g.push_back(ConvSpec{out_ch, out_ch, 3, 1, 1, false});
    g.push_back(BatchNormSpec{out_ch});
    g.push_back(ReluSpec{});
    g.push_back(MaxPoolSpec{2, 2, 0});
    return g;
  };
  b.stages.push_back(stage(3, 16));
  b.stages.push_back(stage(16, 32));
  b.stages.push_back(stage(32, 64));
  b.final_classifier = {GlobalAvgPoolSpec{}, LinearSpec{64, num_classes, true}};
  validate_backbone(b);
  return b;
}

BackboneSpec backbone_by_name(const std::string& name, int num_classes, int input_spatial) {
  if (name == "resnet18")
    return resnet18_spec(num_classes > 0 ? num_classes : 1000, input_spatial > 0 ? input_spatial : 224);
  if (name == "vgg16")
    return vgg16_spec(num_classes > 0 ? num_classes : 1000, input_spatial > 0 ? input_spatial : 224);
  if (name == "toynet")
    return toynet_spec(num_classes > 0 ? num_classes : 10, input_spatial > 0 ? input_spatial : 32);
  fail("unknown backbone '" + name + "' (expected resnet18, vgg16 or toynet)");
}

}  // namespace mx
