#include "mx/layers.hpp"

#include <sstream>

namespace mx {

std::string feat_str(const FeatShape& f) {
  std::ostringstream os;
  os << f.c << "x" << f.h << "x" << f.w;
  return os.str();
}

namespace {

int conv_out_extent(int in, int kernel, int stride, int padding, const char* what) {
  require(stride >= 1, std::string(what) + ": stride must be positive");
  require(padding >= 0, std::string(what) + ": padding must be non-negative");
  const int padded = in + 2 * padding;
  require(padded >= kernel, std::string(what) + ": kernel " + std::to_string(kernel) +
                                " does not fit padded extent " + std::to_string(padded));
  return (padded - kernel) / stride + 1;
}

std::string dim_arrow(const FeatShape& in, const FeatShape& out) {
  return feat_str(in) + " -> " + feat_str(out);
}

struct Describer {
  const FeatShape& in;
  const CostOptions& opt;
  std::vector<LayerDesc>* rows;  // may be null for pure propagation/costing
  long long* macs;               // may be null

  void emit(const std::string& name, const FeatShape& out, long long m) const {
    if (macs) *macs += m;
    if (rows) rows->push_back(LayerDesc{name, in, out, m});
  }

  FeatShape operator()(const ConvSpec& s) const {
    require(s.in_ch == in.c, "conv: input channels " + std::to_string(in.c) + " do not match spec in_ch " +
                                 std::to_string(s.in_ch));
    FeatShape out{s.out_ch, conv_out_extent(in.h, s.kernel, s.stride, s.padding, "conv"),
                  conv_out_extent(in.w, s.kernel, s.stride, s.padding, "conv")};
    const long long m = static_cast<long long>(s.kernel) * s.kernel * s.in_ch * s.out_ch * out.h * out.w;
    std::ostringstream os;
    os << "conv " << s.kernel << "x" << s.kernel << ", " << s.in_ch << "->" << s.out_ch << ", stride "
       << s.stride << ", pad " << s.padding;
    emit(os.str(), out, m);
    return out;
  }

  FeatShape operator()(const BatchNormSpec& s) const {
    require(s.channels == in.c, "batchnorm: channels " + std::to_string(s.channels) + " do not match input " +
                                    std::to_string(in.c));
    const long long m = opt.count_cheap_ops ? 2LL * in.c * in.h * in.w : 0;
    emit("batchnorm " + std::to_string(s.channels), in, m);
    return in;
  }

  FeatShape operator()(const ReluSpec&) const {
    const long long m = opt.count_cheap_ops ? static_cast<long long>(in.c) * in.h * in.w : 0;
    emit("relu", in, m);
    return in;
  }

  FeatShape operator()(const MaxPoolSpec& s) const {
    FeatShape out{in.c, conv_out_extent(in.h, s.kernel, s.stride, s.padding, "maxpool"),
                  conv_out_extent(in.w, s.kernel, s.stride, s.padding, "maxpool")};
    const long long m =
        opt.count_cheap_ops ? static_cast<long long>(s.kernel) * s.kernel * out.c * out.h * out.w : 0;
    std::ostringstream os;
    os << "maxpool " << s.kernel << "x" << s.kernel << ", stride " << s.stride;
    if (s.padding) os << ", pad " << s.padding;
    emit(os.str(), out, m);
    return out;
  }

  FeatShape operator()(const GlobalAvgPoolSpec&) const {
    FeatShape out{in.c, 1, 1};
    const long long m = opt.count_cheap_ops ? static_cast<long long>(in.c) * in.h * in.w : 0;
    emit("global avg pool", out, m);
    return out;
  }

  FeatShape operator()(const FlattenSpec&) const {
    FeatShape out{in.c * in.h * in.w, 1, 1};
    emit("flatten", out, 0);
    return out;
  }

  FeatShape operator()(const LinearSpec& s) const {
    require(in.h == 1 && in.w == 1, "linear: input must be flattened, got " + feat_str(in));
    require(s.in_features == in.c, "linear: input features " + std::to_string(in.c) +
                                       " do not match spec in_features " + std::to_string(s.in_features));
    FeatShape out{s.out_features, 1, 1};
    const long long m = static_cast<long long>(s.in_features) * s.out_features;
    emit("fc " + std::to_string(s.in_features) + "->" + std::to_string(s.out_features), out, m);
    return out;
  }

  FeatShape operator()(const SEBottleneckSpec& s) const;
  FeatShape operator()(const BasicBlockSpec& s) const;
};

FeatShape walk(const LayerSpec& layer, const FeatShape& in, const CostOptions& opt,
               std::vector<LayerDesc>* rows, long long* macs) {
  Describer d{in, opt, rows, macs};
  return std::visit(d, layer);
}

FeatShape Describer::operator()(const SEBottleneckSpec& s) const {
  require(s.in_ch == in.c, "se-b: input channels mismatch");
  require(s.stride == 1 || s.stride == 2, "se-b: stride must be 1 or 2");
  if (s.stride == 2)
    require(s.out_ch == 2 * s.in_ch, "se-b: stride-2 block must double channels, got " +
                                         std::to_string(s.in_ch) + "->" + std::to_string(s.out_ch));
  require(s.out_ch % 4 == 0, "se-b: out_channels " + std::to_string(s.out_ch) + " not divisible by 4");
  require(s.se_ratio > 0 && s.out_ch % s.se_ratio == 0,
          "se-b: out_channels " + std::to_string(s.out_ch) + " not divisible by se_reduction_ratio " +
              std::to_string(s.se_ratio));
  const int width = s.out_ch / 4;
  FeatShape cur = in;
  cur = walk(ConvSpec{s.in_ch, width, 1, 1, 0, false}, cur, opt, rows, macs);
  cur = walk(BatchNormSpec{width}, cur, opt, rows, macs);
  cur = walk(ReluSpec{}, cur, opt, rows, macs);
  cur = walk(ConvSpec{width, width, 3, s.stride, 1, false}, cur, opt, rows, macs);
  cur = walk(BatchNormSpec{width}, cur, opt, rows, macs);
  cur = walk(ReluSpec{}, cur, opt, rows, macs);
  cur = walk(ConvSpec{width, s.out_ch, 1, 1, 0, false}, cur, opt, rows, macs);
  cur = walk(BatchNormSpec{s.out_ch}, cur, opt, rows, macs);
  // SE gate on the expanded trunk: GAP, FC down, ReLU, FC up, sigmoid, scale.
  {
    const long long m = 2LL * s.out_ch * (s.out_ch / s.se_ratio) +
                        static_cast<long long>(s.out_ch) * cur.h * cur.w;
    if (macs) *macs += m;
    if (rows)
      rows->push_back(LayerDesc{"se gate " + std::to_string(s.out_ch) + "/" + std::to_string(s.se_ratio),
                                cur, cur, m});
  }
  const bool projected = s.stride != 1 || s.in_ch != s.out_ch;
  if (projected) {
    FeatShape sc = walk(ConvSpec{s.in_ch, s.out_ch, 3, s.stride, 1, false}, in, opt, rows, macs);
    sc = walk(BatchNormSpec{s.out_ch}, sc, opt, rows, macs);
    require(sc == cur, "se-b: shortcut shape " + feat_str(sc) + " does not match trunk " + feat_str(cur));
  }
  const long long add_m = opt.count_cheap_ops ? static_cast<long long>(cur.c) * cur.h * cur.w : 0;
  if (macs) *macs += add_m;
  if (rows) rows->push_back(LayerDesc{projected ? "residual add (projected)" : "residual add", cur, cur, add_m});
  cur = walk(ReluSpec{}, cur, opt, rows, macs);
  return cur;
}

FeatShape Describer::operator()(const BasicBlockSpec& s) const {
  require(s.in_ch == in.c, "basic block: input channels mismatch");
  FeatShape cur = in;
  cur = walk(ConvSpec{s.in_ch, s.out_ch, 3, s.stride, 1, false}, cur, opt, rows, macs);
  cur = walk(BatchNormSpec{s.out_ch}, cur, opt, rows, macs);
  cur = walk(ReluSpec{}, cur, opt, rows, macs);
  cur = walk(ConvSpec{s.out_ch, s.out_ch, 3, 1, 1, false}, cur, opt, rows, macs);
  cur = walk(BatchNormSpec{s.out_ch}, cur, opt, rows, macs);
  const bool projected = s.stride != 1 || s.in_ch != s.out_ch;
  if (projected) {
    FeatShape sc = walk(ConvSpec{s.in_ch, s.out_ch, 1, s.stride, 0, false}, in, opt, rows, macs);
    sc = walk(BatchNormSpec{s.out_ch}, sc, opt, rows, macs);
    require(sc == cur, "basic block: shortcut shape mismatch");
  }
  const long long add_m = opt.count_cheap_ops ? static_cast<long long>(cur.c) * cur.h * cur.w : 0;
  if (macs) *macs += add_m;
  if (rows) rows->push_back(LayerDesc{projected ? "residual add (projected)" : "residual add", cur, cur, add_m});
  cur = walk(ReluSpec{}, cur, opt, rows, macs);
  return cur;
}

}  // namespace

FeatShape propagate(const LayerSpec& layer, const FeatShape& in) {
  CostOptions opt;
  return walk(layer, in, opt, nullptr, nullptr);
}

FeatShape propagate(const LayerGraph& graph, const FeatShape& in) {
  FeatShape cur = in;
  for (const auto& l : graph) cur = propagate(l, cur);
  return cur;
}

FeatShape describe(const LayerSpec& layer, const FeatShape& in, const CostOptions& opt,
                   std::vector<LayerDesc>& out) {
  return walk(layer, in, opt, &out, nullptr);
}

FeatShape describe(const LayerGraph& graph, const FeatShape& in, const CostOptions& opt,
                   std::vector<LayerDesc>& out) {
  FeatShape cur = in;
  for (const auto& l : graph) cur = describe(l, cur, opt, out);
  return cur;
}

long long layer_macs(const LayerSpec& layer, const FeatShape& in, const CostOptions& opt) {
  long long m = 0;
  walk(layer, in, opt, nullptr, &m);
  return m;
}

long long graph_macs(const LayerGraph& graph, const FeatShape& in, const CostOptions& opt) {
  long long m = 0;
  FeatShape cur = in;
  for (const auto& l : graph) {
    long long lm = 0;
    cur = walk(l, cur, opt, nullptr, &lm);
    m += lm;
  }
  return m;
}

}  // namespace mx
