#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mx/tensor.hpp"

namespace mx {

// Labeled 8-bit image set. Splits are generated independently (disjoint by
// construction) and tagged.
struct Dataset {
  enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

  int n = 0, channels = 0, height = 0, width = 0, num_classes = 0;
  Split split = Split::train;
  std::vector<std::uint8_t> images;   // n * channels * height * width, row-major
  std::vector<std::uint16_t> labels;  // in [0, num_classes)

  long long image_size() const { return static_cast<long long>(channels) * height * width; }
};

// Class-conditional images: a per-class base colour, a per-class oriented
// texture frequency and a per-class geometric pattern, plus benign per-sample
// jitter. `difficulty` in [0, 1] scales pixel noise, colour jitter and
// placement jitter; at 0 the classes are separable by a linear probe on raw
// pixels. Deterministic per seed.
Dataset generate_synthetic(int num_classes, int per_class, int size, unsigned seed, double difficulty,
                           Dataset::Split split = Dataset::Split::train);

// Parses "synth:k=10,n=200,size=32,seed=1,difficulty=0.5" specs (any key may
// be omitted; defaults shown). Returns false if `text` is not a synth spec.
bool parse_synth_spec(const std::string& text, int& k, int& n, int& size, unsigned& seed,
                      double& difficulty);

// Normalized float batch in NCHW ([-1, 1] range); `flip` mirrors samples
// horizontally (index parallel to `indices`).
template <typename S = float>
Tensor<S> make_batch(const Dataset& ds, const std::vector<int>& indices,
                     const std::vector<char>* flip = nullptr) {
  require(!indices.empty(), "make_batch: empty index list");
  const int C = ds.channels, H = ds.height, W = ds.width;
  Tensor<S> x = Tensor<S>::zeros({static_cast<int>(indices.size()), C, H, W});
  S* out = x.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const int idx = indices[b];
    require(idx >= 0 && idx < ds.n, "make_batch: index out of range");
    const std::uint8_t* img = ds.images.data() + static_cast<long long>(idx) * ds.image_size();
    const bool mirrored = flip && (*flip)[b];
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const int sw = mirrored ? (W - 1 - w) : w;
          *out++ = static_cast<S>(img[(static_cast<long long>(c) * H + h) * W + sw]) / S(127.5) - S(1);
        }
  }
  return x;
}

inline std::vector<int> batch_labels(const Dataset& ds, const std::vector<int>& indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int idx : indices) out.push_back(static_cast<int>(ds.labels[static_cast<std::size_t>(idx)]));
  return out;
}

}  // namespace mx
