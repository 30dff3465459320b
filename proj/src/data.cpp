#include "mx/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mx {

namespace {

struct Rgb {
  double r, g, b;
};

// Distinct, saturated base colours spread around the hue circle.
Rgb class_color(int k, int num_classes) {
  const double h = 6.0 * static_cast<double>(k) / static_cast<double>(num_classes);
  const double s = 0.8, v = 0.85;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace

Dataset generate_synthetic(int num_classes, int per_class, int size, unsigned seed, double difficulty,
                           Dataset::Split split) {
  require(num_classes >= 2, "generate_synthetic: need at least 2 classes");
  require(per_class >= 1, "generate_synthetic: per_class must be positive");
  require(size >= 16, "generate_synthetic: size must be at least 16");
  require(difficulty >= 0.0, "generate_synthetic: difficulty must be non-negative");

  Dataset ds;
  ds.n = num_classes * per_class;
  ds.channels = 3;
  ds.height = size;
  ds.width = size;
  ds.num_classes = num_classes;
  ds.split = split;
  ds.images.resize(static_cast<std::size_t>(ds.n) * ds.image_size());
  ds.labels.resize(static_cast<std::size_t>(ds.n));

  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  long long si = 0;
  for (int k = 0; k < num_classes; ++k) {
    const Rgb base = class_color(k, num_classes);
    const double freq = 1.5 + static_cast<double>(k % 5);
    const double angle = M_PI * static_cast<double>(k % 7) / 7.0;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const int shape_kind = k % 3;  // 0: disc, 1: ring, 2: bars
    for (int j = 0; j < per_class; ++j, ++si) {
      ds.labels[static_cast<std::size_t>(si)] = static_cast<std::uint16_t>(k);
      const double phase = 2.0 * M_PI * uni(rng);
      const double jitter_amp = 1.0 + 3.0 * difficulty;
      const double cx = size / 2.0 + jitter_amp * (uni(rng) - 0.5) * 2.0;
      const double cy = size / 2.0 + jitter_amp * (uni(rng) - 0.5) * 2.0;
      const double radius = size * (0.24 + 0.04 * (uni(rng) - 0.5));
      const double hue_jit[3] = {difficulty * 0.10 * gauss(rng), difficulty * 0.10 * gauss(rng),
                                 difficulty * 0.10 * gauss(rng)};
      std::uint8_t* img = ds.images.data() + si * ds.image_size();
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double u = (ca * x + sa * y) / size;
          const double tex = std::sin(2.0 * M_PI * freq * u + phase);
          const double dx = x - cx, dy = y - cy;
          const double dist = std::sqrt(dx * dx + dy * dy);
          double mask = 0.0;
          if (shape_kind == 0) {
            mask = dist < radius ? 1.0 : 0.0;
          } else if (shape_kind == 1) {
            mask = (dist > radius * 0.55 && dist < radius) ? 1.0 : 0.0;
          } else {
            mask = (static_cast<int>((x + y + static_cast<int>(phase * 2)) / 4) % 2) ? 1.0 : 0.0;
          }
          const double chan_base[3] = {base.r + hue_jit[0], base.g + hue_jit[1], base.b + hue_jit[2]};
          for (int c = 0; c < 3; ++c) {
            double v = chan_base[c] * (0.55 + 0.30 * mask) + 0.20 * tex + 0.02 * gauss(rng) +
                       difficulty * 0.35 * gauss(rng);
            v = std::clamp(v, 0.0, 1.0);
            img[(static_cast<long long>(c) * size + y) * size + x] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
          }
        }
      }
    }
  }

  // Mix the class-major ordering so contiguous slices are class-balanced.
  std::vector<int> order(static_cast<std::size_t>(ds.n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Dataset out = ds;
  for (int i = 0; i < ds.n; ++i) {
    const int src = order[static_cast<std::size_t>(i)];
    out.labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(src)];
    std::copy_n(ds.images.begin() + src * ds.image_size(), ds.image_size(),
                out.images.begin() + static_cast<long long>(i) * ds.image_size());
  }
  return out;
}

bool parse_synth_spec(const std::string& text, int& k, int& n, int& size, unsigned& seed,
                      double& difficulty) {
  if (text.rfind("synth:", 0) != 0 && text != "synth") return false;
  k = 10;
  n = 200;
  size = 32;
  seed = 1;
  difficulty = 0.5;
  if (text == "synth") return true;
  std::stringstream ss(text.substr(6));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    require(eq != std::string::npos, "synth spec: expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    try {
      if (key == "k") k = std::stoi(val);
      else if (key == "n") n = std::stoi(val);
      else if (key == "size") size = std::stoi(val);
      else if (key == "seed") seed = static_cast<unsigned>(std::stoul(val));
      else if (key == "difficulty") difficulty = std::stod(val);
      else fail("synth spec: unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      fail("synth spec: bad value '" + val + "' for key '" + key + "'");
    }
  }
  return true;
}

}  // namespace mx
