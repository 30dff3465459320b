#include <doctest.h>

#include "test_helpers.hpp"

using namespace mx;

TEST_CASE("conv2d identity kernel passes input through") {
  auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto w = Tensor<float>::full({1, 1, 1, 1}, 1.0f);
  auto y = conv2d(x, w, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (long long i = 0; i < y.numel(); ++i) CHECK(y.array()[i] == doctest::Approx(1.0f));
}

TEST_CASE("conv2d reduction geometry: 64ch 56x56 through 6x6/256 stride 4 pad 1") {
  auto x = mxtest::randf({1, 64, 56, 56}, 3, 0.1f);
  auto w = mxtest::randf({256, 64, 6, 6}, 4, 0.05f);
  auto y = conv2d(x, w, 4, 1);
  CHECK(y.shape() == Shape{1, 256, 14, 14});
}

TEST_CASE("conv2d matches the six-loop oracle") {
  auto x = mxtest::randf({2, 3, 8, 8}, 11);
  auto w = mxtest::randf({4, 3, 3, 3}, 12, 0.5);
  auto b = mxtest::randf({4}, 13, 0.5);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 0}, std::pair{2, 1}}) {
    auto got = conv2d(x, w, b, stride, pad);
    auto want = mxtest::conv2d_loop_oracle(x, w, b, stride, pad);
    REQUIRE(got.shape() == want.shape());
    for (long long i = 0; i < got.numel(); ++i)
      CHECK(got.array()[i] == doctest::Approx(want.array()[i]).epsilon(1e-5));
  }
}

TEST_CASE("conv2d rejects channel mismatches naming the dimensions") {
  auto x = Tensor<float>::zeros({1, 3, 8, 8});
  auto w = Tensor<float>::zeros({4, 5, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d(x, w, 1, 1),
                       doctest::Contains("input channels 3"), std::invalid_argument);
  auto w2 = Tensor<float>::zeros({4, 3, 11, 11});
  CHECK_THROWS_AS(conv2d(x, w2, 1, 0), std::invalid_argument);
}

TEST_CASE("batchnorm2d train mode normalizes to zero mean unit variance") {
  auto x = mxtest::randf({4, 3, 5, 5}, 21, 2.0);
  x.array() += 1.5f;
  auto gamma = Tensor<float>::full({3}, 1.0f);
  auto beta = Tensor<float>::zeros({3});
  auto rm = Tensor<float>::zeros({3});
  auto rv = Tensor<float>::full({3}, 1.0f);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, true);
  const long long plane = 25;
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (int n = 0; n < 4; ++n)
      for (long long i = 0; i < plane; ++i) {
        const double v = y.array()[(n * 3 + c) * plane + i];
        sum += v;
        sq += v * v;
      }
    const double mean = sum / (4 * plane);
    const double var = sq / (4 * plane) - mean * mean;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm2d eval mode with unit running stats is near-identity") {
  auto x = mxtest::randf({2, 3, 4, 4}, 22);
  auto gamma = Tensor<float>::full({3}, 1.0f);
  auto beta = Tensor<float>::zeros({3});
  auto rm = Tensor<float>::zeros({3});
  auto rv = Tensor<float>::full({3}, 1.0f);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, false);
  for (long long i = 0; i < y.numel(); ++i)
    CHECK(y.array()[i] == doctest::Approx(x.array()[i]).epsilon(1e-4));
}

TEST_CASE("batchnorm2d rejects train mode with batch size 1") {
  auto x = Tensor<float>::zeros({1, 3, 4, 4});
  auto gamma = Tensor<float>::full({3}, 1.0f);
  auto beta = Tensor<float>::zeros({3});
  auto rm = Tensor<float>::zeros({3});
  auto rv = Tensor<float>::full({3}, 1.0f);
  CHECK_THROWS_AS(batchnorm2d(x, gamma, beta, rm, rv, true), std::invalid_argument);
  CHECK_NOTHROW(batchnorm2d(x, gamma, beta, rm, rv, false));
}

TEST_CASE("batchnorm2d input gradient matches finite differences") {
  const double err = mxtest::grad_check_module<float>({BatchNormSpec{3}}, {3, 3, 4, 4}, 31, 1e-3, true);
  CHECK(err < 1e-3);
}

TEST_CASE("global_avg_pool of a constant tensor is that constant") {
  auto x = Tensor<float>::full({1, 6, 7, 7}, 3.25f);
  auto y = global_avg_pool(x);
  REQUIRE(y.shape() == Shape{1, 6});
  for (long long i = 0; i < y.numel(); ++i) CHECK(y.array()[i] == doctest::Approx(3.25f));
}

TEST_CASE("relu(-x) + relu(x) equals |x| elementwise") {
  auto x = mxtest::randf({3, 4, 5, 5}, 41);
  auto s = add(relu(scalar_multiply(x, -1.0f)), relu(x));
  for (long long i = 0; i < x.numel(); ++i)
    CHECK(s.array()[i] == doctest::Approx(std::abs(x.array()[i])));
}

TEST_CASE("linear matches an explicit dot-product oracle") {
  auto x = mxtest::randf({4, 5}, 51);
  auto w = mxtest::randf({3, 5}, 52);
  auto b = mxtest::randf({3}, 53);
  auto y = linear(x, w, b);
  REQUIRE(y.shape() == Shape{4, 3});
  for (int n = 0; n < 4; ++n)
    for (int o = 0; o < 3; ++o) {
      double acc = b.array()[o];
      for (int f = 0; f < 5; ++f) acc += double(x.array()[n * 5 + f]) * double(w.array()[o * 5 + f]);
      CHECK(y.array()[n * 3 + o] == doctest::Approx(acc).epsilon(1e-6));
    }
}

TEST_CASE("maxpool2d routes gradient to the argmax, first index on ties") {
  auto x = Tensor<float>::from({1, 1, 2, 2}, {2.0f, 2.0f, 1.0f, 2.0f});
  x.set_requires_grad(true);
  Tape<float> tape;
  auto y = maxpool2d(x, 2, 2);
  REQUIRE(y.numel() == 1);
  CHECK(y.array()[0] == 2.0f);
  tape.backward(mx::sum(y));
  CHECK(x.grad()[0] == 1.0f);  // first of the tied maxima
  CHECK(x.grad()[1] == 0.0f);
  CHECK(x.grad()[3] == 0.0f);
}

TEST_CASE("softmax: uniform logits and cross-entropy ln K") {
  auto z = Tensor<float>::zeros({2, 10});
  auto p = softmax(z);
  for (long long i = 0; i < p.numel(); ++i) CHECK(p.array()[i] == doctest::Approx(0.1).epsilon(1e-6));
  auto ce = cross_entropy(z, {3, 7});
  CHECK(ce.item() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
}

TEST_CASE("softmax is invariant to constant logit shifts") {
  auto z = mxtest::randf({5, 7}, 61);
  auto z_shift = z.clone();
  z_shift.array() += 3.7f;
  auto a = softmax(z), b = softmax(z_shift);
  for (long long i = 0; i < a.numel(); ++i)
    CHECK(a.array()[i] == doctest::Approx(b.array()[i]).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one with probabilities in [0, 1]") {
  for (unsigned seed = 0; seed < 20; ++seed) {
    auto z = mxtest::randf({3, 6}, 600 + seed, 4.0);
    auto p = softmax(z, 0.5f + 0.25f * (seed % 4));
    for (int n = 0; n < 3; ++n) {
      double row = 0;
      for (int k = 0; k < 6; ++k) {
        const float v = p.array()[n * 6 + k];
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        row += v;
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("kl_divergence of identical logits is exactly zero") {
  auto z = mxtest::randf({4, 9}, 71, 2.0);
  CHECK(kl_divergence(z, z, 1.0f).item() == 0.0f);
  CHECK(kl_divergence(z, z, 3.0f).item() == 0.0f);
}

TEST_CASE("temperature and label validation") {
  auto z = Tensor<float>::zeros({2, 4});
  CHECK_THROWS_AS(softmax(z, 0.0f), std::invalid_argument);
  CHECK_THROWS_AS(softmax(z, -1.0f), std::invalid_argument);
  CHECK_THROWS_AS(kl_divergence(z, z, 0.0f), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(z, {0, 4}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(z, {-1, 0}), std::invalid_argument);
}

TEST_CASE("backward: grad of sum(w*x) with constant x is x") {
  auto w = mxtest::randf({3, 4}, 81);
  auto x = mxtest::randf({3, 4}, 82);
  w.set_requires_grad(true);
  Tape<float> tape;
  auto loss = mx::sum(multiply(w, x));
  tape.backward(loss);
  REQUIRE(w.has_grad());
  for (long long i = 0; i < w.numel(); ++i) CHECK(w.grad()[i] == doctest::Approx(x.array()[i]));
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward twice without zeroing doubles the gradient") {
  auto w = mxtest::randf({5}, 83);
  w.set_requires_grad(true);
  Tape<float> tape;
  auto loss = mx::sum(multiply(w, w));
  tape.backward(loss);
  const ArrayX<float> once = w.grad();
  tape.backward(loss);
  for (long long i = 0; i < w.numel(); ++i) CHECK(w.grad()[i] == doctest::Approx(2.0f * once[i]));
}

TEST_CASE("backward rejects non-scalar losses") {
  auto w = mxtest::randf({3}, 84);
  w.set_requires_grad(true);
  Tape<float> tape;
  auto y = relu(w);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("gradients of unreachable tensors come out zero") {
  auto w = mxtest::randf({3}, 85);
  auto v = mxtest::randf({3}, 86);
  w.set_requires_grad(true);
  v.set_requires_grad(true);
  Tape<float> tape;
  auto loss = mx::sum(multiply(w, w));
  auto unused = relu(v);
  (void)unused;
  tape.backward(loss);
  REQUIRE(v.has_grad());
  for (long long i = 0; i < v.numel(); ++i) CHECK(v.grad()[i] == 0.0f);
}

TEST_CASE("sgd_step basic contracts") {
  SUBCASE("lr 1, no momentum, no decay: w decreases by exactly g") {
    ParamSet<float> ps;
    auto w = Tensor<float>::from({3}, {1.0f, 2.0f, 3.0f});
    ps.add("w", w);
    ps.get("w").ensure_grad() = ArrayX<float>::Constant(3, 0.5f);
    sgd_step(ps, 1.0f, 0.0f, 0.0f);
    for (int i = 0; i < 3; ++i) CHECK(w.array()[i] == doctest::Approx(float(i + 1) - 0.5f));
  }
  SUBCASE("frozen parameters are untouched even with gradients") {
    ParamSet<float> ps;
    auto w = Tensor<float>::from({2}, {1.0f, 1.0f});
    ps.add("w", w);
    ps.set_frozen("w", true);
    ps.get("w").ensure_grad() = ArrayX<float>::Constant(2, 9.0f);
    sgd_step(ps, 1.0f, 0.9f, 0.0f);
    CHECK(w.array()[0] == 1.0f);
    CHECK(w.array()[1] == 1.0f);
  }
  SUBCASE("two steps with momentum 0.9 on a constant gradient move by g + 1.9g") {
    ParamSet<float> ps;
    auto w = Tensor<float>::from({1}, {0.0f});
    ps.add("w", w);
    const float g = 0.25f;
    ps.get("w").ensure_grad() = ArrayX<float>::Constant(1, g);
    sgd_step(ps, 1.0f, 0.9f, 0.0f);
    ps.get("w").zero_grad();
    ps.get("w").ensure_grad() = ArrayX<float>::Constant(1, g);
    sgd_step(ps, 1.0f, 0.9f, 0.0f);
    CHECK(w.array()[0] == doctest::Approx(-(g + 1.9f * g)).epsilon(1e-6));
  }
  SUBCASE("missing grad on a trainable param is an error") {
    ParamSet<float> ps;
    ps.add("w", Tensor<float>::zeros({2}));
    CHECK_THROWS_AS(sgd_step(ps, 0.1f, 0.9f, 0.0f), std::invalid_argument);
  }
}

TEST_CASE("grad_check: quadratic, conv chain, softmax+cross-entropy") {
  SUBCASE("sum of squares is tight") {
    auto w = mxtest::randf({6}, 91);
    const double err = grad_check([](const auto& v) { return mx::sum(mx::multiply(v[0], v[0])); },
                                  std::vector<Tensor<float>>{w}, 1e-3);
    CHECK(err < 1e-6);
  }
  SUBCASE("conv2d + relu + gap + linear chain in 32-bit") {
    auto x = mxtest::randf({2, 3, 6, 6}, 92, 0.8);
    auto w = mxtest::randf({4, 3, 3, 3}, 93, 0.4);
    auto b = mxtest::randf({4}, 94, 0.2);
    auto fw = mxtest::randf({5, 4}, 95, 0.5);
    auto fb = mxtest::randf({5}, 96, 0.2);
    auto closure = [](const auto& v) {
      auto h = mx::global_avg_pool(mx::relu(mx::conv2d(v[0], v[1], v[2], 1, 1)));
      return mx::cross_entropy(mx::linear(h, v[3], v[4]), {1, 3});
    };
    const double err = grad_check(closure, std::vector<Tensor<float>>{x, w, b, fw, fb}, 1e-3);
    CHECK(err < 1e-3);
  }
  SUBCASE("softmax + cross-entropy") {
    auto z = mxtest::randf({3, 5}, 97);
    const double err = grad_check([](const auto& v) { return mx::cross_entropy(v[0], {0, 2, 4}); },
                                  std::vector<Tensor<float>>{z}, 1e-3);
    CHECK(err < 1e-4);
  }
  SUBCASE("kl divergence, both sides") {
    auto p = mxtest::randf({3, 5}, 98);
    auto q = mxtest::randf({3, 5}, 99);
    const double err = grad_check([](const auto& v) { return mx::kl_divergence(v[0], v[1], 2.0); },
                                  std::vector<Tensor<float>>{p, q}, 1e-3);
    CHECK(err < 1e-4);
  }
  SUBCASE("maxpool and sigmoid and channelwise gating") {
    auto x = mxtest::randf({2, 2, 4, 4}, 100, 0.9);
    auto g = mxtest::randf({2, 2}, 102, 0.5);
    auto closure = [](const auto& v) {
      auto pooled = mx::maxpool2d(v[0], 2, 2);
      auto gated = mx::channelwise_multiply(pooled, mx::sigmoid(v[1]));
      return mx::sum(gated);
    };
    const double err = grad_check(closure, std::vector<Tensor<float>>{x, g}, 1e-3);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("gradient linearity: grad(a*L1 + b*L2) = a*grad(L1) + b*grad(L2)") {
  std::mt19937 seeds(7);
  for (int trial = 0; trial < 8; ++trial) {
    const unsigned s = seeds();
    auto w = mxtest::randf({4, 3}, s);
    const float a = 0.3f + 0.1f * trial, b = 1.7f - 0.2f * trial;
    auto mk_l1 = [](const Tensor<float>& t) { return mx::sum(mx::multiply(t, t)); };
    auto mk_l2 = [](const Tensor<float>& t) { return mx::cross_entropy(mx::relu(t), {0, 2, 1, 0}); };
    auto g_combined = [&] {
      auto p = w.clone();
      p.set_requires_grad(true);
      Tape<float> tape;
      auto loss = add(scalar_multiply(mk_l1(p), a), scalar_multiply(mk_l2(p), b));
      tape.backward(loss);
      return p.grad();
    }();
    auto grad_of = [&](auto&& fn) {
      auto p = w.clone();
      p.set_requires_grad(true);
      Tape<float> tape;
      tape.backward(fn(p));
      return p.grad();
    };
    auto g1 = grad_of(mk_l1);
    auto g2 = grad_of(mk_l2);
    for (long long i = 0; i < w.numel(); ++i) {
      const double want = double(a) * g1[i] + double(b) * g2[i];
      const double got = g_combined[i];
      CHECK(std::abs(got - want) / std::max({std::abs(got), std::abs(want), 1e-6}) < 1e-5);
    }
  }
}

TEST_CASE("forward determinism: identical inputs give bit-identical outputs") {
  auto x = mxtest::randf({2, 3, 8, 8}, 111);
  auto w = mxtest::randf({4, 3, 3, 3}, 112);
  auto a = conv2d(x, w, 1, 1);
  auto b = conv2d(x, w, 1, 1);
  for (long long i = 0; i < a.numel(); ++i) CHECK(a.array()[i] == b.array()[i]);
}

TEST_CASE("ops reject non-finite propagation loudly") {
  auto x = Tensor<float>::full({1, 4}, 1e30f);
  auto w = Tensor<float>::full({4, 4}, 1e30f);
  CHECK_THROWS_AS(linear(x, w, Tensor<float>()), std::runtime_error);
}
