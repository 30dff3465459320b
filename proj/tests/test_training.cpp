#include <doctest.h>

#include "mx/train.hpp"
#include "test_helpers.hpp"

using namespace mx;

namespace {

std::vector<Tensor<float>> fake_exits(int m, int n, int k, unsigned seed, double scale = 1.5) {
  std::vector<Tensor<float>> ys;
  for (int i = 0; i < m; ++i) ys.push_back(mxtest::randf({n, k}, seed + static_cast<unsigned>(i), scale));
  return ys;
}

std::map<std::string, std::vector<float>> snapshot_prefix(MultiExitModel<float>& model,
                                                          const std::string& prefix) {
  std::map<std::string, std::vector<float>> out;
  model.visit_params([&](const std::string& name, Tensor<float>& t) {
    if (name.rfind(prefix, 0) != 0) return;
    out[name] = std::vector<float>(t.data(), t.data() + t.numel());
  });
  return out;
}

bool identical(const std::map<std::string, std::vector<float>>& a,
               const std::map<std::string, std::vector<float>>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, va] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second.size() != va.size()) return false;
    for (std::size_t i = 0; i < va.size(); ++i)
      if (va[i] != it->second[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("joint loss values") {
  SUBCASE("confident one-hot logits give near-zero loss") {
    const int n = 4, k = 10;
    std::vector<int> labels{1, 3, 5, 7};
    std::vector<Tensor<float>> ys;
    for (int m = 0; m < 3; ++m) {
      auto z = Tensor<float>::zeros({n, k});
      for (int i = 0; i < n; ++i) z.array()[i * k + labels[std::size_t(i)]] = 20.0f;
      ys.push_back(z);
    }
    CHECK(joint_loss_from_exits(ys, labels).item() < 1e-3f);
  }
  SUBCASE("uniform logits give M ln K") {
    std::vector<Tensor<float>> ys(3, Tensor<float>::zeros({5, 10}));
    const float loss = joint_loss_from_exits(ys, {0, 1, 2, 3, 4}).item();
    CHECK(loss == doctest::Approx(3.0 * std::log(10.0)).epsilon(1e-4));
  }
  SUBCASE("equals the sum of per-exit cross entropies") {
    auto ys = fake_exits(4, 6, 5, 1000);
    std::vector<int> labels{0, 1, 2, 3, 4, 0};
    double want = 0.0;
    for (const auto& y : ys) want += double(cross_entropy(y, labels).item());
    CHECK(double(joint_loss_from_exits(ys, labels).item()) == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("weighted-ensemble teacher") {
  SUBCASE("M=4 weights are 0.1, 0.2, 0.3, 0.4") {
    auto w = wed_weights(4);
    REQUIRE(w.size() == 4);
    CHECK(w[0] == doctest::Approx(0.1));
    CHECK(w[1] == doctest::Approx(0.2));
    CHECK(w[2] == doctest::Approx(0.3));
    CHECK(w[3] == doctest::Approx(0.4));
  }
  SUBCASE("M=1 collapses wed, med and ofa to the single exit") {
    auto ys = fake_exits(1, 3, 6, 2000);
    std::vector<int> labels{0, 1, 2};
    for (auto kind : {TeacherKind::wed, TeacherKind::med, TeacherKind::ofa}) {
      auto t = teacher_from_exits(kind, ys, labels, nullptr, Tensor<float>());
      for (long long i = 0; i < ys[0].numel(); ++i)
        CHECK(t.logits.array()[i] == doctest::Approx(ys[0].array()[i]));
    }
  }
  SUBCASE("wed equals the hand-computed weighted sum") {
    auto ys = fake_exits(4, 5, 7, 3000);
    std::vector<int> labels{0, 1, 2, 3, 4};
    auto t = teacher_from_exits(TeacherKind::wed, ys, labels, nullptr, Tensor<float>());
    auto w = wed_weights(4);
    for (long long i = 0; i < ys[0].numel(); ++i) {
      double want = 0.0;
      for (int j = 0; j < 4; ++j) want += w[std::size_t(j)] * double(ys[std::size_t(j)].array()[i]);
      CHECK(double(t.logits.array()[i]) == doctest::Approx(want).epsilon(1e-6));
    }
    CHECK_FALSE(t.logits.requires_grad());
  }
  SUBCASE("med is the unweighted mean, ofa the final exit") {
    auto ys = fake_exits(3, 4, 5, 4000);
    std::vector<int> labels{0, 1, 2, 3};
    auto med = teacher_from_exits(TeacherKind::med, ys, labels, nullptr, Tensor<float>());
    auto ofa = teacher_from_exits(TeacherKind::ofa, ys, labels, nullptr, Tensor<float>());
    for (long long i = 0; i < ys[0].numel(); ++i) {
      const double mean =
          (double(ys[0].array()[i]) + double(ys[1].array()[i]) + double(ys[2].array()[i])) / 3.0;
      CHECK(double(med.logits.array()[i]) == doctest::Approx(mean).epsilon(1e-6));
      CHECK(ofa.logits.array()[i] == ys[2].array()[i]);
    }
  }
  SUBCASE("dk without a baseline is an error") {
    auto ys = fake_exits(2, 3, 4, 5000);
    std::vector<int> labels{0, 1, 2};
    CHECK_THROWS_AS(teacher_from_exits(TeacherKind::dk, ys, labels, nullptr, Tensor<float>()),
                    std::invalid_argument);
  }
}

TEST_CASE("distillation loss identities") {
  auto ys = fake_exits(3, 6, 8, 6000);
  std::vector<int> labels{0, 1, 2, 3, 4, 5};
  SUBCASE("lambda = 1 equals the joint loss bit-exactly") {
    auto teacher = teacher_from_exits(TeacherKind::wed, ys, labels, nullptr, Tensor<float>());
    const float joint = joint_loss_from_exits(ys, labels).item();
    const float dist = distill_loss_from_exits(ys, labels, teacher.logits, 1.0, 2.0).item();
    CHECK(dist == joint);
  }
  SUBCASE("teacher identical to every student leaves only lambda * joint") {
    const double lambda = 0.9;
    std::vector<Tensor<float>> same(3, ys[0]);
    const float joint = joint_loss_from_exits(same, labels).item();
    const float dist = distill_loss_from_exits(same, labels, ys[0].detach(), lambda, 1.0).item();
    CHECK(dist == doctest::Approx(lambda * joint).epsilon(1e-6));
  }
  SUBCASE("tau = 2 matches an independently scripted evaluation") {
    const double lambda = 0.9, tau = 2.0;
    auto teacher = teacher_from_exits(TeacherKind::med, ys, labels, nullptr, Tensor<float>());
    const double got = distill_loss_from_exits(ys, labels, teacher.logits, lambda, tau).item();

    // scripted formula: lambda * sum_i CE_i + tau^2 (1-lambda) sum_i KL_i
    const int n = 6, k = 8;
    auto softmax_row = [&](const Tensor<float>& z, int row, double temp, std::vector<double>& p) {
      double zmax = -1e300;
      for (int c = 0; c < k; ++c) zmax = std::max(zmax, double(z.array()[row * k + c]) / temp);
      double denom = 0;
      p.resize(std::size_t(k));
      for (int c = 0; c < k; ++c) {
        p[std::size_t(c)] = std::exp(double(z.array()[row * k + c]) / temp - zmax);
        denom += p[std::size_t(c)];
      }
      for (auto& v : p) v /= denom;
    };
    double want = 0.0;
    for (const auto& y : ys) {
      double ce = 0.0;
      for (int r = 0; r < n; ++r) {
        std::vector<double> p;
        softmax_row(y, r, 1.0, p);
        ce -= std::log(p[std::size_t(labels[std::size_t(r)])]);
      }
      want += lambda * ce / n;
      double kl = 0.0;
      for (int r = 0; r < n; ++r) {
        std::vector<double> pt, psd;
        softmax_row(teacher.logits, r, tau, pt);
        softmax_row(y, r, tau, psd);
        for (int c = 0; c < k; ++c) kl += pt[std::size_t(c)] * (std::log(pt[std::size_t(c)]) - std::log(psd[std::size_t(c)]));
      }
      want += tau * tau * (1.0 - lambda) * kl / n;
    }
    CHECK(got == doctest::Approx(want).epsilon(1e-5));
  }
}

TEST_CASE("KL term feeds no gradient into the teacher-forming logits") {
  const unsigned seed = 99;
  Dataset ds = generate_synthetic(5, 8, 32, 1, 0.2);
  std::vector<int> idx{0, 1, 2, 3};
  auto x = make_batch<float>(ds, idx);
  auto labels = batch_labels(ds, idx);
  const auto spec = attach_branches(toynet_spec(5), parse_pattern("1+n"));

  auto grads_with = [&](bool detach_teacher) {
    MultiExitModel<float> model(spec, seed);
    model.set_training(false);  // eval BN so the three runs share statistics
    Tape<float> tape;
    auto ys = model.forward_all(x);
    Tensor<float> teacher;
    if (detach_teacher) {
      teacher = teacher_from_exits(TeacherKind::wed, ys, labels, nullptr, x).logits;
    } else {
      teacher = weighted_ensemble(ys, wed_weights(int(ys.size())));  // stays on the tape
    }
    Tensor<float> kl_sum;
    for (const auto& y : ys) {
      auto term = kl_divergence(teacher, y, 1.0f);
      kl_sum = kl_sum.defined() ? add(kl_sum, term) : term;
    }
    tape.backward(kl_sum);
    std::vector<float> grads;
    model.visit_params([&](const std::string& name, Tensor<float>& t) {
      if (name.rfind("backbone.", 0) != 0) return;
      t.ensure_grad();
      for (long long i = 0; i < t.numel(); ++i) grads.push_back(t.grad()[i]);
    });
    return grads;
  };

  // constant-teacher reference: same numeric teacher, injected as raw data
  auto grads_const = [&]() {
    MultiExitModel<float> model(spec, seed);
    model.set_training(false);
    Tensor<float> teacher_value;
    {
      NoGrad<float> guard;
      auto ys = model.forward_all(x);
      teacher_value = weighted_ensemble(ys, wed_weights(int(ys.size()))).detach();
    }
    Tape<float> tape;
    auto ys = model.forward_all(x);
    Tensor<float> kl_sum;
    for (const auto& y : ys) {
      auto term = kl_divergence(teacher_value, y, 1.0f);
      kl_sum = kl_sum.defined() ? add(kl_sum, term) : term;
    }
    tape.backward(kl_sum);
    std::vector<float> grads;
    model.visit_params([&](const std::string& name, Tensor<float>& t) {
      if (name.rfind("backbone.", 0) != 0) return;
      t.ensure_grad();
      for (long long i = 0; i < t.numel(); ++i) grads.push_back(t.grad()[i]);
    });
    return grads;
  }();

  auto detached = grads_with(true);
  auto live = grads_with(false);
  REQUIRE(detached.size() == grads_const.size());
  for (std::size_t i = 0; i < detached.size(); ++i) CHECK(detached[i] == grads_const[i]);
  bool differs = false;
  for (std::size_t i = 0; i < live.size(); ++i) differs |= live[i] != detached[i];
  CHECK(differs);  // a live teacher routes extra gradient through the backbone
}

TEST_CASE("learning-rate schedule is a linear decay to zero") {
  CHECK(lr_at(0.01, 0, 30) == doctest::Approx(0.01));
  CHECK(lr_at(0.01, 15, 30) == doctest::Approx(0.005));
  CHECK(lr_at(0.01, 30, 30) == 0.0);
  CHECK(lr_at(0.5, 3, 10) == doctest::Approx(0.5 * 0.7));
}

TEST_CASE("cooperative training on separable data: loss strictly decreases over 5 epochs") {
  Dataset train_ds = generate_synthetic(10, 30, 32, 7, 0.0);
  Dataset val_ds = generate_synthetic(10, 5, 32, 8, 0.0, Dataset::Split::val);
  MultiExitModel<float> model(attach_branches(toynet_spec(10), parse_pattern("2+1")), 1);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.lr_initial = 0.01;
  cfg.seed = 42;
  auto metrics = train(model, train_ds, val_ds, cfg);
  REQUIRE(metrics.size() == 5);
  for (std::size_t e = 1; e < metrics.size(); ++e) CHECK(metrics[e].loss < metrics[e - 1].loss);
}

TEST_CASE("fixed seed reproduces the first-epoch loss bit-exactly") {
  Dataset train_ds = generate_synthetic(6, 20, 32, 9, 0.3);
  Dataset val_ds = generate_synthetic(6, 4, 32, 10, 0.3, Dataset::Split::val);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 32;
  cfg.seed = 5;
  double losses[2];
  for (int run = 0; run < 2; ++run) {
    MultiExitModel<float> model(attach_branches(toynet_spec(6), parse_pattern("1+1")), 11);
    losses[run] = train(model, train_ds, val_ds, cfg)[0].loss;
  }
  CHECK(losses[0] == losses[1]);
}

TEST_CASE("branches-only training leaves the backbone bit-identical through phase 2") {
  Dataset train_ds = generate_synthetic(5, 16, 32, 12, 0.2);
  Dataset val_ds = generate_synthetic(5, 4, 32, 13, 0.2, Dataset::Split::val);
  const auto spec = attach_branches(toynet_spec(5), parse_pattern("1+n"));
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 17;
  cfg.strategy = Strategy::branches_only;

  MultiExitModel<float> full(spec, 23);
  auto metrics = train(full, train_ds, val_ds, cfg);
  REQUIRE(metrics.size() == 4);  // two phases, full epoch budget each
  CHECK(metrics[0].phase == "bo-backbone");
  CHECK(metrics[3].phase == "bo-branches");

  // Replica of phase 1 alone: same seeds, same epoch loop, branches frozen.
  MultiExitModel<float> replica(spec, 23);
  replica.params().freeze_all(true);
  replica.params().set_frozen_prefix("backbone.", false);
  replica.params().set_frozen_prefix("final.", false);
  std::mt19937 rng(cfg.seed);
  const int M = replica.num_exits();
  replica.set_training(true);
  for (int e = 0; e < cfg.epochs; ++e) {
    mx::detail::run_epoch(replica, train_ds, cfg, lr_at(cfg.lr_initial, e, cfg.epochs), rng,
                          [&](const Tensor<float>& x, const std::vector<int>& labels) {
                            Tensor<float> logits = replica.forward_to_exit(x, M);
                            return std::make_pair(cross_entropy(logits, labels),
                                                  std::vector<Tensor<float>>{logits});
                          },
                          1);
  }
  CHECK(identical(snapshot_prefix(full, "backbone."), snapshot_prefix(replica, "backbone.")));
  CHECK(identical(snapshot_prefix(full, "final."), snapshot_prefix(replica, "final.")));
  // and phase 2 really trained the branches
  MultiExitModel<float> untouched(spec, 23);
  CHECK_FALSE(identical(snapshot_prefix(full, "branch1."), snapshot_prefix(untouched, "branch1.")));
}

TEST_CASE("stage-wise training never revisits an earlier stage") {
  Dataset train_ds = generate_synthetic(5, 16, 32, 14, 0.2);
  Dataset val_ds = generate_synthetic(5, 4, 32, 15, 0.2, Dataset::Split::val);
  const auto spec = attach_branches(toynet_spec(5), parse_pattern("1+1"));
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.seed = 19;
  cfg.strategy = Strategy::stage_wise;

  MultiExitModel<float> full(spec, 29);
  auto metrics = train(full, train_ds, val_ds, cfg);
  REQUIRE(metrics.size() == 3);  // M = 3 stages, full budget each

  // Replica of the stage-1 phase alone (the rng state at its start is fresh).
  MultiExitModel<float> replica(spec, 29);
  replica.params().freeze_all(true);
  replica.params().set_frozen_prefix("backbone.stage1.", false);
  replica.params().set_frozen_prefix("branch1.", false);
  std::mt19937 rng(cfg.seed);
  replica.set_training(true);
  mx::detail::run_epoch(replica, train_ds, cfg, lr_at(cfg.lr_initial, 0, cfg.epochs), rng,
                        [&](const Tensor<float>& x, const std::vector<int>& labels) {
                          Tensor<float> logits = replica.forward_to_exit(x, 1);
                          return std::make_pair(cross_entropy(logits, labels),
                                                std::vector<Tensor<float>>{logits});
                        },
                        1);
  CHECK(identical(snapshot_prefix(full, "backbone.stage1."), snapshot_prefix(replica, "backbone.stage1.")));
  CHECK(identical(snapshot_prefix(full, "branch1."), snapshot_prefix(replica, "branch1.")));
}

TEST_CASE("metrics CSV rows carry the teacher column when distilling") {
  Dataset train_ds = generate_synthetic(5, 12, 32, 20, 0.2);
  Dataset val_ds = generate_synthetic(5, 4, 32, 21, 0.2, Dataset::Split::val);
  MultiExitModel<float> model(attach_branches(toynet_spec(5), parse_pattern("n+n")), 31);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 12;
  cfg.teacher = TeacherKind::wed;
  auto metrics = train(model, train_ds, val_ds, cfg);
  REQUIRE(metrics.size() == 1);
  CHECK(metrics[0].teacher_accuracy.has_value());
  auto rows = metrics_csv_rows(metrics);
  auto header = metrics_csv_header(model.num_exits());
  CHECK(header.back() == "teacher_acc");
  CHECK(rows[0].size() == header.size());
  CHECK_FALSE(rows[0].back().empty());
}
