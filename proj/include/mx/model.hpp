#pragma once

#include <map>

#include "mx/flops.hpp"
#include "mx/modules.hpp"

namespace mx {

// A staged backbone with branch classifiers attached after stages 1..M-1 and
// the backbone's own classifier as exit M. Parameters are registered under
// stage-scoped prefixes ("backbone.stageK.", "branchI.", "final.") so the
// parameter set of exit i is the prefix union of stages 1..i plus branch i.
template <typename S>
class MultiExitModel {
 public:
  explicit MultiExitModel(ModelSpec spec, unsigned seed = 0) : spec_(std::move(spec)) {
    std::mt19937 rng(seed);
    for (int i = 0; i < spec_.backbone.num_stages(); ++i)
      stages_.push_back(std::make_unique<Sequential<S>>(spec_.backbone.stages[static_cast<std::size_t>(i)], rng));
    final_ = std::make_unique<Sequential<S>>(spec_.backbone.final_classifier, rng);
    for (const auto& b : spec_.branches) {
      branches_.push_back(std::make_unique<Sequential<S>>(build_branch(b), rng));
    }
    visit_params([this](const std::string& name, Tensor<S>& t) { params_.add(name, t); });
  }

  const ModelSpec& spec() const { return spec_; }
  int num_exits() const { return spec_.num_exits(); }
  int num_stages() const { return spec_.backbone.num_stages(); }
  int num_classes() const { return spec_.backbone.num_classes; }

  Sequential<S>& stage(int i) {  // 1-based
    require(i >= 1 && i <= num_stages(), "stage index out of range");
    return *stages_[static_cast<std::size_t>(i - 1)];
  }
  Sequential<S>& branch(int i) {  // 1-based exit index, i in [1, M-1]
    require(i >= 1 && i <= static_cast<int>(branches_.size()), "branch index out of range");
    return *branches_[static_cast<std::size_t>(i - 1)];
  }
  Sequential<S>& final_classifier() { return *final_; }

  // All exits: shared stages computed once, y_i = branch_i(stage-i features),
  // y_M from the full backbone.
  std::vector<Tensor<S>> forward_all(const Tensor<S>& x) {
    std::vector<Tensor<S>> ys;
    Tensor<S> h = x;
    const int M = num_exits();
    for (int i = 1; i <= num_stages(); ++i) {
      h = stage(i).forward(h);
      if (i < M) ys.push_back(branch(i).forward(h));
    }
    ys.push_back(final_->forward(h));
    return ys;
  }

  // Logits of a single exit, touching no stage beyond it.
  Tensor<S> forward_to_exit(const Tensor<S>& x, int m) {
    const int M = num_exits();
    require(m >= 1 && m <= M, "forward_to_exit: exit " + std::to_string(m) + " out of range [1, " +
                                  std::to_string(M) + "]");
    Tensor<S> h = x;
    if (m < M) {
      for (int i = 1; i <= m; ++i) h = stage(i).forward(h);
      return branch(m).forward(h);
    }
    for (int i = 1; i <= num_stages(); ++i) h = stage(i).forward(h);
    return final_->forward(h);
  }

  // Backbone features after stages [from, to] (1-based, inclusive).
  Tensor<S> forward_stages(const Tensor<S>& x, int from, int to) {
    require(from >= 1 && to <= num_stages() && from <= to + 1, "forward_stages: bad range");
    Tensor<S> h = x;
    for (int i = from; i <= to; ++i) h = stage(i).forward(h);
    return h;
  }

  Tensor<S> forward_final(const Tensor<S>& h) { return final_->forward(h); }

  ParamSet<S>& params() { return params_; }

  void visit_params(const StateVisitor<S>& fn) {
    for (int i = 1; i <= num_stages(); ++i)
      stage(i).visit_params("backbone.stage" + std::to_string(i) + ".", fn);
    final_->visit_params("final.", fn);
    for (std::size_t i = 0; i < branches_.size(); ++i)
      branches_[i]->visit_params("branch" + std::to_string(i + 1) + ".", fn);
  }

  void visit_state(const StateVisitor<S>& fn) {
    for (int i = 1; i <= num_stages(); ++i)
      stage(i).visit_state("backbone.stage" + std::to_string(i) + ".", fn);
    final_->visit_state("final.", fn);
    for (std::size_t i = 0; i < branches_.size(); ++i)
      branches_[i]->visit_state("branch" + std::to_string(i + 1) + ".", fn);
  }

  // Name -> tensor map of the full persistent state (params and buffers).
  std::map<std::string, Tensor<S>> state() {
    std::map<std::string, Tensor<S>> m;
    visit_state([&m](const std::string& name, Tensor<S>& t) {
      require(m.emplace(name, t).second, "duplicate state name '" + name + "'");
    });
    return m;
  }

  void set_training(bool t) {
    for (auto& s : stages_) s->set_training(t);
    final_->set_training(t);
    for (auto& b : branches_) b->set_training(t);
  }

  void set_stage_training(int i, bool t) { stage(i).set_training(t); }

  // Digest over the full state in name order; identifies the parameter
  // snapshot a logit trace was exported from.
  std::uint64_t fingerprint() {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, t] : state()) {
      h = fnv1a64(name, h);
      h = fnv1a64(t.data(), sizeof(S) * static_cast<std::size_t>(t.numel()), h);
    }
    return h;
  }

  // Copies all state from another model of possibly different scalar type.
  template <typename S2>
  void load_state_from(MultiExitModel<S2>& other) {
    auto src = other.state();
    auto dst = state();
    require(src.size() == dst.size(), "load_state_from: state size mismatch");
    for (auto& [name, t] : dst) {
      auto it = src.find(name);
      require(it != src.end(), "load_state_from: missing '" + name + "'");
      require(it->second.shape() == t.shape(), "load_state_from: shape mismatch for '" + name + "'");
      for (long long i = 0; i < t.numel(); ++i)
        t.array()[i] = static_cast<S>(it->second.array()[i]);
    }
  }

 private:
  ModelSpec spec_;
  std::vector<std::unique_ptr<Sequential<S>>> stages_;
  std::vector<std::unique_ptr<Sequential<S>>> branches_;
  std::unique_ptr<Sequential<S>> final_;
  ParamSet<S> params_;
};

}  // namespace mx
