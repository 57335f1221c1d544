#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/nn/parameters.hpp"

namespace gpm::nn {

struct AdamWHyper {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <class T>
struct OptimizerState {
  AdamWHyper hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

/// Decoupled-weight-decay Adam over an explicit parameter list. Parameters
/// flagged decay=false (biases, norms, special tokens) skip the decay term.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, AdamWHyper hyper) : params_(std::move(params)) {
    state_.hyper = hyper;
    for (auto* p : params_) {
      state_.first_moment.emplace_back(p->tensor.size(), T(0));
      state_.second_moment.emplace_back(p->tensor.size(), T(0));
    }
  }

  static AdamW over(ParameterSet<T>& set, AdamWHyper hyper) {
    std::vector<Parameter<T>*> ps;
    for (auto& p : set.all()) ps.push_back(&p);
    return AdamW(std::move(ps), hyper);
  }

  void set_lr(double lr) { state_.hyper.lr = lr; }
  double lr() const { return state_.hyper.lr; }
  const OptimizerState<T>& state() const { return state_; }
  OptimizerState<T>& state() { return state_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }

  void step() {
    for (auto* p : params_)
      if (p->tensor.grad().size() != p->tensor.size())
        throw ContractViolation("adamw_step: parameter '" + p->name + "' has no gradient");
    ++state_.step;
    const auto& h = state_.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state_.step));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto* p = params_[k];
      auto w = p->tensor.mutable_value();
      auto g = p->tensor.grad();
      auto& m = state_.first_moment[k];
      auto& v = state_.second_moment[k];
      const double decay = p->decay ? h.lr * h.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = static_cast<T>(h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi);
        v[i] = static_cast<T>(h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi);
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        double wi = static_cast<double>(w[i]);
        wi -= decay * wi;
        wi -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        w[i] = static_cast<T>(wi);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>*> params_;
  OptimizerState<T> state_;
};

/// Scales all gradients so their joint L2 norm is at most max_norm. Returns
/// the norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params)
    for (T g : p->tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      for (auto& g : p->tensor.grad_storage()) g *= s;
  }
  return norm;
}

/// Half-cosine decay from base_lr (step 0) to min_lr (step total); clamps past the end.
inline double cosine_schedule(std::uint64_t step, std::uint64_t total_steps, double base_lr, double min_lr) {
  if (total_steps == 0 || step >= total_steps) return min_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace gpm::nn
