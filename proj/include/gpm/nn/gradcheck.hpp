#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gpm/nn/tensor.hpp"

namespace gpm::nn {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_input;
  std::size_t evaluations = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, input by input. The error for one input is
/// |analytic - numeric| / max(|analytic|, |numeric|) over the whole gradient
/// vector, falling back to the absolute difference when both norms are below
/// `abs_floor`.
template <class T>
GradCheckResult gradcheck(const std::function<Tensor<T>()>& fn, std::vector<std::pair<std::string, Tensor<T>>> inputs,
                          double eps, double abs_floor = 1e-7) {
  for (auto& [name, t] : inputs) t.zero_grad();
  Tensor<T> loss = fn();
  loss.backward();
  GradCheckResult res;
  for (auto& [name, t] : inputs) {
    std::vector<T> analytic(t.grad().begin(), t.grad().end());
    if (analytic.size() != t.size()) analytic.assign(t.size(), T(0));
    std::vector<double> numeric(t.size());
    auto values = t.mutable_value();
    {
      NoGradGuard guard;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T orig = values[i];
        values[i] = orig + static_cast<T>(eps);
        const double up = static_cast<double>(fn().item());
        values[i] = orig - static_cast<T>(eps);
        const double down = static_cast<double>(fn().item());
        values[i] = orig;
        numeric[i] = (up - down) / (2.0 * eps);
        res.evaluations += 2;
      }
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = static_cast<double>(analytic[i]);
      diff += (a - numeric[i]) * (a - numeric[i]);
      na += a * a;
      nn += numeric[i] * numeric[i];
    }
    diff = std::sqrt(diff);
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    const double err = scale > abs_floor ? diff / scale : diff;
    if (err >= res.max_relative_error) {
      res.max_relative_error = err;
      res.worst_input = name;
    }
  }
  return res;
}

}  // namespace gpm::nn
