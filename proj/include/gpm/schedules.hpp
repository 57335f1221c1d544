#pragma once

// Step-indexed schedules. All are pure functions of (step, schedule).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "gpm/common/error.hpp"
#include "gpm/nn/optim.hpp"

namespace gpm {

/// 0 for step < flat_steps, then linear up to final_weight over ramp_steps.
struct KLSchedule {
  std::uint64_t flat_steps = 200;
  std::uint64_t ramp_steps = 2000;
  double final_weight = 0.1;
};

inline double kl_weight_at(std::uint64_t step, const KLSchedule& s) {
  if (step < s.flat_steps) return 0.0;
  const std::uint64_t into = step - s.flat_steps;
  if (s.ramp_steps == 0 || into >= s.ramp_steps) return s.final_weight;
  return s.final_weight * static_cast<double>(into) / static_cast<double>(s.ramp_steps);
}

enum class DecayShape { linear, cosine };

struct TemperatureSchedule {
  double start = 1.0;
  double end = 0.0625;
  std::uint64_t decay_steps = 2000;
  DecayShape shape = DecayShape::linear;
};

inline double temperature_at(std::uint64_t step, const TemperatureSchedule& s) {
  if (s.decay_steps == 0 || step >= s.decay_steps) return s.end;
  const double t = static_cast<double>(step) / static_cast<double>(s.decay_steps);
  if (s.shape == DecayShape::cosine) return s.end + (s.start - s.end) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  return s.start + (s.end - s.start) * t;
}

/// Cosine annealing from base to min over `span` steps (0 means the whole
/// run), flat at min afterwards.
struct LRSchedule {
  double base = 5e-4;
  double min = 1e-6;
  std::uint64_t span = 0;
};

inline double lr_at(std::uint64_t step, std::uint64_t total_steps, const LRSchedule& s) {
  const std::uint64_t span = s.span == 0 ? total_steps : s.span;
  if (span == 0) return s.base;
  return nn::cosine_schedule(std::min(step, span), span, s.base, s.min);
}

}  // namespace gpm
