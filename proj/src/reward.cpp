// SPDX-License-Identifier: Apache-2.0

#include "goat/reward.hpp"

#include <cmath>

namespace goat {

void TemperatureSchedule::validate() const {
  if (!(t_min > 0.0) || !(t_min <= t_start) || !(t_start <= 1.0)) {
    throw ValidationError("temperature schedule requires 0 < t_min <= t_start <= 1");
  }
  if (decay_steps < 1) throw ValidationError("decay_steps must be positive");
}

double temperature_at(const TemperatureSchedule& s, int step) {
  if (step < 0) throw ValidationError("step must be non-negative");
  if (step >= s.decay_steps) return s.t_min;
  double frac = static_cast<double>(step) / static_cast<double>(s.decay_steps);
  return s.t_start + (s.t_min - s.t_start) * frac;
}

RewardModel::RewardModel(std::shared_ptr<const ReferenceModel> reference,
                         TemperatureSchedule schedule)
    : reference_(std::move(reference)), schedule_(schedule) {
  if (!reference_) throw ValidationError("reward model requires a reference");
  schedule_.validate();
}

double RewardModel::log_reward(const Prompt& prompt, const TokenSequence& seq,
                               double T) const {
  if (!(T > 0.0) || T > 1.0) {
    throw ValidationError("reward temperature must lie in (0, 1]");
  }
  double sum = 0.0;
  TokenSequence prefix;
  for (Token t : seq.tokens) {
    sum += reference_->step_log_prob(prompt, prefix, t);
    if (!reference_->vocab().is_terminal(t)) prefix.append(t, reference_->vocab());
  }
  return sum / T;
}

}  // namespace goat
