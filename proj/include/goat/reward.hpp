// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Internal sharpened reward over prefixes and terminals, plus the linear
 * reward-temperature decay schedule.
 *
 * The reward of a (partial) sequence is the frozen reference model's
 * cumulative log-likelihood scaled by 1/T. The reference is always the
 * initial model, never the policy being trained.
 */

#include <memory>

#include "goat/core.hpp"
#include "goat/policy.hpp"

namespace goat {

/// Linear decay from t_start at step 0 to t_min at decay_steps, constant
/// t_min afterward.
struct TemperatureSchedule {
  double t_start = 1.0;
  double t_min = 0.825;
  int decay_steps = 1500;

  void validate() const;
};

double temperature_at(const TemperatureSchedule& s, int step);

/// Frozen reference plus its temperature schedule.
class RewardModel {
 public:
  RewardModel(std::shared_ptr<const ReferenceModel> reference, TemperatureSchedule schedule);

  const ReferenceModel& reference() const { return *reference_; }
  std::shared_ptr<const ReferenceModel> reference_ptr() const { return reference_; }
  const TemperatureSchedule& schedule() const { return schedule_; }

  /// ln R(sequence | prompt) at temperature T: (1/T) * sum of reference
  /// step log-probs over the sequence's tokens. The empty prefix has
  /// log-reward 0 (empty product). Forced terminal steps contribute 0.
  /// Throws ValidationError unless 0 < T <= 1.
  double log_reward(const Prompt& prompt, const TokenSequence& seq, double T) const;

 private:
  std::shared_ptr<const ReferenceModel> reference_;
  TemperatureSchedule schedule_;
};

}  // namespace goat
