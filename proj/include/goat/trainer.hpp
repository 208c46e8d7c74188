// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Subtrajectory-balance training.
 *
 * For a trajectory with transitions 1..n, let A_i be the cumulative policy
 * log-prob of the first i transitions and B_i the cumulative reference
 * log-prob scaled by 1/T (the prefix log-reward). Every state pair
 * 0 <= i < j <= n contributes the squared residual
 *
 *     D_ij = (B_i - B_j) + (A_j - A_i)
 *
 * weighted by lambda^(j-i). Diagonal pairs are identically zero and skipped.
 * The TB ablation keeps only the (0, n) pair, unweighted.
 *
 * Gradients flow through the policy log-probs only; rewards depend on the
 * frozen reference, so their parameter derivative is zero by construction.
 */

#include <deque>
#include <memory>
#include <optional>
#include <vector>

#include "goat/core.hpp"
#include "goat/policy.hpp"
#include "goat/reward.hpp"
#include "goat/sampling.hpp"

namespace goat {

struct SubTBConfig {
  double lambda = 1.0;                ///< subtrajectory weight lambda^(j-i)
  bool include_terminal_only = false; ///< true = TB ablation

  void validate() const;
};

/// Linear warmup to lr_max, cosine annealing to lr_end over the LRO horizon,
/// constant lr_end afterward. When `fixed` is set, lr_at returns lr_max
/// everywhere (the no-LRO ablation).
struct LRSchedule {
  int warmup_steps = 20;
  int total_lro_steps = 1500;
  double lr_max = 1e-5;
  double lr_end = 1e-7;
  bool fixed = false;

  void validate() const;
};

double lr_at(const LRSchedule& s, int step);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainPlan {
  int batch_size = 16;
  int total_steps = 3500;
  std::uint64_t seed = 0;
  double exploration = 0.0;  ///< epsilon-uniform mixing rate for rollouts
  AdamConfig adam;
  double grad_clip = 0.0;    ///< 0 disables clipping

  void validate(const LRSchedule& lr) const;
};

/// Flags reward hacking: windowed mean sequence length dropping below
/// ratio_threshold times the baseline established over the first `window`
/// observations.
class CollapseDetector {
 public:
  CollapseDetector(int window, double ratio_threshold);
  CollapseDetector() : CollapseDetector(50, 0.5) {}

  /// Feeds one mean-length observation; returns the current collapse flag.
  bool observe(double mean_length);

  bool baseline_established() const { return baseline_.has_value(); }
  double baseline_mean_len() const { return baseline_.value_or(0.0); }
  int window() const { return window_; }
  double ratio_threshold() const { return ratio_threshold_; }

  struct State {
    std::optional<double> baseline;
    std::vector<double> pending;  ///< observations before the baseline froze
    std::vector<double> recent;   ///< rolling window after it
  };
  State state() const;
  void restore(const State& s);

 private:
  int window_;
  double ratio_threshold_;
  std::optional<double> baseline_;
  std::vector<double> pending_;
  std::deque<double> recent_;
};

/// SubTB loss of one complete trajectory (policy log-probs recomputed under
/// `policy`, rewards under the frozen reference at temperature T).
double subtb_loss(const Trajectory& traj, const ParametricPolicy& policy,
                  const RewardModel& rm, double T, const SubTBConfig& cfg);

/// The (i=0, j=n) term of the SubTB loss, lambda ignored.
double tb_loss(const Trajectory& traj, const ParametricPolicy& policy, const RewardModel& rm,
               double T);

/// Analytic gradient of the batch-mean loss. Residual (i,j) contributes
/// weight 2 * lambda^(j-i) * D_ij to every transition in [i, j).
GradientTable loss_gradient(std::span<const Trajectory> batch, const ParametricPolicy& policy,
                            const RewardModel& rm, double T, const SubTBConfig& cfg);

struct StepMetrics {
  int step = 0;
  double loss = 0.0;
  double reward_temperature = 1.0;
  double learning_rate = 0.0;
  double mean_seq_len = 0.0;
  bool collapse = false;
  int tokens_generated = 0;
};

/// Owns everything a training run mutates: plan, schedules, optimizer
/// moments, rollout RNG, corpus cursor and the collapse detector. The policy
/// is passed in so oracle checks can inspect it between steps.
class Trainer {
 public:
  Trainer(TrainPlan plan, LRSchedule lr, SubTBConfig subtb, CollapseDetector detector);

  /// One optimizer step: round-robin prompt batch, on-policy rollouts
  /// (epsilon-uniform exploration optional), loss, analytic gradient, Adam
  /// update, collapse bookkeeping.
  StepMetrics train_step(ParametricPolicy& policy, const RewardModel& rm,
                         std::span<const Prompt> corpus);

  int step() const { return step_; }
  const TrainPlan& plan() const { return plan_; }
  const LRSchedule& lr_schedule() const { return lr_; }
  const SubTBConfig& subtb_config() const { return subtb_; }
  const CollapseDetector& detector() const { return detector_; }

  // Persistence hooks (checkpointing).
  struct AdamRow {
    std::vector<double> m;
    std::vector<double> v;
  };
  const std::unordered_map<PolicyContext, AdamRow, PolicyContextHash>& adam_rows() const {
    return adam_rows_;
  }
  std::uint64_t rng_state() const { return rng_.state(); }
  std::uint64_t corpus_cursor() const { return cursor_; }
  void restore(int step, std::uint64_t rng_state, std::uint64_t cursor,
               std::unordered_map<PolicyContext, AdamRow, PolicyContextHash> adam_rows,
               const CollapseDetector::State& detector_state);

  /// Rolls out one trajectory from the current policy (RMS with optional
  /// epsilon-uniform mixing), recording policy step log-probs.
  Trajectory rollout(const ParametricPolicy& policy, const Prompt& prompt);

 private:
  void apply_adam(ParametricPolicy& policy, const GradientTable& grads, double lr);

  TrainPlan plan_;
  LRSchedule lr_;
  SubTBConfig subtb_;
  CollapseDetector detector_;
  std::unordered_map<PolicyContext, AdamRow, PolicyContextHash> adam_rows_;
  Rng rng_;
  std::uint64_t cursor_ = 0;
  int step_ = 0;
};

}  // namespace goat
