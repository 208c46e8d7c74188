// SPDX-License-Identifier: Apache-2.0

#include "goat/trainer.hpp"

#include <algorithm>
#include <cmath>

namespace goat {

void SubTBConfig::validate() const {
  if (!(lambda > 0.0) || lambda > 1.0) throw ValidationError("lambda must lie in (0, 1]");
}

void LRSchedule::validate() const {
  if (warmup_steps < 0 || warmup_steps >= total_lro_steps) {
    throw ValidationError("require 0 <= warmup_steps < total_lro_steps");
  }
  if (!(lr_max > 0.0)) throw ValidationError("lr_max must be positive");
  if (!(lr_end >= 0.0)) throw ValidationError("lr_end must be non-negative");
}

double lr_at(const LRSchedule& s, int step) {
  if (step < 0) throw ValidationError("step must be non-negative");
  if (s.fixed) return s.lr_max;
  if (step < s.warmup_steps) {
    return s.lr_max * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (step > s.total_lro_steps) return s.lr_end;
  double span = static_cast<double>(s.total_lro_steps - s.warmup_steps);
  double frac = static_cast<double>(step - s.warmup_steps) / span;
  constexpr double kPi = 3.14159265358979323846;
  return s.lr_end + 0.5 * (s.lr_max - s.lr_end) * (1.0 + std::cos(kPi * frac));
}

void TrainPlan::validate(const LRSchedule& lr) const {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (total_steps < lr.total_lro_steps) {
    throw ValidationError("total_steps must be >= total_lro_steps");
  }
  if (exploration < 0.0 || exploration > 1.0) {
    throw ValidationError("exploration must lie in [0, 1]");
  }
  if (grad_clip < 0.0) throw ValidationError("grad_clip must be non-negative");
}

CollapseDetector::CollapseDetector(int window, double ratio_threshold)
    : window_(window), ratio_threshold_(ratio_threshold) {
  if (window < 1) throw ValidationError("collapse window must be >= 1");
  if (!(ratio_threshold > 0.0) || !(ratio_threshold < 1.0)) {
    throw ValidationError("collapse ratio threshold must lie in (0, 1)");
  }
}

bool CollapseDetector::observe(double mean_length) {
  if (!baseline_) {
    pending_.push_back(mean_length);
    if (pending_.size() == static_cast<size_t>(window_)) {
      double sum = 0.0;
      for (double v : pending_) sum += v;
      baseline_ = sum / static_cast<double>(window_);
      pending_.clear();
    }
    return false;
  }
  recent_.push_back(mean_length);
  if (recent_.size() > static_cast<size_t>(window_)) recent_.pop_front();
  double sum = 0.0;
  for (double v : recent_) sum += v;
  double windowed = sum / static_cast<double>(recent_.size());
  return windowed < ratio_threshold_ * *baseline_;
}

CollapseDetector::State CollapseDetector::state() const {
  State s;
  s.baseline = baseline_;
  s.pending = pending_;
  s.recent.assign(recent_.begin(), recent_.end());
  return s;
}

void CollapseDetector::restore(const State& s) {
  baseline_ = s.baseline;
  pending_ = s.pending;
  recent_.assign(s.recent.begin(), s.recent.end());
}

namespace {

/// Cumulative policy (A) and scaled reference (B) log-prob arrays along a
/// trajectory: A[i], B[i] cover the first i transitions. Forced terminal
/// steps contribute zero to both.
struct CumulativeLogs {
  std::vector<double> policy;     // A
  std::vector<double> reward;     // B = reference / T
};

CumulativeLogs cumulative_logs(const Trajectory& traj, const ParametricPolicy& policy,
                               const RewardModel& rm, double T) {
  if (!traj.terminal.terminated) throw StateError("trajectory is incomplete");
  if (!(T > 0.0) || T > 1.0) throw ValidationError("reward temperature must lie in (0, 1]");
  const Vocabulary& vocab = policy.vocab();
  const int n = traj.num_transitions();
  CumulativeLogs out;
  out.policy.assign(static_cast<size_t>(n) + 1, 0.0);
  out.reward.assign(static_cast<size_t>(n) + 1, 0.0);
  TokenSequence prefix;
  for (int k = 0; k < n; ++k) {
    Token tok = traj.terminal.tokens[static_cast<size_t>(k)];
    out.policy[static_cast<size_t>(k) + 1] =
        out.policy[static_cast<size_t>(k)] + policy.step_log_prob(traj.prompt, prefix, tok);
    out.reward[static_cast<size_t>(k) + 1] =
        out.reward[static_cast<size_t>(k)] +
        rm.reference().step_log_prob(traj.prompt, prefix, tok) / T;
    if (!vocab.is_terminal(tok)) prefix.append(tok, vocab);
  }
  return out;
}

double pair_residual(const CumulativeLogs& c, int i, int j) {
  return (c.reward[static_cast<size_t>(i)] - c.reward[static_cast<size_t>(j)]) +
         (c.policy[static_cast<size_t>(j)] - c.policy[static_cast<size_t>(i)]);
}

}  // namespace

double subtb_loss(const Trajectory& traj, const ParametricPolicy& policy,
                  const RewardModel& rm, double T, const SubTBConfig& cfg) {
  cfg.validate();
  CumulativeLogs c = cumulative_logs(traj, policy, rm, T);
  const int n = traj.num_transitions();
  if (cfg.include_terminal_only) {
    double d = pair_residual(c, 0, n);
    return d * d;
  }
  double loss = 0.0;
  for (int i = 0; i <= n; ++i) {
    double w = 1.0;
    for (int j = i + 1; j <= n; ++j) {
      w *= cfg.lambda;  // lambda^(j-i)
      double d = pair_residual(c, i, j);
      loss += w * d * d;
    }
  }
  return loss;
}

double tb_loss(const Trajectory& traj, const ParametricPolicy& policy, const RewardModel& rm,
               double T) {
  CumulativeLogs c = cumulative_logs(traj, policy, rm, T);
  double d = pair_residual(c, 0, traj.num_transitions());
  return d * d;
}

GradientTable loss_gradient(std::span<const Trajectory> batch, const ParametricPolicy& policy,
                            const RewardModel& rm, double T, const SubTBConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw ValidationError("loss_gradient requires a nonempty batch");
  const Vocabulary& vocab = policy.vocab();
  GradientTable grads;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  for (const Trajectory& traj : batch) {
    CumulativeLogs c = cumulative_logs(traj, policy, rm, T);
    const int n = traj.num_transitions();
    // Per-transition weight: sum of 2 * lambda^(j-i) * D_ij over pairs
    // spanning the transition.
    std::vector<double> weight(static_cast<size_t>(n), 0.0);
    if (cfg.include_terminal_only) {
      double w = 2.0 * pair_residual(c, 0, n);
      for (int k = 0; k < n; ++k) weight[static_cast<size_t>(k)] += w;
    } else {
      for (int i = 0; i <= n; ++i) {
        double lam = 1.0;
        for (int j = i + 1; j <= n; ++j) {
          lam *= cfg.lambda;
          double w = 2.0 * lam * pair_residual(c, i, j);
          for (int k = i; k < j; ++k) weight[static_cast<size_t>(k)] += w;
        }
      }
    }
    TokenSequence prefix;
    for (int k = 0; k < n; ++k) {
      Token tok = traj.terminal.tokens[static_cast<size_t>(k)];
      policy.accumulate_grad_log_prob(traj.prompt, prefix, tok,
                                      weight[static_cast<size_t>(k)] * inv_batch, grads);
      if (!vocab.is_terminal(tok)) prefix.append(tok, vocab);
    }
  }
  return grads;
}

Trainer::Trainer(TrainPlan plan, LRSchedule lr, SubTBConfig subtb, CollapseDetector detector)
    : plan_(plan), lr_(lr), subtb_(subtb), detector_(std::move(detector)), rng_(mix64(plan.seed)) {
  lr_.validate();
  subtb_.validate();
  plan_.validate(lr_);
}

Trajectory Trainer::rollout(const ParametricPolicy& policy, const Prompt& prompt) {
  Trajectory traj;
  traj.prompt = prompt;
  const Vocabulary& vocab = policy.vocab();
  TokenSequence seq;
  while (!seq.terminated) {
    Distribution d = policy.next_distribution(prompt, seq);
    Token tok;
    if (plan_.exploration > 0.0 && seq.ordinary_length() < policy.max_len() &&
        rng_.next_double() < plan_.exploration) {
      tok = static_cast<Token>(rng_.next_below(static_cast<std::uint64_t>(d.size())));
    } else {
      tok = static_cast<Token>(sample_index(d, rng_));
    }
    bool forced = seq.ordinary_length() == policy.max_len();
    traj.step_logprobs.push_back(forced ? 0.0 : std::log(d.probs[static_cast<size_t>(tok)]));
    seq.append(tok, vocab);
  }
  traj.terminal = std::move(seq);
  return traj;
}

void Trainer::apply_adam(ParametricPolicy& policy, const GradientTable& grads, double lr) {
  const AdamConfig& a = plan_.adam;
  const double t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(a.beta1, t);
  const double bc2 = 1.0 - std::pow(a.beta2, t);
  for (const auto& [ctx, grad] : grads) {
    std::vector<double> g = grad;
    if (plan_.grad_clip > 0.0) {
      double norm = 0.0;
      for (double v : g) norm += v * v;
      norm = std::sqrt(norm);
      if (norm > plan_.grad_clip) {
        double scale = plan_.grad_clip / norm;
        for (double& v : g) v *= scale;
      }
    }
    AdamRow& row = adam_rows_[ctx];
    if (row.m.empty()) {
      row.m.assign(g.size(), 0.0);
      row.v.assign(g.size(), 0.0);
    }
    std::vector<double>& theta = policy.mutable_row(ctx);
    for (size_t i = 0; i < g.size(); ++i) {
      row.m[i] = a.beta1 * row.m[i] + (1.0 - a.beta1) * g[i];
      row.v[i] = a.beta2 * row.v[i] + (1.0 - a.beta2) * g[i] * g[i];
      double m_hat = row.m[i] / bc1;
      double v_hat = row.v[i] / bc2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + a.epsilon);
    }
  }
}

StepMetrics Trainer::train_step(ParametricPolicy& policy, const RewardModel& rm,
                                std::span<const Prompt> corpus) {
  if (corpus.empty()) throw ValidationError("train_step requires a nonempty corpus");
  const double T = temperature_at(rm.schedule(), step_);
  const double lr = lr_at(lr_, step_);

  std::vector<Trajectory> batch;
  batch.reserve(static_cast<size_t>(plan_.batch_size));
  int tokens = 0;
  double total_len = 0.0;
  for (int b = 0; b < plan_.batch_size; ++b) {
    const Prompt& prompt = corpus[(cursor_ + static_cast<std::uint64_t>(b)) % corpus.size()];
    batch.push_back(rollout(policy, prompt));
    total_len += batch.back().terminal.ordinary_length();
    tokens += batch.back().terminal.length();
  }
  cursor_ = (cursor_ + static_cast<std::uint64_t>(plan_.batch_size)) % corpus.size();

  double loss = 0.0;
  for (const Trajectory& traj : batch) loss += subtb_loss(traj, policy, rm, T, subtb_);
  loss /= static_cast<double>(batch.size());

  GradientTable grads = loss_gradient(batch, policy, rm, T, subtb_);
  apply_adam(policy, grads, lr);

  StepMetrics m;
  m.step = step_;
  m.loss = loss;
  m.reward_temperature = T;
  m.learning_rate = lr;
  m.mean_seq_len = total_len / static_cast<double>(batch.size());
  m.collapse = detector_.observe(m.mean_seq_len);
  m.tokens_generated = tokens;
  ++step_;
  return m;
}

void Trainer::restore(int step, std::uint64_t rng_state, std::uint64_t cursor,
                      std::unordered_map<PolicyContext, AdamRow, PolicyContextHash> adam_rows,
                      const CollapseDetector::State& detector_state) {
  step_ = step;
  rng_.set_state(rng_state);
  cursor_ = cursor;
  adam_rows_ = std::move(adam_rows);
  detector_.restore(detector_state);
}

}  // namespace goat
